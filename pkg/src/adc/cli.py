"""Command-line entry point wiring every stage of the toolkit.

Subcommands: design, collect, curate, votes, subset, eval, embed, explain,
run. Diagnostics go to stderr; data goes to files (or stdout when --out is
omitted where that makes sense). Exit status is 0 iff no fatal error.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import curator, subsetter, votes
from .backends import get_backend
from .collector import ContentStore, FetchPolicy, dedup_and_validate, plan_fetch, run_fetch
from .config import load_config
from .curator import CurationReport
from .embedstore import verify_alignment
from .errors import AdcError, FormatError
from .evalkit import DeltaWorstSpec, DetectionOutcome, delta_worst_accuracy, detection_prf
from .manifest import Manifest
from .pipeline import explain, run_detector, run_pipeline
from .taxonomy import (
    CannedPromptClient,
    ReplayPromptClient,
    expand_attributes,
    generate_queries,
    load_taxonomy,
    validate_taxonomy,
)

log = logging.getLogger("adc")

TRUTH_HEADER = "# adc-truth v1"
ACC_HEADER = "# adc-acc v1"


def _err(msg: str) -> None:
    print(f"adc: {msg}", file=sys.stderr)


def _require(args, *names) -> None:
    missing = [n for n in names if getattr(args, n.replace("-", "_"), None) in (None, "")]
    if missing:
        raise AdcError(f"{args.command} {getattr(args, 'action', '')}: missing --" + ", --".join(missing))


def _fill_from_config(args, **getters) -> None:
    """Every subcommand takes --config; unset flags fall back to its values."""
    if not getattr(args, "config", None):
        return
    config = load_config(args.config)
    for name, getter in getters.items():
        if getattr(args, name, None) is None:
            value = getter(config)
            setattr(args, name, str(value) if isinstance(value, Path) else value)


# ---------------------------------------------------------------------------
# design


def cmd_design(args) -> int:
    _fill_from_config(args, spec=lambda c: c.taxonomy)
    if not args.spec:
        raise AdcError("design needs --spec (or --config with paths.taxonomy)")
    spec = load_taxonomy(args.spec)
    if args.action == "validate":
        report = validate_taxonomy(spec)
        print(report)
        return 0 if report.ok else 1
    if args.action == "queries":
        queries = generate_queries(spec)
        if args.out:
            Path(args.out).write_text("".join(q + "\n" for _, q in queries), encoding="utf-8")
            _err(f"{len(queries)} queries -> {args.out}")
        else:
            for _, q in queries:
                print(q)
        return 0
    if args.action == "expand":
        if args.replay:
            client = ReplayPromptClient(args.replay)
        elif args.canned:
            client = CannedPromptClient(Path(args.canned).read_text(encoding="utf-8"))
        else:
            from .taxonomy import HttpPromptClient

            client = HttpPromptClient()
        audit: list[tuple[str, str]] = []
        options = expand_attributes(
            spec, args.class_name, args.attribute, (args.min, args.max), client, audit_trail=audit
        )
        for opt in options:
            print(opt)
        if args.audit_out:
            import json

            with open(args.audit_out, "a", encoding="utf-8") as fh:
                for prompt, response in audit:
                    fh.write(json.dumps({"prompt": prompt, "response": response}) + "\n")
        return 0
    raise AdcError(f"unknown design action {args.action!r}")


# ---------------------------------------------------------------------------
# collect


def cmd_collect(args) -> int:
    _fill_from_config(
        args,
        spec=lambda c: c.taxonomy,
        backend=lambda c: c.backend,
        limit=lambda c: c.limit,
        workers=lambda c: c.workers,
        out=lambda c: c.output_dir,
        seed=lambda c: c.seed,
    )
    if not args.spec or not args.out:
        raise AdcError("collect needs --spec and --out (or --config)")
    spec = load_taxonomy(args.spec)
    queries = generate_queries(spec)
    tasks = plan_fetch(queries, limit=args.limit if args.limit is not None else 100)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.jsonl"
    if manifest_path.exists():
        manifest = Manifest.load(manifest_path)
        _err(f"resuming manifest with {len(manifest)} records")
    else:
        manifest = Manifest(taxonomy_version=spec.version, seed=args.seed if args.seed is not None else 0)
    backend = get_backend(args.backend if args.backend else "mock")
    store = ContentStore(out_dir / "content")
    manifest, fetch_report = run_fetch(
        tasks,
        backend,
        args.workers if args.workers is not None else 30,
        manifest,
        store,
        policy=FetchPolicy(backoff_base=args.backoff),
    )
    manifest, clean_report = dedup_and_validate(manifest, store)
    manifest.save(manifest_path)
    _err(
        f"tasks={fetch_report.tasks} fetched={fetch_report.fetched} broken={fetch_report.broken} "
        f"duplicate={fetch_report.duplicate} skipped={fetch_report.skipped_existing} "
        f"malformed={clean_report.malformed}"
    )
    return 0


# ---------------------------------------------------------------------------
# curate


def cmd_curate_run(args) -> int:
    _fill_from_config(
        args,
        manifest=lambda c: c.manifest,
        embeddings=lambda c: c.embeddings,
        probs=lambda c: c.probs,
        seed=lambda c: c.seed,
    )
    _require(args, "manifest")
    manifest = Manifest.load(args.manifest)
    options = {"x_percent": args.x_percent, "relabel": args.relabel}
    if args.k is not None:
        options["k_simifeat"] = args.k
        options["k_vote"] = args.k
        options["k_relabel"] = args.k
    report = run_detector(
        args.method,
        manifest,
        Path(args.embeddings) if args.embeddings else None,
        Path(args.probs) if args.probs else None,
        args.seed if args.seed is not None else 0,
        options,
    )
    report.save(args.out)
    _err(f"{report.method}: flagged {int(report.flags.sum())}/{report.n} -> {args.out}")
    return 0


def cmd_curate_merge(args) -> int:
    reports = [CurationReport.load(p) for p in args.reports]
    merged, stats = curator.merge_filters(reports, mode=args.mode)
    if args.out:
        merged.save(args.out)
    per_method = ", ".join(f"{m}: {100 * f:.2f}%" for m, f in stats.per_method.items())
    print(
        f"{per_method}; overlap {100 * stats.overlap_fraction:.2f}%; "
        f"combined {100 * stats.combined_fraction:.2f}%; "
        f"intersection {100 * stats.intersection_fraction:.2f}%"
    )
    return 0


# ---------------------------------------------------------------------------
# votes


def cmd_votes(args) -> int:
    _fill_from_config(args, manifest=lambda c: c.manifest, seed=lambda c: c.seed)
    if args.action == "export-filter":
        _require(args, "manifest", "out")
        manifest = Manifest.load(args.manifest)
        bundles = votes.export_filter_bundles(
            manifest,
            args.out,
            group_size=args.group_size,
            min_select=args.min_select,
            tasks_per_bundle=args.tasks_per_bundle,
            seed=args.seed if args.seed is not None else 0,
        )
        _err(f"{len(bundles)} groups -> {args.out}")
        return 0
    if args.action == "import-filter":
        _require(args, "manifest", "bundles", "selections")
        manifest = Manifest.load(args.manifest)
        bundles = votes.load_filter_bundles(args.bundles)
        selections = votes.load_selections(args.selections)
        manifest, report = votes.import_filter_selections(bundles, selections, manifest)
        manifest.save(args.out or args.manifest)
        _err(
            f"marked {report.marked} clean candidates; rejected groups: {len(report.rejected_groups)}; "
            f"unknown groups: {len(report.unknown_groups)}"
        )
        return 0
    if args.action == "aggregate":
        _require(args, "votes")
        records = votes.load_votes(args.votes)
        agg = votes.aggregate_votes(records, args.policy)
        fracs = agg.pattern_fractions()
        interval = votes.estimate_noise_interval(fracs)
        for pattern in votes.PATTERNS:
            print(f"{pattern}\t{agg.pattern_counts[pattern]}\t{100 * fracs[pattern]:.2f}%")
        print(f"clean fraction ({args.policy})\t{100 * agg.clean_fraction:.2f}%")
        print(
            f"noise interval\t[{100 * interval.lower:.2f}%, {100 * interval.upper:.2f}%]"
            f"\tambiguity {100 * interval.ambiguity:.2f}%"
        )
        if args.out:
            lines = ["# adc-verdicts v1"]
            lines.extend(
                f"{rec.sample_id}\t{'clean' if agg.verdicts[rec.sample_id] else 'noisy'}"
                for rec in records
            )
            Path(args.out).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
            _err(f"per-sample verdicts -> {args.out}")
        return 0
    raise AdcError(f"unknown votes action {args.action!r}")


# ---------------------------------------------------------------------------
# subset


def cmd_subset(args) -> int:
    _fill_from_config(args, manifest=lambda c: c.manifest, seed=lambda c: c.seed)
    if args.seed is None:
        args.seed = 0
    _require(args, "manifest")
    manifest = Manifest.load(args.manifest)
    if args.action == "longtail":
        _require(args, "out")
        by_label: dict[int, int] = {}
        for rec in manifest.fetched():
            by_label[rec.webly_label] = by_label.get(rec.webly_label, 0) + 1
        n_max = args.n_max or max(by_label.values())
        dist = subsetter.longtail_counts(n_max, len(by_label), args.rho)
        subset = subsetter.build_longtail_subset(manifest, dist, seed=args.seed)
        subset.save(args.out)
        _err(f"long-tail subset rho={args.rho}: {len(subset)} samples -> {args.out}")
        return 0
    if args.action == "clean":
        _require(args, "reports", "out")
        reports = [CurationReport.load(p.strip()) for p in args.reports.split(",")]
        from .pipeline import _align_report_to_manifest

        reports = [_align_report_to_manifest(r, manifest) for r in reports]
        subset, stats = subsetter.build_clean_subset(manifest, reports, mode=args.mode)
        subset.save(args.out)
        retained = 100 * len(subset) / len(manifest) if len(manifest) else 0.0
        _err(f"clean subset: retained {len(subset)} ({retained:.2f}%) -> {args.out}")
        if stats:
            _err(f"stats: {stats.as_dict()}")
        return 0
    if args.action == "split":
        manifest = subsetter.split_dataset(
            manifest,
            eval_size=args.eval,
            test_size=args.test,
            seed=args.seed,
            stratify=not args.no_stratify,
            tiny=args.tiny,
        )
        manifest.save(args.out or args.manifest)
        splits: dict[str, int] = {}
        for rec in manifest.records:
            splits[rec.split] = splits.get(rec.split, 0) + 1
        _err(f"splits: {splits}")
        return 0
    raise AdcError(f"unknown subset action {args.action!r}")


# ---------------------------------------------------------------------------
# eval


def _load_truth(path: str) -> dict[str, bool]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != TRUTH_HEADER:
        raise FormatError(f"{path}: not a truth file (expected {TRUTH_HEADER!r})")
    out: dict[str, bool] = {}
    for ln, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        sid, _, val = line.partition("\t")
        if val not in ("0", "1"):
            raise FormatError(f"{path}:{ln}: corruption flag must be 0 or 1")
        out[sid] = val == "1"
    return out


def cmd_eval(args) -> int:
    if args.action == "detect":
        _require(args, "report", "truth")
        report = CurationReport.load(args.report)
        truth = _load_truth(args.truth)
        missing = [sid for sid in report.sample_ids if sid not in truth]
        if missing:
            raise AdcError(f"{len(missing)} report ids missing from truth file (first: {missing[0]})")
        outcome = DetectionOutcome(
            flags=report.flags.astype(bool),
            is_corrupted=np.array([truth[sid] for sid in report.sample_ids]),
        )
        prf = detection_prf(outcome)

        def fmt(x: float | None) -> str:
            return "undefined" if x is None else f"{x:.4f}"

        print(f"precision\t{fmt(prf.precision)}")
        print(f"recall\t{fmt(prf.recall)}")
        print(f"f1\t{fmt(prf.f1)}")
        return 0
    if args.action == "dro":
        _require(args, "acc")
        lines = Path(args.acc).read_text(encoding="utf-8").splitlines()
        if not lines or lines[0] != ACC_HEADER:
            raise FormatError(f"{args.acc}: not an accuracy file (expected {ACC_HEADER!r})")
        acc = np.array([float(line) for line in lines[1:] if line])
        delta = math.inf if args.delta == "inf" else float(args.delta)
        result = delta_worst_accuracy(DeltaWorstSpec(accuracies=acc, delta=delta))
        print(f"delta\t{args.delta}")
        print(f"value\t{result.value:.6f}")
        print("weights\t" + ",".join(f"{w:.6f}" for w in result.weights))
        return 0
    raise AdcError(f"unknown eval action {args.action!r}")


# ---------------------------------------------------------------------------
# embed verify / explain / run


def cmd_embed_verify(args) -> int:
    _fill_from_config(args, manifest=lambda c: c.manifest)
    _require(args, "manifest")
    manifest = Manifest.load(args.manifest)
    warnings = verify_alignment(args.file, manifest.ids())
    for w in warnings:
        print(f"warning: {w}")
    if not warnings:
        print("ok: container aligned with manifest, 0 warnings")
    return 0 if not warnings else 1


def cmd_explain(args) -> int:
    print(explain(args.path))
    return 0


def cmd_run(args) -> int:
    if not args.config:
        raise AdcError("run needs --config")
    config = load_config(args.config)
    logging.basicConfig(level=getattr(logging, config.log_level.upper(), logging.INFO), stream=sys.stderr)
    report = run_pipeline(config)
    for stage in report.stages:
        line = f"{stage.name}: {stage.status} ({stage.seconds:.2f}s)"
        if stage.error:
            line += f" - {stage.error}"
        _err(line)
    return 0 if report.ok else 1


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="project config supplying defaults for unset flags")
        return p

    p = add("design", "validate a taxonomy, emit queries, expand attributes")
    p.add_argument("action", choices=["validate", "queries", "expand"])
    p.add_argument("--spec")
    p.add_argument("--out")
    p.add_argument("--class", dest="class_name")
    p.add_argument("--attribute")
    p.add_argument("--min", type=int, default=30)
    p.add_argument("--max", type=int, default=80)
    p.add_argument("--canned", help="file with a canned completion")
    p.add_argument("--replay", help="YAML prompt->response replay file")
    p.add_argument("--audit-out", help="append raw prompt/response pairs here")
    p.set_defaults(fn=cmd_design)

    p = add("collect", "run search + download into a manifest")
    p.add_argument("--spec")
    p.add_argument("--backend")
    p.add_argument("--limit", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--backoff", type=float, default=0.1)
    p.set_defaults(fn=cmd_collect)

    p = add("curate", "run a detector (or merge reports with 'curate merge')")
    p.add_argument("--manifest")
    p.add_argument("--embeddings")
    p.add_argument("--probs")
    p.add_argument("--method", required=True, choices=["simifeat", "knn", "cl", "cores", "conf"])
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--x-percent", type=float, default=25.0)
    p.add_argument("--relabel", action="store_true")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_curate_run)

    p = add("curate-merge", "merge curation reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--mode", choices=["union", "intersection"], default="union")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_curate_merge)

    p = add("votes", "export bundles, import selections, aggregate votes")
    p.add_argument("action", choices=["export-filter", "import-filter", "aggregate"])
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--bundles")
    p.add_argument("--selections")
    p.add_argument("--votes", dest="votes")
    p.add_argument("--policy", choices=["majority", "strict"], default="majority")
    p.add_argument("--group-size", type=int, default=20)
    p.add_argument("--min-select", type=int, default=4)
    p.add_argument("--tasks-per-bundle", type=int, default=10)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_votes)

    p = add("subset", "long-tail, clean, or split subsets")
    p.add_argument("action", choices=["longtail", "clean", "split"])
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--rho", type=float, default=10.0)
    p.add_argument("--n-max", type=int)
    p.add_argument("--reports", help="comma-separated report files")
    p.add_argument("--mode", choices=["union", "intersection"], default="union")
    p.add_argument("--eval", type=int, default=20_000)
    p.add_argument("--test", type=int, default=20_000)
    p.add_argument("--tiny", type=int)
    p.add_argument("--no-stratify", action="store_true")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_subset)

    p = add("eval", "detection metrics or delta-worst accuracy")
    p.add_argument("action", choices=["detect", "dro"])
    p.add_argument("--report")
    p.add_argument("--truth")
    p.add_argument("--acc")
    p.add_argument("--delta", default="0")
    p.set_defaults(fn=cmd_eval)

    p = add("embed", "embedding container utilities")
    p.add_argument("action", choices=["verify"])
    p.add_argument("file")
    p.add_argument("--manifest")
    p.set_defaults(fn=cmd_embed_verify)

    p = add("explain", "summarize any artifact file")
    p.add_argument("path")
    p.set_defaults(fn=cmd_explain)

    p = add("run", "run the configured pipeline end to end")
    p.set_defaults(fn=cmd_run)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    # `adc curate merge ...` reads more naturally than `adc curate-merge ...`
    if argv[:2] == ["curate", "merge"]:
        argv = ["curate-merge"] + argv[2:]
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (AdcError, OSError) as exc:
        _err(str(exc))
        return 1


if __name__ == "__main__":
    sys.exit(main())
