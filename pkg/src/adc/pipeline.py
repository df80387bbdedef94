"""Pipeline orchestration: design -> collect -> curate -> subset, resumable.

Each stage is idempotent: collect skips samples already in the manifest,
curate skips report files that exist, subset skips an existing cleaned
manifest. A machine-readable run report (JSON) lands in the output
directory after every run, successful or not.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import curator, subsetter, votes
from .backends import get_backend
from .collector import ContentStore, FetchPolicy, dedup_and_validate, plan_fetch, run_fetch
from .config import ProjectConfig
from .curator import CurationReport
from .embedstore import (
    MAGIC_EMBED,
    MAGIC_PROB,
    read_embeddings,
    read_probabilities,
)
from .errors import AlignmentError, ConfigError, FormatError
from .manifest import Manifest
from .seeding import derive_seed
from .taxonomy import (
    CannedPromptClient,
    ReplayPromptClient,
    expand_attributes,
    generate_queries,
    load_taxonomy,
    validate_taxonomy,
)

log = logging.getLogger(__name__)


@dataclass
class StageResult:
    name: str
    status: str  # ok | skipped | failed
    counts: dict = field(default_factory=dict)
    seconds: float = 0.0
    error: str | None = None


@dataclass
class RunReport:
    stages: list[StageResult] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(s.status != "failed" for s in self.stages)

    def as_dict(self) -> dict:
        return {
            "ok": self.ok,
            "stages": [
                {
                    "name": s.name,
                    "status": s.status,
                    "counts": s.counts,
                    "seconds": round(s.seconds, 3),
                    "error": s.error,
                }
                for s in self.stages
            ],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.as_dict(), indent=2) + "\n", encoding="utf-8")


def _load_aligned_labels(manifest: Manifest, row_ids: list[str]) -> np.ndarray:
    by_id = manifest.by_id()
    missing = [rid for rid in row_ids if rid not in by_id]
    if missing:
        raise AlignmentError(f"{len(missing)} embedding rows missing from manifest (first: {missing[0]})")
    return np.array([by_id[rid].webly_label for rid in row_ids], dtype=np.int64)


def run_detector(
    method: str,
    manifest: Manifest,
    embeddings_path: Path | None,
    probs_path: Path | None,
    seed: int,
    options: dict | None = None,
) -> CurationReport:
    """Run one named detector against manifest-aligned inputs."""
    options = options or {}
    if method in ("simifeat", "knn"):
        if embeddings_path is None:
            raise ConfigError(f"method {method!r} needs an embeddings file")
        matrix = read_embeddings(embeddings_path)
        labels = _load_aligned_labels(manifest, matrix.row_ids)
        if method == "knn":
            report = curator.knn_vote_detect(matrix, labels, k=int(options.get("k_vote", 100)))
        else:
            K = int(labels.max()) + 1
            t_est = curator.estimate_transition(matrix, labels, K, seed=seed)
            report = curator.simifeat_detect(matrix, labels, t_est, k=int(options.get("k_simifeat", 10)))
            if options.get("relabel", True):
                report = curator.knn_relabel(matrix, labels, report, k=int(options.get("k_relabel", 10)))
        report.seed = seed
        return report
    if method in ("cl", "cores", "conf"):
        if probs_path is None:
            raise ConfigError(f"method {method!r} needs a probability file")
        probs, row_ids = read_probabilities(probs_path)
        labels = _load_aligned_labels(manifest, row_ids)
        if method == "cl":
            report = curator.confident_learning_detect(probs, labels, row_ids)
        elif method == "cores":
            report = curator.cores_score_detect(probs, labels, row_ids, sign=options.get("cores_sign", "flag_above"))
        else:
            report = curator.confidence_percentile_filter(
                probs, labels, row_ids, x_percent=float(options.get("x_percent", 25.0))
            )
        report.seed = seed
        return report
    raise ConfigError(f"unknown detector {method!r}")


def run_pipeline(config: ProjectConfig) -> RunReport:
    """Execute the configured stages in order; any fatal error stops the run
    with the stage name recorded, keeping whatever progress was persisted."""
    config.validate()
    config.output_dir.mkdir(parents=True, exist_ok=True)
    report = RunReport()

    def run_stage(name: str, fn) -> bool:
        start = time.monotonic()
        try:
            counts = fn()
            report.stages.append(StageResult(name, "ok", counts or {}, time.monotonic() - start))
            return True
        except Exception as exc:  # noqa: BLE001 - abort with the stage named, keep progress
            log.error("stage %s failed: %s", name, exc)
            report.stages.append(
                StageResult(name, "failed", {}, time.monotonic() - start, error=f"{type(exc).__name__}: {exc}")
            )
            return False

    def design_stage() -> dict:
        spec = load_taxonomy(config.taxonomy)
        validation = validate_taxonomy(spec)
        if not validation.ok:
            raise ConfigError(f"taxonomy invalid: {validation}")
        counts = {"classes": len(spec.classes), "subclasses": spec.total_subclasses()}
        expansions = config.design_options.get("expand", [])
        audit: list[tuple[str, str]] = []
        for item in expansions:
            if "replay" in item:
                client = ReplayPromptClient(config.taxonomy.parent / item["replay"])
            elif "canned" in item:
                client = CannedPromptClient(str(item["canned"]))
            else:
                raise ConfigError("design.expand entries need a 'replay' or 'canned' client")
            options = expand_attributes(
                spec,
                item["class"],
                item["attribute"],
                (int(item.get("min", 30)), int(item.get("max", 80))),
                client,
                audit_trail=audit,
            )
            counts[f"expanded:{item['class']}/{item['attribute']}"] = len(options)
        if audit:
            audit_path = config.output_dir / "design_audit.jsonl"
            with open(audit_path, "a", encoding="utf-8") as fh:
                for prompt, response in audit:
                    fh.write(json.dumps({"prompt": prompt, "response": response}) + "\n")
        return counts

    def collect_stage() -> dict:
        spec = load_taxonomy(config.taxonomy)
        queries = generate_queries(spec)
        tasks = plan_fetch(queries, limit=config.limit)
        if config.manifest.exists():
            manifest = Manifest.load(config.manifest)
        else:
            manifest = Manifest(taxonomy_version=spec.version, seed=config.seed)
        backend = get_backend(config.backend)
        store = ContentStore(config.output_dir / "content")
        manifest, fetch_report = run_fetch(
            tasks, backend, config.workers, manifest, store, policy=FetchPolicy(backoff_base=0.01)
        )
        manifest, clean_report = dedup_and_validate(manifest, store)
        manifest.save(config.manifest)
        return {**fetch_report.as_dict(), "post_validate": clean_report.as_dict()}

    def curate_stage() -> dict:
        manifest = Manifest.load(config.manifest)
        config.reports_dir.mkdir(parents=True, exist_ok=True)
        counts: dict = {}
        for method in config.curation_methods:
            out_path = config.reports_dir / f"{method}.rep"
            if out_path.exists():
                counts[method] = "skipped (exists)"
                continue
            stage_seed = derive_seed(config.seed, f"curate:{method}")
            detector_report = run_detector(
                method, manifest, config.embeddings, config.probs, stage_seed, config.curate_options
            )
            detector_report.save(out_path)
            counts[method] = {
                "flagged": int(detector_report.flags.sum()),
                "fraction": round(detector_report.flagged_fraction(), 6),
            }
        return counts

    def subset_stage() -> dict:
        manifest = Manifest.load(config.manifest)
        clean_path = config.output_dir / "clean_manifest.jsonl"
        counts: dict = {}
        if clean_path.exists():
            counts["clean_subset"] = "skipped (exists)"
        else:
            reports = []
            for method in config.curation_methods:
                rep_path = config.reports_dir / f"{method}.rep"
                if rep_path.exists():
                    loaded = CurationReport.load(rep_path)
                    full = _align_report_to_manifest(loaded, manifest)
                    reports.append(full)
            mode = config.subset_options.get("clean_mode", "union")
            clean, stats = subsetter.build_clean_subset(manifest, reports, mode=mode)
            eval_size = int(config.subset_options.get("eval_size", 0))
            test_size = int(config.subset_options.get("test_size", 0))
            if eval_size or test_size:
                tiny = config.subset_options.get("tiny")
                clean = subsetter.split_dataset(
                    clean,
                    eval_size=eval_size,
                    test_size=test_size,
                    seed=derive_seed(config.seed, "subset:split"),
                    tiny=int(tiny) if tiny else None,
                )
            clean.save(clean_path)
            counts["clean_subset"] = {
                "kept": len(clean),
                "stats": stats.as_dict() if stats else None,
            }
        return counts

    stage_fns = {
        "design": design_stage,
        "collect": collect_stage,
        "curate": curate_stage,
        "subset": subset_stage,
    }
    for stage in config.stages:
        if not run_stage(stage, stage_fns[stage]):
            break
    report.save(config.output_dir / "run_report.json")
    return report


def _align_report_to_manifest(report: CurationReport, manifest: Manifest) -> CurationReport:
    """Expand a report that covers a subset of the manifest (e.g. only
    fetched rows) to full manifest order, unflagged elsewhere."""
    ids = manifest.ids()
    if report.sample_ids == ids:
        return report
    pos = {sid: i for i, sid in enumerate(report.sample_ids)}
    flags = np.zeros(len(ids), dtype=np.int64)
    scores = np.zeros(len(ids), dtype=np.float64)
    for i, sid in enumerate(ids):
        j = pos.get(sid)
        if j is not None:
            flags[i] = report.flags[j]
            scores[i] = report.scores[j]
    return CurationReport(method=report.method, sample_ids=ids, flags=flags, scores=scores, seed=report.seed)


# ---------------------------------------------------------------------------
# Artifact inspection


def explain(path: str | Path) -> str:
    """Human-readable summary of any artifact this package writes."""
    path = Path(path)
    if not path.exists():
        raise FormatError(f"{path}: no such file")
    with open(path, "rb") as fh:
        head = fh.read(64)
    if head[:4] in (MAGIC_EMBED, MAGIC_PROB):
        return _explain_container(path, head[:4])
    text_head = head.decode("utf-8", errors="replace")
    if text_head.startswith('{"format":"adc-manifest"'):
        manifest = Manifest.load(path)
        lines = [f"manifest: {len(manifest)} records, taxonomy {manifest.taxonomy_version}, seed {manifest.seed}"]
        for status, count in manifest.status_counts().items():
            lines.append(f"  {status}: {count}")
        lines.append(f"  clean_candidates: {sum(r.clean_candidate for r in manifest.records)}")
        return "\n".join(lines)
    if text_head.startswith('{"format":"adc-report"'):
        rep = CurationReport.load(path)
        return (
            f"curation report: method {rep.method}, {rep.n} records, "
            f"{int(rep.flags.sum())} flagged ({100 * rep.flagged_fraction():.2f}%), seed {rep.seed}"
        )
    if text_head.startswith(votes.VOTES_HEADER):
        records = votes.load_votes(path)
        agg = votes.aggregate_votes(records, "majority")
        fracs = agg.pattern_fractions()
        table = ", ".join(f"{p}: {100 * fracs[p]:.2f}%" for p in votes.PATTERNS)
        return f"votes: {len(records)} records; {table}"
    if text_head.startswith(votes.BUNDLE_HEADER):
        bundles = votes.load_filter_bundles(path)
        total = sum(len(b.sample_ids) for b in bundles)
        return f"filter bundles: {len(bundles)} groups, {total} samples"
    if text_head.startswith(votes.SELECTIONS_HEADER):
        sel = votes.load_selections(path)
        return f"selections: {len(sel)} groups, {sum(len(v) for v in sel.values())} picks"
    if path.suffix in (".yaml", ".yml"):
        try:
            spec = load_taxonomy(path)
        except Exception:
            pass
        else:
            validation = validate_taxonomy(spec)
            return (
                f"taxonomy {spec.version}: {len(spec.classes)} classes, "
                f"{spec.total_subclasses()} subclasses, "
                + ("valid" if validation.ok else f"INVALID\n{validation}")
            )
    raise FormatError(f"{path}: unrecognized artifact format")


def _explain_container(path: Path, magic: bytes) -> str:
    if magic == MAGIC_EMBED:
        matrix = read_embeddings(path)
        return f"embeddings ADCE v1: N={matrix.n_rows}, d={matrix.dim}, finite, non-zero rows"
    rows, row_ids = read_probabilities(path)
    return f"probabilities ADCP v1: N={rows.shape[0]}, K={rows.shape[1]}, rows sum to 1"
