import json

import numpy as np
import pytest
import yaml

from adc.cli import main
from adc.config import load_config
from adc.embedstore import EmbeddingMatrix, write_embeddings, write_probabilities
from adc.errors import ConfigError
from adc.manifest import Manifest
from adc.pipeline import run_pipeline
from adc.votes import VoteRecord, save_votes

SMALL_TAXONOMY = {
    "version": "small.v1",
    "classes": [
        {
            "name": "sweater",
            "attributes": [{"name": "color", "options": ["white", "black"]}],
        },
        {
            "name": "shirt",
            "attributes": [{"name": "color", "options": ["red", "navy"]}],
        },
    ],
}


@pytest.fixture
def small_spec(tmp_path):
    path = tmp_path / "taxonomy.yaml"
    path.write_text(yaml.safe_dump(SMALL_TAXONOMY, sort_keys=False))
    return path


def fabricate_embeddings(manifest_path, out_path, seed=0, dim=8):
    """Deterministic class-clustered embeddings for every fetched record."""
    manifest = Manifest.load(manifest_path)
    fetched = manifest.fetched()
    rng = np.random.default_rng(seed)
    n_classes = max(r.webly_label for r in fetched) + 1
    means = rng.normal(size=(n_classes, dim)) * 8.0
    rows = np.stack(
        [means[r.webly_label] + np.random.default_rng(hash(r.sample_id) % 2**32).normal(size=dim)
         for r in fetched]
    ).astype(np.float32)
    write_embeddings(EmbeddingMatrix(rows=rows, row_ids=[r.sample_id for r in fetched]), out_path)
    return len(fetched)


def test_design_commands(small_spec, capsys):
    assert main(["design", "validate", "--spec", str(small_spec)]) == 0
    assert main(["design", "queries", "--spec", str(small_spec)]) == 0
    out = capsys.readouterr().out
    assert "white sweater" in out and out.strip().splitlines()[-1] == "navy shirt"


def test_design_expand_with_canned_file(small_spec, tmp_path, capsys):
    canned = tmp_path / "canned.txt"
    canned.write_text("Crimson\ncrimson\nTeal\nolive\n")
    rc = main(
        ["design", "expand", "--spec", str(small_spec), "--class", "sweater",
         "--attribute", "color", "--min", "2", "--max", "10", "--canned", str(canned)]
    )
    assert rc == 0
    assert capsys.readouterr().out.splitlines() == ["crimson", "teal", "olive"]


def test_collect_and_embed_verify_and_explain(small_spec, tmp_path, capsys):
    out = tmp_path / "run"
    rc = main(
        ["collect", "--spec", str(small_spec), "--backend", "mock:seed=3,per_query=10",
         "--limit", "10", "--workers", "4", "--out", str(out), "--backoff", "0"]
    )
    assert rc == 0
    manifest_path = out / "manifest.jsonl"
    assert manifest_path.exists()

    emb_path = out / "features.adce"
    n = fabricate_embeddings(manifest_path, emb_path)
    assert n == 40
    assert main(["embed", "verify", str(emb_path), "--manifest", str(manifest_path)]) == 0
    assert "0 warnings" in capsys.readouterr().out

    assert main(["explain", str(manifest_path)]) == 0
    assert "fetched: 40" in capsys.readouterr().out
    assert main(["explain", str(emb_path)]) == 0
    assert "N=40" in capsys.readouterr().out


def test_collect_rerun_resumes(small_spec, tmp_path, capsys):
    out = tmp_path / "run"
    args = ["collect", "--spec", str(small_spec), "--backend", "mock:seed=3,per_query=5",
            "--limit", "5", "--workers", "2", "--out", str(out), "--backoff", "0"]
    assert main(args) == 0
    first = (out / "manifest.jsonl").read_bytes()
    assert main(args) == 0
    assert (out / "manifest.jsonl").read_bytes() == first
    assert "skipped=20" in capsys.readouterr().err


def test_curate_and_merge_cli(small_spec, tmp_path, capsys):
    out = tmp_path / "run"
    main(["collect", "--spec", str(small_spec), "--backend", "mock:seed=1,per_query=40",
          "--limit", "40", "--workers", "4", "--out", str(out), "--backoff", "0"])
    manifest_path = out / "manifest.jsonl"
    emb_path = out / "features.adce"
    fabricate_embeddings(manifest_path, emb_path)

    rep_knn = out / "knn.rep"
    rc = main(["curate", "--manifest", str(manifest_path), "--embeddings", str(emb_path),
               "--method", "knn", "--k", "15", "--out", str(rep_knn)])
    assert rc == 0 and rep_knn.exists()

    manifest = Manifest.load(manifest_path)
    fetched = manifest.fetched()
    probs_path = out / "conf.adcp"
    rng = np.random.default_rng(0)
    probs = rng.dirichlet((4.0, 1.0), size=len(fetched)).astype(np.float32)
    probs /= probs.sum(axis=1, keepdims=True)
    write_probabilities(probs, [r.sample_id for r in fetched], probs_path)
    rep_conf = out / "conf.rep"
    rc = main(["curate", "--manifest", str(manifest_path), "--probs", str(probs_path),
               "--method", "conf", "--x-percent", "25", "--out", str(rep_conf)])
    assert rc == 0
    assert "flagged 40/160" in capsys.readouterr().err  # floor(25 * 160 / 100)

    merged = out / "merged.rep"
    rc = main(["curate", "merge", "--mode", "union", str(rep_knn), str(rep_conf), "--out", str(merged)])
    assert rc == 0 and merged.exists()
    assert "combined" in capsys.readouterr().out


def test_votes_cli(tmp_path, capsys):
    votes_path = tmp_path / "v.votes"
    records = (
        [VoteRecord(f"a{i}", ("yes", "yes", "yes")) for i in range(6)]
        + [VoteRecord(f"b{i}", ("yes", "no", "yes")) for i in range(2)]
        + [VoteRecord(f"c{i}", ("no", "no", "unsure")) for i in range(2)]
    )
    save_votes(records, votes_path)
    rc = main(["votes", "aggregate", "--votes", str(votes_path), "--policy", "strict"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "clean fraction (strict)\t60.00%" in out
    assert "[20.00%, 40.00%]" in out


def test_eval_cli(tmp_path, capsys):
    from adc.curator import CurationReport

    n = 20
    ids = [f"s{i}" for i in range(n)]
    flags = np.array([1] * 10 + [0] * 10)
    report = CurationReport(method="x", sample_ids=ids, flags=flags, scores=np.zeros(n))
    rep_path = tmp_path / "r.rep"
    report.save(rep_path)
    truth_path = tmp_path / "t.truth"
    corrupted = [1] * 6 + [0] * 4 + [1] * 2 + [0] * 8
    truth_path.write_text("# adc-truth v1\n" + "".join(f"s{i}\t{corrupted[i]}\n" for i in range(n)))
    assert main(["eval", "detect", "--report", str(rep_path), "--truth", str(truth_path)]) == 0
    out = capsys.readouterr().out
    assert "precision\t0.6000" in out and "recall\t0.7500" in out

    acc_path = tmp_path / "a.acc"
    acc_path.write_text("# adc-acc v1\n0.5\n0.7\n")
    assert main(["eval", "dro", "--acc", str(acc_path), "--delta", "0"]) == 0
    assert "value\t0.600000" in capsys.readouterr().out
    assert main(["eval", "dro", "--acc", str(acc_path), "--delta", "inf"]) == 0
    assert "value\t0.500000" in capsys.readouterr().out


def test_cli_reports_errors_cleanly(tmp_path, capsys):
    rc = main(["explain", str(tmp_path / "missing.bin")])
    assert rc == 1
    assert "adc:" in capsys.readouterr().err


def test_explain_corrupted_container_names_failure(tmp_path, capsys):
    import struct

    bad = tmp_path / "trunc.adce"
    bad.write_bytes(struct.pack("<4sIQII", b"ADCE", 1, 100, 8, 1) + b"\x00" * 10)
    assert main(["explain", str(bad)]) == 1
    err = capsys.readouterr().err
    assert "declares" in err and "bytes" in err


# ---------------------------------------------------------------------------
# pipeline via config


def write_pipeline_configs(tmp_path, spec_path, stages):
    base = tmp_path / "base.yaml"
    base.write_text(
        yaml.safe_dump(
            {
                "backend": "mock:seed=7,per_query=30",
                "workers": 4,
                "limit": 30,
                "seed": 5,
                "curation_methods": ["simifeat", "knn"],
                "paths": {"taxonomy": str(spec_path), "output_dir": "out"},
            },
            sort_keys=False,
        )
    )
    child = tmp_path / "project.yaml"
    child.write_text(
        yaml.safe_dump(
            {
                "inherit_from": "base.yaml",
                "stages": stages,
                "paths": {
                    "taxonomy": str(spec_path),
                    "output_dir": "out",
                    "embeddings": "out/features.adce",
                },
                "curate": {"k_simifeat": 10, "k_vote": 15, "relabel": True},
                "subset": {"clean_mode": "union"},
            },
            sort_keys=False,
        )
    )
    return child


def test_config_inheritance(tmp_path, small_spec):
    child = write_pipeline_configs(tmp_path, small_spec, ["collect"])
    config = load_config(child)
    assert config.backend == "mock:seed=7,per_query=30"  # from base
    assert config.stages == ["collect"]  # from child
    assert config.embeddings == tmp_path / "out/features.adce"


def test_pipeline_end_to_end(tmp_path, small_spec):
    collect_only = write_pipeline_configs(tmp_path, small_spec, ["collect"])
    report = run_pipeline(load_config(collect_only))
    assert report.ok
    manifest_path = tmp_path / "out" / "manifest.jsonl"
    assert manifest_path.exists()
    manifest = Manifest.load(manifest_path)
    assert len(manifest.fetched()) == 120  # 4 queries x 30

    fabricate_embeddings(manifest_path, tmp_path / "out" / "features.adce")
    full = write_pipeline_configs(tmp_path, small_spec, ["collect", "curate", "subset"])
    report = run_pipeline(load_config(full))
    assert report.ok
    assert (tmp_path / "out" / "reports" / "simifeat.rep").exists()
    assert (tmp_path / "out" / "reports" / "knn.rep").exists()
    clean_path = tmp_path / "out" / "clean_manifest.jsonl"
    assert clean_path.exists()
    clean = Manifest.load(clean_path)
    assert 0 < len(clean) <= len(manifest)
    run_report = json.loads((tmp_path / "out" / "run_report.json").read_text())
    assert run_report["ok"]
    assert [s["name"] for s in run_report["stages"]] == ["collect", "curate", "subset"]

    # rerun: every stage is a no-op on completed outputs
    before = clean_path.read_bytes()
    report = run_pipeline(load_config(full))
    assert report.ok
    assert clean_path.read_bytes() == before
    stage_counts = {s.name: s.counts for s in report.stages}
    assert stage_counts["curate"]["simifeat"] == "skipped (exists)"
    assert stage_counts["subset"]["clean_subset"] == "skipped (exists)"
    assert stage_counts["collect"]["downloads"] == 0


def test_config_supplies_flag_defaults(tmp_path, small_spec, capsys):
    child = write_pipeline_configs(tmp_path, small_spec, ["collect"])
    # no --spec / --out / --backend: all resolved from the config
    assert main(["collect", "--config", str(child), "--backoff", "0"]) == 0
    manifest_path = tmp_path / "out" / "manifest.jsonl"
    assert manifest_path.exists()
    capsys.readouterr()
    assert main(["design", "queries", "--config", str(child)]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 4


def test_votes_aggregate_writes_verdicts(tmp_path, capsys):
    votes_path = tmp_path / "v.votes"
    save_votes(
        [VoteRecord("a", ("yes", "yes", "yes")), VoteRecord("b", ("no", "no", "no"))], votes_path
    )
    out = tmp_path / "verdicts.txt"
    assert main(["votes", "aggregate", "--votes", str(votes_path), "--policy", "strict",
                 "--out", str(out)]) == 0
    assert out.read_text().splitlines() == ["# adc-verdicts v1", "a\tclean", "b\tnoisy"]


def test_pipeline_missing_taxonomy_fails_before_stages(tmp_path):
    config_path = tmp_path / "bad.yaml"
    config_path.write_text(
        yaml.safe_dump({"paths": {"taxonomy": "nope.yaml", "output_dir": "out"}, "stages": ["collect"]})
    )
    with pytest.raises(ConfigError):
        run_pipeline(load_config(config_path))


def test_pipeline_stage_failure_named_and_progress_kept(tmp_path, small_spec):
    # embeddings path configured but absent: collect succeeds, curate fails
    full = write_pipeline_configs(tmp_path, small_spec, ["collect", "curate", "subset"])
    report = run_pipeline(load_config(full))
    assert not report.ok
    statuses = {s.name: s.status for s in report.stages}
    assert statuses == {"collect": "ok", "curate": "failed"}  # subset never ran
    failed = [s for s in report.stages if s.status == "failed"][0]
    assert failed.error
    assert (tmp_path / "out" / "manifest.jsonl").exists()  # progress preserved
    run_report = json.loads((tmp_path / "out" / "run_report.json").read_text())
    assert run_report["ok"] is False


def test_run_cli(tmp_path, small_spec, capsys):
    child = write_pipeline_configs(tmp_path, small_spec, ["collect"])
    assert main(["run", "--config", str(child)]) == 0
    assert "collect: ok" in capsys.readouterr().err
