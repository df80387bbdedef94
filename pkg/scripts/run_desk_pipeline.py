#!/usr/bin/env python3
"""End-to-end desk-scale demo, fully offline.

Builds a local-corpus fixture (three classes of tiny PNGs, some truncated,
some duplicated), collects it into a manifest, fabricates class-clustered
embeddings with ~15% planted label noise standing in for a feature
extractor, then runs curation and subset construction through the
pipeline. Everything is seeded; rerunning reproduces identical artifacts.

Usage: python3 scripts/run_desk_pipeline.py [--workdir DIR] [--seed N]
"""

import argparse
import hashlib
import sys
from pathlib import Path

import numpy as np
import yaml

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from adc.backends import query_slug, tiny_png  # noqa: E402
from adc.config import load_config  # noqa: E402
from adc.embedstore import EmbeddingMatrix, write_embeddings  # noqa: E402
from adc.manifest import Manifest  # noqa: E402
from adc.pipeline import explain, run_pipeline  # noqa: E402
from adc.taxonomy import generate_queries, load_taxonomy  # noqa: E402

TAXONOMY = {
    "version": "demo.v1",
    "classes": [
        {"name": "sweater", "attributes": [{"name": "color", "options": ["white", "black", "red"]}]},
        {"name": "jacket", "attributes": [{"name": "color", "options": ["white", "black", "red"]}]},
        {"name": "dress", "attributes": [{"name": "color", "options": ["white", "black", "red"]}]},
    ],
}

PER_QUERY = 40
TRUNCATED_PER_QUERY = 4
NOISE_RATE = 0.15


def build_corpus(root: Path, taxonomy_path: Path, seed: int) -> None:
    spec = load_taxonomy(taxonomy_path)
    rng = np.random.default_rng(seed)
    for key, query in generate_queries(spec):
        folder = root / query_slug(query)
        folder.mkdir(parents=True, exist_ok=True)
        for i in range(PER_QUERY):
            rgb = tuple(int(v) for v in rng.integers(0, 256, size=3))
            payload = tiny_png(rgb)
            if i < TRUNCATED_PER_QUERY:
                payload = payload[:-12]  # fails the image sniff -> malformed
            (folder / f"{i:03d}.png").write_bytes(payload)


def fabricate_embeddings(manifest_path: Path, out_path: Path, seed: int, dim: int = 16) -> int:
    """Stand-in for the feature-extraction tool: class-clustered rows with a
    seeded fraction drawn from the wrong cluster (the planted label noise)."""
    manifest = Manifest.load(manifest_path)
    fetched = manifest.fetched()
    rng = np.random.default_rng(seed)
    n_classes = max(r.webly_label for r in fetched) + 1
    means = rng.normal(size=(n_classes, dim)) * 8.0
    rows = []
    planted = 0
    for rec in fetched:
        h = int.from_bytes(hashlib.sha256(rec.sample_id.encode()).digest()[:8], "little")
        row_rng = np.random.default_rng(h)
        true_class = rec.webly_label
        if row_rng.random() < NOISE_RATE:
            true_class = int(row_rng.integers(0, n_classes))
            planted += true_class != rec.webly_label
        rows.append(means[true_class] + row_rng.normal(size=dim))
    matrix = EmbeddingMatrix(
        rows=np.asarray(rows, dtype=np.float32), row_ids=[r.sample_id for r in fetched]
    )
    write_embeddings(matrix, out_path)
    print(f"fabricated {len(rows)} embeddings ({planted} with planted label noise) -> {out_path}")
    return len(rows)


def write_config(workdir: Path, taxonomy_path: Path, corpus: Path, stages: list[str], seed: int) -> Path:
    config = {
        "paths": {
            "taxonomy": str(taxonomy_path),
            "output_dir": str(workdir / "out"),
            "embeddings": str(workdir / "out" / "features.adce"),
        },
        "backend": f"local-corpus:{corpus}",
        "workers": 8,
        "limit": 100,
        "seed": seed,
        "curation_methods": ["simifeat", "knn"],
        "curate": {"k_simifeat": 10, "k_vote": 25, "relabel": True},
        "subset": {"clean_mode": "union"},
        "stages": stages,
    }
    path = workdir / "pipeline.yaml"
    path.write_text(yaml.safe_dump(config, sort_keys=False))
    return path


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", default="demo_run")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    workdir = Path(args.workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    taxonomy_path = workdir / "taxonomy.yaml"
    taxonomy_path.write_text(yaml.safe_dump(TAXONOMY, sort_keys=False))
    corpus = workdir / "corpus"
    build_corpus(corpus, taxonomy_path, args.seed)
    print(f"corpus fixture at {corpus} (9 queries x {PER_QUERY} files, {TRUNCATED_PER_QUERY} truncated each)")

    config_path = write_config(workdir, taxonomy_path, corpus, ["collect"], args.seed)
    report = run_pipeline(load_config(config_path))
    if not report.ok:
        print("collect failed", file=sys.stderr)
        return 1
    manifest_path = workdir / "out" / "manifest.jsonl"
    print(explain(manifest_path))

    fabricate_embeddings(manifest_path, workdir / "out" / "features.adce", args.seed)

    config_path = write_config(workdir, taxonomy_path, corpus, ["collect", "curate", "subset"], args.seed)
    report = run_pipeline(load_config(config_path))
    for stage in report.stages:
        print(f"stage {stage.name}: {stage.status} {stage.counts}")
    if not report.ok:
        return 1
    print(explain(workdir / "out" / "clean_manifest.jsonl"))
    print(f"run report: {workdir / 'out' / 'run_report.json'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
