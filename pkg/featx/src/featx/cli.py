"""featx command line: `featx embed` and `featx conf`."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .extract import ExtractionJob, extract_confidences, extract_embeddings


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="featx", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--manifest", required=True)
        p.add_argument("--images", required=True, help="image root (content store or corpus dir)")
        p.add_argument("--out", required=True)
        p.add_argument("--backbone", default="resnet50")
        p.add_argument("--batch-size", type=int, default=32)
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("embed", help="encode fetched images into an ADCE container")
    common(p)

    p = sub.add_parser("conf", help="early-stopped linear-head confidences into an ADCP container")
    common(p)
    p.add_argument("--epochs", type=int, default=2, choices=(1, 2))
    p.add_argument(
        "--percentile-preview",
        type=float,
        default=None,
        metavar="X",
        help="after writing, print the confidence threshold a lowest-X%% filter would use",
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr)
    args = build_parser().parse_args(argv)
    job = ExtractionJob(
        manifest_path=Path(args.manifest),
        image_root=Path(args.images),
        output_path=Path(args.out),
        backbone=args.backbone,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    try:
        return _run(args, job)
    except (RuntimeError, ValueError, OSError) as exc:
        print(f"featx: {exc}", file=sys.stderr)
        return 1


def _run(args, job: ExtractionJob) -> int:
    if args.command == "embed":
        ids = extract_embeddings(job)
        print(f"encoded {len(ids)} rows -> {args.out} ({len(job.skipped)} skipped)", file=sys.stderr)
        return 0
    ids = extract_confidences(job, epochs=args.epochs)
    print(f"wrote confidences for {len(ids)} rows -> {args.out}", file=sys.stderr)
    if args.percentile_preview is not None:
        from .formats import read_manifest  # labels for self-confidence

        labels = {r.sample_id: r.webly_label for r in read_manifest(args.manifest)}
        import struct

        with open(args.out, "rb") as fh:
            magic, version, n, k, dtype = struct.unpack("<4sIQII", fh.read(24))
            rows = np.fromfile(fh, dtype="<f4").reshape(n, k)
        conf = np.array([rows[i][labels[sid]] for i, sid in enumerate(ids)])
        threshold = float(np.percentile(conf, args.percentile_preview))
        below = int((conf < threshold).sum())
        print(
            f"lowest-{args.percentile_preview:g}% filter preview: threshold {threshold:.4f}, "
            f"{below} rows below",
            file=sys.stderr,
        )
    return 0


if __name__ == "__main__":
    sys.exit(main())
