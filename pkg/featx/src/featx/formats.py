"""Readers/writers for the core toolkit's external file formats.

featx talks to the core only through documented on-disk interfaces: the
JSON-lines manifest it reads, and the binary ADCE/ADCP containers it
writes (little-endian: 4-byte magic, uint32 version=1, uint64 n_rows,
uint32 dim, uint32 dtype code 1=float32, then row-major float32 payload,
with row ids in a `<path>.ids` sidecar, one per line). Outputs are written
atomically (temp file + rename).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_HEADER = struct.Struct("<4sIQII")
MAGIC_EMBED = b"ADCE"
MAGIC_PROB = b"ADCP"


@dataclass
class ManifestRow:
    sample_id: str
    webly_label: int
    uri: str
    content_hash: str | None
    fetch_status: str


def read_manifest(path: str | Path) -> list[ManifestRow]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError(f"{path}: empty manifest")
    header = json.loads(lines[0])
    if header.get("format") != "adc-manifest":
        raise ValueError(f"{path}: not an adc manifest")
    rows = []
    for line in lines[1:]:
        if not line:
            continue
        doc = json.loads(line)
        rows.append(
            ManifestRow(
                sample_id=doc["sample_id"],
                webly_label=doc["webly_label"],
                uri=doc["uri"],
                content_hash=doc["content_hash"],
                fetch_status=doc["fetch_status"],
            )
        )
    return rows


def write_container(magic: bytes, rows: np.ndarray, row_ids: list[str], path: str | Path) -> None:
    rows = np.ascontiguousarray(rows, dtype=np.float32)
    if rows.ndim != 2 or len(row_ids) != rows.shape[0]:
        raise ValueError("rows must be 2-D and aligned with row ids")
    if not np.isfinite(rows).all():
        raise ValueError("non-finite value in output rows")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".{os.getpid()}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(magic, 1, rows.shape[0], rows.shape[1], 1))
        fh.write(rows.tobytes(order="C"))
    os.replace(tmp, path)
    ids_tmp = path.with_name(path.name + f".ids.{os.getpid()}.tmp")
    ids_tmp.write_text("".join(f"{rid}\n" for rid in row_ids), encoding="utf-8")
    os.replace(ids_tmp, Path(str(path) + ".ids"))


def write_embeddings(rows: np.ndarray, row_ids: list[str], path: str | Path) -> None:
    write_container(MAGIC_EMBED, rows, row_ids, path)


def write_probabilities(rows: np.ndarray, row_ids: list[str], path: str | Path) -> None:
    sums = np.asarray(rows, dtype=np.float64).sum(axis=1)
    if rows.size and np.abs(sums - 1.0).max() > 1e-4:
        raise ValueError(f"probability rows must sum to 1 within 1e-4 (worst {sums[np.argmax(np.abs(sums-1))]:.6f})")
    write_container(MAGIC_PROB, rows, row_ids, path)
