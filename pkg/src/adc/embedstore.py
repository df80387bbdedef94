"""Binary feature storage and exact cosine k-NN queries.

Container layout (little-endian throughout):

    offset 0   magic      4 bytes, b"ADCE" (embeddings) or b"ADCP" (probabilities)
    offset 4   version    uint32, currently 1
    offset 8   n_rows     uint64
    offset 16  dim        uint32
    offset 20  dtype      uint32, 1 = float32
    offset 24  payload    n_rows * dim float32, row-major

Row ids live in a sidecar text file at ``<path>.ids``, one id per line in
row order. The payload is bit-exact across write/read cycles.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, TruncationError, ZeroNormRowError

MAGIC_EMBED = b"ADCE"
MAGIC_PROB = b"ADCP"
FORMAT_VERSION = 1
DTYPE_F32 = 1
_HEADER = struct.Struct("<4sIQII")

PROB_ROW_SUM_TOL = 1e-4


@dataclass
class EmbeddingMatrix:
    """N x d float32 feature rows aligned to manifest order."""

    rows: np.ndarray
    row_ids: list[str]

    def __post_init__(self):
        self.rows = np.ascontiguousarray(self.rows, dtype=np.float32)
        if self.rows.ndim != 2:
            raise FormatError(f"embedding array must be 2-D, got shape {self.rows.shape}")
        if len(self.row_ids) != self.rows.shape[0]:
            raise FormatError(
                f"{len(self.row_ids)} row ids for {self.rows.shape[0]} rows"
            )
        if len(set(self.row_ids)) != len(self.row_ids):
            raise FormatError("row ids are not unique")

    @property
    def n_rows(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


@dataclass
class NeighborList:
    """Top-k cosine neighbors of one query row, similarity-descending.

    Self is excluded; ties in similarity are broken toward the lower row
    index so results are reproducible bit-for-bit.
    """

    query_index: int
    indices: np.ndarray  # (k,) int64
    similarities: np.ndarray  # (k,) float64


def _validate_finite(rows: np.ndarray, what: str) -> None:
    if not np.isfinite(rows).all():
        bad = int(np.argwhere(~np.isfinite(rows).all(axis=1))[0][0])
        raise FormatError(f"{what}: non-finite value in row {bad}")


def _write_container(magic: bytes, rows: np.ndarray, row_ids: list[str], path: str | Path) -> None:
    rows = np.ascontiguousarray(rows, dtype=np.float32)
    if rows.ndim != 2:
        raise FormatError(f"payload must be 2-D, got shape {rows.shape}")
    if len(row_ids) != rows.shape[0]:
        raise FormatError(f"{len(row_ids)} ids for {rows.shape[0]} rows")
    _validate_finite(rows, str(path))
    path = Path(path)
    header = _HEADER.pack(magic, FORMAT_VERSION, rows.shape[0], rows.shape[1], DTYPE_F32)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(rows.tobytes(order="C"))
    os.replace(tmp, path)
    ids_tmp = path.with_name(path.name + ".ids.tmp")
    ids_tmp.write_text("".join(f"{rid}\n" for rid in row_ids), encoding="utf-8")
    os.replace(ids_tmp, Path(str(path) + ".ids"))


def _read_container(expected_magic: bytes, path: str | Path) -> tuple[np.ndarray, list[str]]:
    path = Path(path)
    size = os.path.getsize(path)
    if size < _HEADER.size:
        raise TruncationError(f"{path}: {size} bytes is smaller than the {_HEADER.size}-byte header")
    with open(path, "rb") as fh:
        magic, version, n_rows, dim, dtype = _HEADER.unpack(fh.read(_HEADER.size))
        if magic != expected_magic:
            raise FormatError(f"{path}: magic {magic!r}, expected {expected_magic!r}")
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        if dtype != DTYPE_F32:
            raise FormatError(f"{path}: unknown dtype code {dtype}")
        expected_size = _HEADER.size + n_rows * dim * 4
        if size != expected_size:
            raise TruncationError(
                f"{path}: header declares {n_rows}x{dim} ({expected_size} bytes), file has {size}"
            )
        rows = np.fromfile(fh, dtype="<f4", count=n_rows * dim).reshape(n_rows, dim)
    ids_path = Path(str(path) + ".ids")
    if not ids_path.exists():
        raise FormatError(f"{path}: missing row-id sidecar {ids_path}")
    row_ids = ids_path.read_text(encoding="utf-8").splitlines()
    if len(row_ids) != n_rows:
        raise FormatError(f"{ids_path}: {len(row_ids)} ids for {n_rows} rows")
    _validate_finite(rows, str(path))
    return rows, row_ids


def write_embeddings(matrix: EmbeddingMatrix, path: str | Path) -> None:
    _write_container(MAGIC_EMBED, matrix.rows, matrix.row_ids, path)


def read_embeddings(path: str | Path) -> EmbeddingMatrix:
    """Load an embedding container; zero-norm rows are rejected outright."""
    rows, row_ids = _read_container(MAGIC_EMBED, path)
    norms = np.linalg.norm(rows, axis=1)
    if (norms == 0).any():
        bad = int(np.argwhere(norms == 0)[0][0])
        raise ZeroNormRowError(f"{path}: row {bad} ({row_ids[bad]}) has zero norm")
    return EmbeddingMatrix(rows=rows, row_ids=row_ids)


def write_probabilities(rows: np.ndarray, row_ids: list[str], path: str | Path) -> None:
    rows = np.asarray(rows, dtype=np.float32)
    _check_prob_rows(rows, str(path))
    _write_container(MAGIC_PROB, rows, row_ids, path)


def read_probabilities(path: str | Path) -> tuple[np.ndarray, list[str]]:
    rows, row_ids = _read_container(MAGIC_PROB, path)
    _check_prob_rows(rows, str(path))
    return rows, row_ids


def _check_prob_rows(rows: np.ndarray, what: str) -> None:
    if rows.size and ((rows < 0).any() or (rows > 1).any()):
        raise FormatError(f"{what}: probability entries outside [0, 1]")
    sums = rows.astype(np.float64).sum(axis=1)
    if rows.size and np.abs(sums - 1.0).max() > PROB_ROW_SUM_TOL:
        bad = int(np.argmax(np.abs(sums - 1.0)))
        raise FormatError(f"{what}: row {bad} sums to {sums[bad]:.6f}, expected 1 +/- {PROB_ROW_SUM_TOL}")


# ---------------------------------------------------------------------------
# Exact cosine k-NN


def _unit_rows(rows: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    if (norms == 0).any():
        bad = int(np.argwhere(norms[:, 0] == 0)[0][0])
        raise ZeroNormRowError(f"row {bad} has zero norm")
    return rows.astype(np.float64) / norms.astype(np.float64)


def knn_query(
    matrix: EmbeddingMatrix,
    query_rows: "list[int] | np.ndarray",
    k: int,
    batch_size: int = 1024,
) -> list[NeighborList]:
    """Exact brute-force cosine top-k against every row of ``matrix``.

    Results exclude the query row itself. Equal similarities rank the lower
    row index first, which makes the output deterministic under duplicated
    rows.
    """
    n = matrix.n_rows
    if not 1 <= k <= n - 1:
        raise ValueError(f"k={k} out of range for {n} rows (need 1 <= k <= {n - 1})")
    unit = _unit_rows(matrix.rows)
    query_rows = np.asarray(query_rows, dtype=np.int64)
    if query_rows.size and (query_rows.min() < 0 or query_rows.max() >= n):
        raise ValueError("query row index out of range")
    out: list[NeighborList] = []
    for start in range(0, query_rows.size, batch_size):
        batch = query_rows[start : start + batch_size]
        sims = np.clip(unit[batch] @ unit.T, -1.0, 1.0)  # (b, n)
        sims[np.arange(batch.size), batch] = -np.inf
        # lexicographic: similarity descending, then row index ascending
        order = np.lexsort((np.broadcast_to(np.arange(n), sims.shape), -sims), axis=1)
        top = order[:, :k]
        for row_in_batch, qi in enumerate(batch):
            idx = top[row_in_batch]
            out.append(
                NeighborList(
                    query_index=int(qi),
                    indices=idx.copy(),
                    similarities=sims[row_in_batch, idx].copy(),
                )
            )
    return out


def neighbor_index_matrix(matrix: EmbeddingMatrix, k: int, batch_size: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """k-NN of every row at once; returns (indices, similarities) as (N, k) arrays."""
    lists = knn_query(matrix, np.arange(matrix.n_rows), k, batch_size=batch_size)
    idx = np.stack([nl.indices for nl in lists])
    sim = np.stack([nl.similarities for nl in lists])
    return idx, sim


def verify_alignment(path: str | Path, manifest_ids: list[str]) -> list[str]:
    """Check a container against manifest sample ids; returns warning strings.

    Used by ``adc embed verify``: an empty return means a clean pass. Raises
    on structural format errors; alignment problems come back as warnings.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == MAGIC_EMBED:
        matrix = read_embeddings(path)
        rows, row_ids = matrix.rows, matrix.row_ids
    elif magic == MAGIC_PROB:
        rows, row_ids = read_probabilities(path)
    else:
        raise FormatError(f"{path}: unknown magic {magic!r}")
    warnings: list[str] = []
    known = set(manifest_ids)
    missing = [rid for rid in row_ids if rid not in known]
    if missing:
        warnings.append(f"{len(missing)} row ids not present in manifest (first: {missing[0]})")
    if len(set(row_ids)) != len(row_ids):
        warnings.append("duplicate row ids")
    order = {sid: i for i, sid in enumerate(manifest_ids)}
    positions = [order[rid] for rid in row_ids if rid in order]
    if any(b <= a for a, b in zip(positions, positions[1:])):
        warnings.append("row order does not follow manifest order")
    return warnings
