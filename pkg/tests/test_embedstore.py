import numpy as np
import pytest

from adc.embedstore import (
    EmbeddingMatrix,
    knn_query,
    read_embeddings,
    read_probabilities,
    verify_alignment,
    write_embeddings,
    write_probabilities,
)
from adc.errors import FormatError, TruncationError, ZeroNormRowError


def matrix_of(rows, ids=None):
    rows = np.asarray(rows, dtype=np.float32)
    ids = ids or [f"r{i}" for i in range(rows.shape[0])]
    return EmbeddingMatrix(rows=rows, row_ids=ids)


def test_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    m = matrix_of(rng.normal(size=(3, 4)))
    path = tmp_path / "e.adce"
    write_embeddings(m, path)
    loaded = read_embeddings(path)
    assert loaded.rows.tobytes() == m.rows.tobytes()
    assert loaded.row_ids == m.row_ids


def test_wrong_magic(tmp_path):
    path = tmp_path / "bad.adce"
    path.write_bytes(b"NOPE" + b"\x00" * 40)
    with pytest.raises(FormatError):
        read_embeddings(path)


def test_truncated_body_detected_without_allocation(tmp_path):
    # header claims 1,036,738 x 512 but the body is 8 bytes
    import struct

    path = tmp_path / "trunc.adce"
    header = struct.pack("<4sIQII", b"ADCE", 1, 1_036_738, 512, 1)
    path.write_bytes(header + b"\x00" * 8)
    with pytest.raises(TruncationError):
        read_embeddings(path)


def test_nan_rejected_on_read(tmp_path):
    m = matrix_of([[1.0, 0.0], [0.0, 1.0]])
    path = tmp_path / "n.adce"
    write_embeddings(m, path)
    raw = bytearray(path.read_bytes())
    raw[24:28] = np.float32("nan").tobytes()
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        read_embeddings(path)


def test_zero_norm_row_rejected(tmp_path):
    m = EmbeddingMatrix(rows=np.array([[1, 0], [0, 0]], dtype=np.float32), row_ids=["a", "b"])
    path = tmp_path / "z.adce"
    write_embeddings(m, path)
    with pytest.raises(ZeroNormRowError):
        read_embeddings(path)


def test_missing_sidecar(tmp_path):
    m = matrix_of([[1.0, 0.0]])
    path = tmp_path / "s.adce"
    write_embeddings(m, path)
    (tmp_path / "s.adce.ids").unlink()
    with pytest.raises(FormatError):
        read_embeddings(path)


def test_prob_rows_validated(tmp_path):
    path = tmp_path / "p.adcp"
    good = np.array([[0.25, 0.75], [0.5, 0.5]], dtype=np.float32)
    write_probabilities(good, ["a", "b"], path)
    rows, ids = read_probabilities(path)
    assert rows.tobytes() == good.tobytes() and ids == ["a", "b"]
    with pytest.raises(FormatError):
        write_probabilities(np.array([[0.9, 0.9]], dtype=np.float32), ["a"], tmp_path / "bad.adcp")


def test_knn_orthonormal_basis():
    m = matrix_of(np.eye(3))
    (result,) = knn_query(m, [0], k=2)
    assert set(result.indices.tolist()) == {1, 2}
    assert np.allclose(result.similarities, 0.0)
    # tie at similarity 0 resolves to the lower index first
    assert result.indices.tolist() == [1, 2]


def test_knn_duplicate_row_is_top1():
    m = matrix_of([[1.0, 0.0], [0.0, 1.0], [2.0, 0.0]])
    (result,) = knn_query(m, [0], k=1)
    assert result.indices.tolist() == [2]
    assert result.similarities[0] == pytest.approx(1.0, abs=1e-6)


def test_knn_matches_bruteforce_oracle():
    rng = np.random.default_rng(7)
    rows = rng.normal(size=(200, 16))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    m = matrix_of(rows)
    results = knn_query(m, np.arange(200), k=10)
    unit = rows / np.linalg.norm(rows, axis=1, keepdims=True)
    for nl in results:
        sims = unit @ unit[nl.query_index]
        sims[nl.query_index] = -np.inf
        expected = sorted(range(200), key=lambda j: (-sims[j], j))[:10]
        assert nl.indices.tolist() == expected


def test_knn_scale_invariance():
    rng = np.random.default_rng(3)
    rows = rng.normal(size=(50, 8)).astype(np.float32)
    scales = rng.uniform(0.1, 10.0, size=(50, 1)).astype(np.float32)
    a = knn_query(matrix_of(rows), np.arange(50), k=5)
    b = knn_query(matrix_of(rows * scales), np.arange(50), k=5)
    for x, y in zip(a, b):
        assert x.indices.tolist() == y.indices.tolist()


def test_cosine_symmetry_and_self_similarity():
    rng = np.random.default_rng(5)
    rows = rng.normal(size=(20, 6))
    unit = rows / np.linalg.norm(rows, axis=1, keepdims=True)
    sims = unit @ unit.T
    assert np.abs(sims - sims.T).max() < 1e-6
    assert np.abs(np.diag(sims) - 1.0).max() < 1e-6


def test_knn_k_out_of_range():
    m = matrix_of(np.eye(3))
    with pytest.raises(ValueError):
        knn_query(m, [0], k=3)
    with pytest.raises(ValueError):
        knn_query(m, [0], k=0)


def test_verify_alignment(tmp_path):
    m = matrix_of(np.eye(3), ids=["a", "b", "c"])
    path = tmp_path / "v.adce"
    write_embeddings(m, path)
    assert verify_alignment(path, ["a", "b", "c", "d"]) == []
    warnings = verify_alignment(path, ["b", "a", "c"])
    assert any("order" in w for w in warnings)
    warnings = verify_alignment(path, ["a", "b"])
    assert any("not present" in w for w in warnings)
