import numpy as np
import pytest

from adc.embedstore import EmbeddingMatrix
from adc.manifest import Manifest, SampleRecord
from adc.taxonomy import SubclassKey


def make_clusters(n=3000, k=3, dim=8, separation=8.0, noise_rate=0.2, seed=0):
    """Well-separated Gaussian clusters with symmetric label flips.

    Returns (matrix, true_labels, noisy_labels, true_transition); cluster
    means sit at pairwise distance >= 6 sigma (unit per-coordinate noise),
    so nearest neighbors share the true class almost surely.
    """
    rng = np.random.default_rng(seed)
    while True:
        means = rng.normal(size=(k, dim))
        means /= np.linalg.norm(means, axis=1, keepdims=True)
        means *= separation
        dists = np.linalg.norm(means[:, None] - means[None, :], axis=2)
        if dists[np.triu_indices(k, 1)].min() >= 6.0:
            break
    true_labels = rng.integers(0, k, size=n)
    rows = means[true_labels] + rng.normal(size=(n, dim))
    noisy = true_labels.copy()
    flip = rng.random(n) < noise_rate
    for i in np.flatnonzero(flip):
        others = [c for c in range(k) if c != true_labels[i]]
        noisy[i] = others[rng.integers(0, k - 1)]
    t_true = (1 - noise_rate) * np.eye(k) + (noise_rate / (k - 1)) * (1 - np.eye(k))
    matrix = EmbeddingMatrix(rows=rows.astype(np.float32), row_ids=[f"s{i:06d}" for i in range(n)])
    return matrix, true_labels, noisy, t_true


def make_manifest(labels, statuses=None, taxonomy_version="t.v1"):
    """Manifest with one fetched record per label, ids s000000, s000001, ..."""
    manifest = Manifest(taxonomy_version=taxonomy_version)
    for i, label in enumerate(labels):
        manifest.append(
            SampleRecord(
                sample_id=f"s{i:06d}",
                subclass_key=SubclassKey(int(label), (0,)),
                webly_label=int(label),
                uri=f"mock://fixture/{i}",
                content_hash=f"{i:064x}",
                byte_size=10,
                fetch_status=(statuses[i] if statuses is not None else "fetched"),
            )
        )
    return manifest


@pytest.fixture
def cluster_data():
    return make_clusters(n=1200, seed=11)
