import numpy as np
import pytest

from adc.curator import CurationReport
from adc.errors import AdcError
from adc.subsetter import (
    build_clean_subset,
    build_longtail_subset,
    longtail_counts,
    split_dataset,
)
from conftest import make_manifest

# Reference class-count rows for n_max=39297, K=12 at three imbalance ratios.
ROW_RHO_10 = [39297, 31875, 25854, 20971, 17010, 13797, 11191, 9078, 7363, 5972, 4844, 3929]
ROW_RHO_50 = [39297, 27536, 19295, 13520, 9474, 6638, 4652, 3259, 2284, 1600, 1121, 785]
ROW_RHO_100 = [39297, 25854, 17010, 11191, 7363, 4844, 3187, 2097, 1379, 907, 597, 392]


@pytest.mark.parametrize(
    "rho,expected,total",
    [(10, ROW_RHO_10, 191_181), (50, ROW_RHO_50, 129_461), (100, ROW_RHO_100, 114_118)],
)
def test_longtail_counts_match_reference_rows(rho, expected, total):
    dist = longtail_counts(39_297, 12, rho)
    assert all(abs(g - e) <= 1 for g, e in zip(dist.counts, expected))
    assert abs(dist.total() - total) <= 12


def test_longtail_head_and_tail_exact():
    dist = longtail_counts(1000, 5, 10)
    assert dist.counts[0] == 1000
    assert dist.counts[-1] == 100


def test_longtail_rho_one_is_flat():
    dist = longtail_counts(500, 7, 1)
    assert dist.counts == [500] * 7


def test_longtail_monotone_and_ratio_property():
    rng = np.random.default_rng(0)
    for _ in range(50):
        k = int(rng.integers(2, 15))
        rho = float(rng.uniform(1, 200))
        n_max = int(rng.integers(int(np.ceil(rho)), 100_000))
        dist = longtail_counts(n_max, k, rho)
        assert all(a >= b for a, b in zip(dist.counts, dist.counts[1:]))
        assert dist.counts[0] == n_max
        assert dist.counts[-1] == int(np.floor(n_max / rho))


def test_longtail_parameter_validation():
    with pytest.raises(AdcError):
        longtail_counts(100, 1, 10)
    with pytest.raises(AdcError):
        longtail_counts(100, 5, 0.5)
    with pytest.raises(AdcError):
        longtail_counts(5, 5, 10)


def test_build_longtail_subset_counts():
    manifest = make_manifest([0] * 4 + [1] * 4)
    from adc.subsetter import ClassDistribution

    subset = build_longtail_subset(manifest, ClassDistribution(counts=[2, 1], rho=2, n_max=2), seed=0)
    labels = [r.webly_label for r in subset.records]
    assert sorted(np.bincount(labels, minlength=2).tolist(), reverse=True) == [2, 1]


def test_build_longtail_subset_deterministic():
    manifest = make_manifest([0] * 50 + [1] * 30 + [2] * 20)
    dist = longtail_counts(40, 3, 4)
    a = build_longtail_subset(manifest, dist, seed=9)
    b = build_longtail_subset(manifest, dist, seed=9)
    assert a.dumps() == b.dumps()


def test_build_longtail_subset_insufficient_class():
    manifest = make_manifest([0] * 10 + [1] * 2)
    dist = longtail_counts(10, 2, 2)
    with pytest.raises(AdcError):
        build_longtail_subset(manifest, dist, seed=0)


def test_build_clean_subset_reproduces_retention():
    n = 10_000
    ids = [f"s{i:06d}" for i in range(n)]

    def rep(indices, name):
        flags = np.zeros(n, dtype=int)
        flags[list(indices)] = 1
        return CurationReport(method=name, sample_ids=ids, flags=flags, scores=np.zeros(n))

    manifest = make_manifest([0] * n)
    a = rep(range(2636), "data-centric")
    b = rep(range(2015, 4515), "learning-centric")  # overlap 621
    subset, stats = build_clean_subset(manifest, [a, b], mode="union")
    assert len(subset) == 5485  # retains 54.85%
    assert stats.combined_fraction == pytest.approx(0.4515)
    assert stats.overlap_fraction == pytest.approx(0.0621)


def test_build_clean_subset_empty_reports_is_identity():
    manifest = make_manifest([0, 1, 0, 1])
    subset, stats = build_clean_subset(manifest, [])
    assert subset.ids() == manifest.ids()
    assert stats is None


def test_build_clean_subset_all_flagged_warns():
    manifest = make_manifest([0, 1])
    rep = CurationReport(
        method="x", sample_ids=manifest.ids(), flags=np.ones(2, dtype=int), scores=np.zeros(2)
    )
    with pytest.warns(RuntimeWarning):
        subset, _ = build_clean_subset(manifest, [rep])
    assert len(subset) == 0


def test_split_exact_sizes_and_partition():
    labels = [i % 4 for i in range(1000)]
    manifest = make_manifest(labels)
    manifest = split_dataset(manifest, eval_size=100, test_size=150, seed=0)
    splits = {}
    for rec in manifest.records:
        splits.setdefault(rec.split, []).append(rec.sample_id)
    assert len(splits["eval"]) == 100
    assert len(splits["test"]) == 150
    assert len(splits["train"]) == 750
    all_ids = sorted(sid for ids in splits.values() for sid in ids)
    assert all_ids == sorted(manifest.ids())


def test_split_train_remainder_matches_reference_sizes():
    # 1000 total with 20+20 out leaves 960 in train; the full-scale analogue
    # is 1,076,738 - 20,000 - 20,000 = 1,036,738
    manifest = make_manifest([i % 2 for i in range(1000)])
    manifest = split_dataset(manifest, eval_size=20, test_size=20, seed=1)
    assert sum(r.split == "train" for r in manifest.records) == 960
    assert 1_076_738 - 20_000 - 20_000 == 1_036_738


def test_split_stratification():
    labels = [0] * 800 + [1] * 200
    manifest = make_manifest(labels)
    manifest = split_dataset(manifest, eval_size=100, test_size=100, seed=2)
    for split in ("eval", "test"):
        members = [r.webly_label for r in manifest.records if r.split == split]
        assert np.bincount(members, minlength=2).tolist() == [80, 20]


def test_split_deterministic():
    manifest_a = split_dataset(make_manifest([i % 3 for i in range(300)]), 30, 30, seed=5)
    manifest_b = split_dataset(make_manifest([i % 3 for i in range(300)]), 30, 30, seed=5)
    assert manifest_a.dumps() == manifest_b.dumps()


def test_split_tiny_caps_train():
    manifest = make_manifest([i % 2 for i in range(500)])
    manifest = split_dataset(manifest, eval_size=50, test_size=50, seed=3, tiny=100)
    counts = {}
    for rec in manifest.records:
        counts[rec.split] = counts.get(rec.split, 0) + 1
    assert counts["train"] == 100
    assert counts["eval"] == 50 and counts["test"] == 50
    assert counts["none"] == 300
    train_labels = [r.webly_label for r in manifest.records if r.split == "train"]
    assert np.bincount(train_labels, minlength=2).tolist() == [50, 50]


def test_split_infeasible_sizes():
    manifest = make_manifest([0] * 10)
    with pytest.raises(AdcError):
        split_dataset(manifest, eval_size=8, test_size=8, seed=0)
