"""Derived datasets: splits, cleaned subsets, and long-tail class profiles.

The long-tail profile is the standard exponential decay: class i of K gets
floor(n_max * rho^(-i / (K-1))) samples, so the head keeps n_max and the
tail floor(n_max / rho), giving a max/min imbalance of rho up to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .curator import CurationReport, MergeStats, merge_filters
from .errors import AdcError, AlignmentError
from .manifest import Manifest

DEFAULT_EVAL_SIZE = 20_000
DEFAULT_TEST_SIZE = 20_000


@dataclass
class ClassDistribution:
    counts: list[int]
    rho: float
    n_max: int

    def total(self) -> int:
        return sum(self.counts)


def longtail_counts(n_max: int, K: int, rho: float) -> ClassDistribution:
    """Exponential long-tail class counts for imbalance ratio rho."""
    if rho < 1:
        raise AdcError(f"rho must be >= 1, got {rho}")
    if K < 2:
        raise AdcError(f"K must be >= 2, got {K}")
    if n_max < rho:
        raise AdcError(f"n_max={n_max} smaller than rho={rho}: the tail class would be empty")
    counts = [int(np.floor(n_max * rho ** (-i / (K - 1)))) for i in range(K)]
    return ClassDistribution(counts=counts, rho=rho, n_max=n_max)


def build_longtail_subset(
    manifest: Manifest,
    distribution: ClassDistribution,
    seed: int = 0,
    statuses: tuple[str, ...] = ("fetched",),
) -> Manifest:
    """Sample the manifest down to the long-tail profile.

    Profile positions are assigned to classes in descending order of
    available count (the most populous class becomes the head). Sampling is
    uniform without replacement and fully determined by the seed.
    """
    rng = np.random.default_rng(seed)
    by_label: dict[int, list[str]] = {}
    for rec in manifest.records:
        if rec.fetch_status in statuses:
            by_label.setdefault(rec.webly_label, []).append(rec.sample_id)
    K = len(distribution.counts)
    if len(by_label) < K:
        raise AdcError(f"manifest has {len(by_label)} populated classes, profile needs {K}")
    # ties in availability resolve by class index for determinism
    ordered = sorted(by_label, key=lambda lbl: (-len(by_label[lbl]), lbl))[:K]
    keep: set[str] = set()
    for target, label in zip(distribution.counts, ordered):
        ids = by_label[label]
        if len(ids) < target:
            raise AdcError(f"class {label} has {len(ids)} samples, profile needs {target}")
        chosen = rng.choice(len(ids), size=target, replace=False)
        keep.update(ids[i] for i in chosen)
    subset = manifest.filtered(keep)
    subset.seed = seed
    return subset


def build_clean_subset(
    manifest: Manifest,
    reports: list[CurationReport],
    mode: str = "union",
) -> tuple[Manifest, MergeStats | None]:
    """Drop flagged samples; with no reports this is the identity."""
    if not reports:
        return manifest.filtered(set(manifest.ids())), None
    ids = manifest.ids()
    for rep in reports:
        if rep.sample_ids != ids:
            raise AlignmentError(f"report {rep.method!r} is not aligned with the manifest")
    merged, stats = merge_filters(reports, mode=mode)
    flagged = merged.flagged_ids()
    keep = {sid for sid in ids if sid not in flagged}
    if not keep:
        import warnings

        warnings.warn("every sample was flagged; the clean subset is empty", RuntimeWarning, stacklevel=2)
    return manifest.filtered(keep), stats


def _stratified_quota(counts: np.ndarray, total: int) -> np.ndarray:
    """Per-class quotas proportional to counts, rounded to hit total exactly
    (largest remainder, ties to the lower class index)."""
    n = counts.sum()
    if total > n:
        raise AdcError(f"cannot draw {total} samples from {n}")
    exact = counts * (total / n)
    quota = np.floor(exact).astype(np.int64)
    quota = np.minimum(quota, counts)
    short = total - int(quota.sum())
    if short > 0:
        remainder = np.where(counts > quota, exact - quota, -np.inf)
        order = np.lexsort((np.arange(counts.size), -remainder))
        for idx in order:
            if short == 0:
                break
            if counts[idx] > quota[idx]:
                quota[idx] += 1
                short -= 1
    if short != 0:
        raise AdcError("stratified quota infeasible")
    return quota


def split_dataset(
    manifest: Manifest,
    eval_size: int = DEFAULT_EVAL_SIZE,
    test_size: int = DEFAULT_TEST_SIZE,
    seed: int = 0,
    stratify: bool = True,
    tiny: int | None = None,
    statuses: tuple[str, ...] = ("fetched",),
) -> Manifest:
    """Assign disjoint eval/test splits of exact size; the rest is train.

    With ``stratify`` the splits follow the class proportions of the
    eligible pool. ``tiny`` additionally caps the train split at that many
    samples (stratified), marking the remainder as unsplit.
    """
    rng = np.random.default_rng(seed)
    eligible = [r for r in manifest.records if r.fetch_status in statuses]
    n = len(eligible)
    if eval_size + test_size > n:
        raise AdcError(f"eval+test = {eval_size + test_size} exceeds {n} eligible samples")
    labels = np.array([r.webly_label for r in eligible])
    order = rng.permutation(n)

    assignment: dict[str, str] = {}
    if stratify:
        classes, class_counts = np.unique(labels, return_counts=True)
        eval_quota = _stratified_quota(class_counts, eval_size)
        test_quota = _stratified_quota(class_counts - eval_quota, test_size)
        taken_eval = dict.fromkeys(classes.tolist(), 0)
        taken_test = dict.fromkeys(classes.tolist(), 0)
        class_pos = {int(c): i for i, c in enumerate(classes)}
        for idx in order:
            rec = eligible[idx]
            ci = class_pos[int(labels[idx])]
            if taken_eval[int(labels[idx])] < eval_quota[ci]:
                assignment[rec.sample_id] = "eval"
                taken_eval[int(labels[idx])] += 1
            elif taken_test[int(labels[idx])] < test_quota[ci]:
                assignment[rec.sample_id] = "test"
                taken_test[int(labels[idx])] += 1
            else:
                assignment[rec.sample_id] = "train"
    else:
        for pos, idx in enumerate(order):
            rec = eligible[idx]
            if pos < eval_size:
                assignment[rec.sample_id] = "eval"
            elif pos < eval_size + test_size:
                assignment[rec.sample_id] = "test"
            else:
                assignment[rec.sample_id] = "train"

    if tiny is not None:
        train_ids = [sid for sid, split in assignment.items() if split == "train"]
        if tiny > len(train_ids):
            raise AdcError(f"tiny size {tiny} exceeds train pool {len(train_ids)}")
        by_id = {r.sample_id: r for r in eligible}
        train_labels = np.array([by_id[sid].webly_label for sid in train_ids])
        classes, class_counts = np.unique(train_labels, return_counts=True)
        quota = _stratified_quota(class_counts, tiny)
        taken = dict.fromkeys(classes.tolist(), 0)
        class_pos = {int(c): i for i, c in enumerate(classes)}
        tiny_rng = np.random.default_rng(seed + 1)
        for pos in tiny_rng.permutation(len(train_ids)):
            sid = train_ids[pos]
            lbl = int(by_id[sid].webly_label)
            if taken[lbl] < quota[class_pos[lbl]]:
                taken[lbl] += 1
            else:
                assignment[sid] = "none"

    for rec in manifest.records:
        rec.split = assignment.get(rec.sample_id, "none")
    manifest.seed = seed
    return manifest
