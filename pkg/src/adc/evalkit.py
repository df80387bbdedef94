"""Evaluation: detection precision/recall/F1 and distributionally robust
class-weighted accuracy.

The robust metric is the minimum of sum_i g_i * acc_i over class-weight
vectors g in the probability simplex within a KL ball of radius delta
around the uniform distribution. At delta = 0 it is the plain mean; once
delta reaches ln K a point mass on the worst class is feasible, so it
saturates at the minimum accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AdcError, NumericError

DELTA_TOL = 1e-10
TAU_LO = 1e-8
TAU_HI = 1e8


@dataclass
class DetectionOutcome:
    """Detector flags paired with ground-truth corruption indicators."""

    flags: np.ndarray
    is_corrupted: np.ndarray

    def __post_init__(self):
        self.flags = np.asarray(self.flags).astype(bool)
        self.is_corrupted = np.asarray(self.is_corrupted).astype(bool)
        if self.flags.shape != self.is_corrupted.shape or self.flags.ndim != 1:
            raise AdcError("flags and corruption indicators must be aligned 1-D vectors")


@dataclass
class PRFResult:
    """None means the metric's denominator was empty, which is reported as
    undefined rather than silently collapsed to zero."""

    precision: float | None
    recall: float | None
    f1: float | None


def detection_prf(outcome: DetectionOutcome) -> PRFResult:
    flagged = int(outcome.flags.sum())
    corrupted = int(outcome.is_corrupted.sum())
    hits = int((outcome.flags & outcome.is_corrupted).sum())
    precision = hits / flagged if flagged else None
    recall = hits / corrupted if corrupted else None
    if precision is None or recall is None:
        f1 = None
    elif precision == 0.0 and recall == 0.0:
        f1 = 0.0
    else:
        f1 = 2.0 / (1.0 / precision + 1.0 / recall) if precision > 0 and recall > 0 else 0.0
    return PRFResult(precision=precision, recall=recall, f1=f1)


@dataclass
class ClassAccuracies:
    per_class: list[float | None]  # None for empty classes
    mean: float | None
    worst: float | None
    empty_classes: list[int]


def class_accuracies(predictions: np.ndarray, true_labels: np.ndarray, K: int) -> ClassAccuracies:
    predictions = np.asarray(predictions, dtype=np.int64)
    true_labels = np.asarray(true_labels, dtype=np.int64)
    if predictions.shape != true_labels.shape:
        raise AdcError("predictions and labels are not aligned")
    per_class: list[float | None] = []
    empty: list[int] = []
    for k in range(K):
        members = true_labels == k
        if not members.any():
            per_class.append(None)
            empty.append(k)
        else:
            per_class.append(float((predictions[members] == k).mean()))
    defined = [a for a in per_class if a is not None]
    return ClassAccuracies(
        per_class=per_class,
        mean=float(np.mean(defined)) if defined else None,
        worst=float(np.min(defined)) if defined else None,
        empty_classes=empty,
    )


@dataclass
class DeltaWorstSpec:
    accuracies: np.ndarray
    delta: float  # math.inf allowed
    divergence: str = "kl"

    def __post_init__(self):
        self.accuracies = np.asarray(self.accuracies, dtype=np.float64)
        if self.accuracies.ndim != 1 or self.accuracies.size < 2:
            raise AdcError("need a vector of at least 2 class accuracies")
        if ((self.accuracies < 0) | (self.accuracies > 1)).any():
            raise AdcError("accuracies must lie in [0, 1]")
        if self.delta < 0:
            raise AdcError("delta must be non-negative")
        if self.divergence != "kl":
            raise AdcError(f"unsupported divergence {self.divergence!r}")


def kl_to_uniform(g: np.ndarray) -> float:
    g = np.asarray(g, dtype=np.float64)
    K = g.size
    nz = g > 0
    return float(np.sum(g[nz] * np.log(g[nz] * K)))


def _weights_at_tau(acc: np.ndarray, tau: float) -> np.ndarray:
    z = -(acc - acc.min()) / tau
    w = np.exp(z)
    return w / w.sum()


@dataclass
class DeltaWorstResult:
    value: float
    weights: np.ndarray


def delta_worst_accuracy(spec: DeltaWorstSpec) -> DeltaWorstResult:
    """Solve min_g g.acc subject to KL(g || uniform) <= delta.

    The dual has the closed form g_i proportional to exp(-acc_i / tau); the
    temperature tau is found by bisecting KL(g(tau) || u) = delta to within
    DELTA_TOL. delta = 0 short-circuits to the mean, delta >= ln K to the
    minimum with a point mass on the lowest-index argmin.
    """
    acc = spec.accuracies
    K = acc.size
    if spec.delta == 0.0:
        return DeltaWorstResult(value=float(acc.mean()), weights=np.full(K, 1.0 / K))
    if np.all(acc == acc[0]):
        return DeltaWorstResult(value=float(acc[0]), weights=np.full(K, 1.0 / K))
    if spec.delta >= np.log(K):
        g = np.zeros(K)
        g[int(np.argmin(acc))] = 1.0
        return DeltaWorstResult(value=float(acc.min()), weights=g)

    lo, hi = TAU_LO, TAU_HI
    g_lo = _weights_at_tau(acc, lo)
    if kl_to_uniform(g_lo) <= spec.delta:
        # the entire dual path stays inside the ball (multiple argmin classes);
        # the unconstrained minimum is already attained
        return DeltaWorstResult(value=float(g_lo @ acc), weights=g_lo)
    g_hi = _weights_at_tau(acc, hi)
    if kl_to_uniform(g_hi) > spec.delta:
        raise NumericError(
            f"bisection bracket failure: KL at tau={hi} is {kl_to_uniform(g_hi)} > delta={spec.delta}"
        )
    g = g_lo
    for _ in range(500):
        tau = float(np.sqrt(lo * hi))
        g = _weights_at_tau(acc, tau)
        kl = kl_to_uniform(g)
        if abs(kl - spec.delta) <= DELTA_TOL:
            break
        if kl > spec.delta:
            lo = tau
        else:
            hi = tau
        if hi / lo < 1.0 + 1e-15:
            break
    return DeltaWorstResult(value=float(g @ acc), weights=g)


def posthoc_logit_adjust(logits: np.ndarray, prior: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Subtract tau * log(prior) from each logit column and take the argmax.

    A uniform prior or tau = 0 reproduces the raw argmax; argmax resolves
    ties toward the lower class index.
    """
    logits = np.asarray(logits, dtype=np.float64)
    prior = np.asarray(prior, dtype=np.float64)
    if logits.ndim != 2 or prior.shape != (logits.shape[1],):
        raise AdcError("logits must be N x K with a length-K prior")
    if (prior <= 0).any():
        raise AdcError("prior entries must be strictly positive")
    if abs(prior.sum() - 1.0) > 1e-6:
        raise AdcError("prior must sum to 1")
    adjusted = logits - tau * np.log(prior)[None, :]
    return adjusted.argmax(axis=1)
