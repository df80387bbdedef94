"""Label-noise curation: transition estimation, detectors, relabeling, merging.

The central estimator fits a class-level noise transition matrix and clean
prior from label-consensus statistics of nearest-neighbor tuples, without
any clean labels: neighbor tuples (anchor, nn1, nn2) are assumed to share
their true class, which ties the observed first/second/third-order label
agreement frequencies to polynomials in (T, p). Detectors then flag likely
mislabeled samples either from embeddings (neighbor agreement) or from an
externally supplied probability matrix (confidence screens).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embedstore import EmbeddingMatrix, neighbor_index_matrix
from .errors import AdcError, AlignmentError, FormatError, MissingClassError

LOG_CLIP = 1e-12


# ---------------------------------------------------------------------------
# Report type and file format


@dataclass
class CurationReport:
    """Per-sample flags and scores from one detector (or a merge of several)."""

    method: str
    sample_ids: list[str]
    flags: np.ndarray  # (N,) 0/1
    scores: np.ndarray  # (N,) float64
    suggested: np.ndarray | None = None  # (N,) int64, -1 = no suggestion
    seed: int | None = None
    per_class_flagged: dict[int, float] | None = None

    def __post_init__(self):
        self.flags = np.asarray(self.flags, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        n = len(self.sample_ids)
        if self.flags.shape != (n,) or self.scores.shape != (n,):
            raise FormatError("report arrays not aligned with sample ids")
        if self.suggested is not None:
            self.suggested = np.asarray(self.suggested, dtype=np.int64)
            if self.suggested.shape != (n,):
                raise FormatError("suggested labels not aligned with sample ids")
            if ((self.suggested >= 0) & (self.flags == 0)).any():
                raise FormatError("suggested label present on an unflagged sample")

    @property
    def n(self) -> int:
        return len(self.sample_ids)

    def flagged_fraction(self) -> float:
        return float(self.flags.mean()) if self.n else 0.0

    def flagged_ids(self) -> set[str]:
        return {sid for sid, f in zip(self.sample_ids, self.flags) if f}

    def compute_summary(self, labels: np.ndarray) -> dict[int, float]:
        labels = np.asarray(labels)
        summary: dict[int, float] = {}
        for cls in np.unique(labels):
            members = labels == cls
            summary[int(cls)] = float(self.flags[members].mean())
        self.per_class_flagged = summary
        return summary

    # -- serialization ------------------------------------------------------

    def dumps(self) -> str:
        lines = [json.dumps({"format": "adc-report", "version": 1, "seed": self.seed}, separators=(",", ":"))]
        sugg = self.suggested
        for i, sid in enumerate(self.sample_ids):
            doc = {
                "sample_id": sid,
                "method": self.method,
                "score": float(self.scores[i]),
                "flag": int(self.flags[i]),
                "suggested_label": (int(sugg[i]) if sugg is not None and sugg[i] >= 0 else None),
            }
            lines.append(json.dumps(doc, separators=(",", ":")))
        return "".join(line + "\n" for line in lines)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str) -> "CurationReport":
        lines = text.splitlines()
        if not lines:
            raise FormatError("empty report file")
        header = json.loads(lines[0])
        if header.get("format") != "adc-report":
            raise FormatError("not a curation report file")
        ids: list[str] = []
        flags: list[int] = []
        scores: list[float] = []
        suggested: list[int] = []
        method = "unknown"
        for line in lines[1:]:
            if not line:
                continue
            doc = json.loads(line)
            ids.append(doc["sample_id"])
            method = doc["method"]
            flags.append(doc["flag"])
            scores.append(doc["score"])
            suggested.append(-1 if doc["suggested_label"] is None else doc["suggested_label"])
        sugg_arr = np.asarray(suggested, dtype=np.int64)
        return cls(
            method=method,
            sample_ids=ids,
            flags=np.asarray(flags),
            scores=np.asarray(scores),
            suggested=sugg_arr if (sugg_arr >= 0).any() else None,
            seed=header.get("seed"),
        )

    @classmethod
    def load(cls, path: str | Path) -> "CurationReport":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def _check_labels(labels: np.ndarray, n: int, K: int | None = None) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise AlignmentError(f"labels shape {labels.shape} does not match {n} rows")
    if labels.size and labels.min() < 0:
        raise AdcError("negative label")
    if K is not None and labels.size and labels.max() >= K:
        raise AdcError(f"label {labels.max()} out of range for K={K}")
    return labels


# ---------------------------------------------------------------------------
# Transition matrix estimation from label consensus


@dataclass(frozen=True)
class ConsensusConfig:
    """Estimator internals; every knob is exposed because reproduction runs
    need to pin them."""

    n_tuples: int | None = None  # default: tuples_per_sample * N
    tuples_per_sample: int = 5
    neighbor_pool: int = 10  # tuples draw neighbor pairs from the anchor's top pool
    max_iters: int = 1500
    step: float = 0.1
    tol: float = 1e-6
    min_samples_factor: int = 30  # estimator needs at least this many samples per class count K


@dataclass
class TransitionEstimate:
    """Row-stochastic noise matrix plus clean-class prior.

    ``matrix[i][j]`` estimates P(observed label = j | true label = i);
    ``prior[i]`` estimates P(true label = i).
    """

    matrix: np.ndarray
    prior: np.ndarray
    residual: float
    converged: bool
    iterations: int

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        self.prior = np.asarray(self.prior, dtype=np.float64)
        K = self.matrix.shape[0]
        if self.matrix.shape != (K, K) or self.prior.shape != (K,):
            raise FormatError("transition estimate has inconsistent shapes")
        if (self.matrix < -1e-12).any() or (self.matrix > 1 + 1e-12).any():
            raise FormatError("transition entries outside [0, 1]")
        if np.abs(self.matrix.sum(axis=1) - 1.0).max() > 1e-6:
            raise FormatError("transition rows do not sum to 1")
        if abs(self.prior.sum() - 1.0) > 1e-6:
            raise FormatError("prior does not sum to 1")

    @property
    def n_classes(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def identity(cls, K: int, prior: np.ndarray | None = None) -> "TransitionEstimate":
        p = np.full(K, 1.0 / K) if prior is None else np.asarray(prior, dtype=np.float64)
        return cls(matrix=np.eye(K), prior=p, residual=0.0, converged=True, iterations=0)


def project_rows_to_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row onto the probability simplex."""
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    n, K = v.shape
    u = np.sort(v, axis=1)[:, ::-1]
    css = np.cumsum(u, axis=1)
    ks = np.arange(1, K + 1)
    cond = u + (1.0 - css) / ks > 0
    rho = K - np.argmax(cond[:, ::-1], axis=1) - 1  # index of the last true entry
    theta = (css[np.arange(n), rho] - 1.0) / (rho + 1)
    return np.maximum(v - theta[:, None], 0.0)


def _consensus_frequencies(
    matrix: EmbeddingMatrix,
    labels: np.ndarray,
    K: int,
    n_tuples: int,
    pool: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Empirical label-agreement frequencies over sampled neighbor tuples.

    Each tuple is (anchor, nn_a, nn_b) with the two neighbors drawn without
    replacement from the anchor's top-``pool`` cosine neighbors. The second
    and third order tensors are symmetrized, matching the symmetric model.
    """
    n = matrix.n_rows
    pool = min(pool, n - 1)
    nn_idx, _ = neighbor_index_matrix(matrix, pool)
    anchors = rng.integers(0, n, size=n_tuples)
    first = rng.integers(0, pool, size=n_tuples)
    shift = 1 + rng.integers(0, pool - 1, size=n_tuples) if pool > 1 else np.zeros(n_tuples, dtype=np.int64)
    second = (first + shift) % pool
    ya = labels[anchors]
    y1 = labels[nn_idx[anchors, first]]
    y2 = labels[nn_idx[anchors, second]]
    nu1 = np.bincount(ya, minlength=K).astype(np.float64) / n_tuples
    nu2 = np.zeros((K, K))
    np.add.at(nu2, (ya, y1), 1.0)
    nu2 /= n_tuples
    nu2 = 0.5 * (nu2 + nu2.T)
    nu3 = np.zeros((K, K, K))
    np.add.at(nu3, (ya, y1, y2), 1.0)
    nu3 /= n_tuples
    sym = np.zeros_like(nu3)
    for perm in ((0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)):
        sym += np.transpose(nu3, perm)
    return nu1, nu2, sym / 6.0


def estimate_transition(
    matrix: EmbeddingMatrix,
    labels: np.ndarray,
    K: int,
    seed: int = 0,
    config: ConsensusConfig | None = None,
) -> TransitionEstimate:
    """Fit (T, prior) by least squares on the consensus equations.

    The model-implied frequencies are
        m1[j]     = sum_i p_i T_ij
        m2[j,k]   = sum_i p_i T_ij T_ik
        m3[j,k,l] = sum_i p_i T_ij T_ik T_il
    and the fit runs projected gradient descent (rows of T and p projected
    onto the simplex each step, step halved whenever the loss fails to
    decrease). None of this needs clean labels.
    """
    cfg = config or ConsensusConfig()
    n = matrix.n_rows
    labels = _check_labels(labels, n, K)
    present = np.bincount(labels, minlength=K)
    if (present == 0).any():
        missing = int(np.argwhere(present == 0)[0][0])
        raise MissingClassError(f"class {missing} has no samples")
    if n < cfg.min_samples_factor * K:
        raise AdcError(f"need at least {cfg.min_samples_factor * K} samples for K={K}, got {n}")
    rng = np.random.default_rng(seed)
    n_tuples = cfg.n_tuples if cfg.n_tuples is not None else cfg.tuples_per_sample * n
    nu1, nu2, nu3 = _consensus_frequencies(matrix, labels, K, n_tuples, cfg.neighbor_pool, rng)

    T = np.full((K, K), 0.3 / K) + 0.7 * np.eye(K)
    T /= T.sum(axis=1, keepdims=True)
    p = nu1.copy()

    def residuals(T: np.ndarray, p: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        r1 = p @ T - nu1
        r2 = np.einsum("i,ij,ik->jk", p, T, T) - nu2
        r3 = np.einsum("i,ij,ik,il->jkl", p, T, T, T) - nu3
        return r1, r2, r3

    def loss_of(T: np.ndarray, p: np.ndarray) -> float:
        r1, r2, r3 = residuals(T, p)
        return float((r1**2).sum() + (r2**2).sum() + (r3**2).sum())

    loss = loss_of(T, p)
    best = (loss, T.copy(), p.copy())
    converged = False
    iterations = 0
    for iterations in range(1, cfg.max_iters + 1):
        r1, r2, r3 = residuals(T, p)
        grad_T = 2.0 * p[:, None] * (
            r1[None, :]
            + 2.0 * np.einsum("mk,ik->im", r2, T)
            + 3.0 * np.einsum("mkl,ik,il->im", r3, T, T)
        )
        grad_p = 2.0 * (
            T @ r1
            + np.einsum("jk,ij,ik->i", r2, T, T)
            + np.einsum("jkl,ij,ik,il->i", r3, T, T, T)
        )
        step = cfg.step
        improved = False
        while step > 1e-12:
            T_new = project_rows_to_simplex(T - step * grad_T)
            p_new = project_rows_to_simplex(p - step * grad_p)[0]
            new_loss = loss_of(T_new, p_new)
            if new_loss < loss:
                improved = True
                break
            step *= 0.5
        if not improved:
            converged = True
            break
        gain = loss - new_loss
        T, p, loss = T_new, p_new, new_loss
        if loss < best[0]:
            best = (loss, T.copy(), p.copy())
        if gain < cfg.tol:
            converged = True
            break
    loss, T, p = best
    # projection can leave sums off by float dust; renormalize exactly
    T = T / T.sum(axis=1, keepdims=True)
    p = p / p.sum()
    return TransitionEstimate(matrix=T, prior=p, residual=loss, converged=converged, iterations=iterations)


# ---------------------------------------------------------------------------
# Detectors


def _neighbor_agreement_scores(
    matrix: EmbeddingMatrix, labels: np.ndarray, k: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Similarity-weighted share of each sample's k neighbors that agree with
    its label; negative similarities contribute no weight."""
    nn_idx, nn_sim = neighbor_index_matrix(matrix, k)
    same = labels[nn_idx] == labels[:, None]
    w = np.maximum(nn_sim, 0.0)
    denom = w.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        weighted = (w * same).sum(axis=1) / denom
    plain = same.mean(axis=1)
    scores = np.where(denom > 0, weighted, plain)
    return scores, nn_idx, nn_sim


def simifeat_detect(
    matrix: EmbeddingMatrix,
    labels: np.ndarray,
    t_est: TransitionEstimate,
    k: int = 10,
) -> CurationReport:
    """Rank samples by neighbor-label agreement and flag the bottom of each
    class, with per-class counts derived from the transition estimate.

    For noisy class j the expected corrupted count is
    ``m_j = round(N_j * (1 - P(Y=j | observed=j)))`` with the posterior from
    Bayes on (T, prior). A degenerate posterior denominator falls back to
    the dataset-level corruption rate with a warning.
    """
    n = matrix.n_rows
    labels = _check_labels(labels, n, t_est.n_classes)
    K = t_est.n_classes
    scores, _, _ = _neighbor_agreement_scores(matrix, labels, k)

    T, p = t_est.matrix, t_est.prior
    observed_mass = p @ T  # P(observed = j)
    global_clean = float(np.sum(p * np.diag(T)))
    flags = np.zeros(n, dtype=np.int64)
    for j in range(K):
        members = np.flatnonzero(labels == j)
        if members.size == 0:
            continue
        if observed_mass[j] <= 0:
            warnings.warn(
                f"class {j}: degenerate posterior denominator, using global corruption rate",
                RuntimeWarning,
                stacklevel=2,
            )
            corrupt_rate = 1.0 - global_clean
        else:
            posterior = min(1.0, T[j, j] * p[j] / observed_mass[j])
            corrupt_rate = 1.0 - posterior
        m_j = min(members.size, int(np.floor(members.size * corrupt_rate + 0.5)))
        if m_j <= 0:
            continue
        order = members[np.lexsort((members, scores[members]))]
        flags[order[:m_j]] = 1
    report = CurationReport(method="simifeat", sample_ids=matrix.row_ids, flags=flags, scores=scores)
    report.compute_summary(labels)
    return report


def knn_vote_detect(matrix: EmbeddingMatrix, labels: np.ndarray, k: int = 100) -> CurationReport:
    """Flag a sample when a strict majority (> k/2) of its k neighbors share
    a single label different from the sample's own; ties in the neighbor
    vote go to the lower class index. Score is the majority-label share."""
    n = matrix.n_rows
    labels = _check_labels(labels, n)
    K = int(labels.max()) + 1
    nn_idx, _ = neighbor_index_matrix(matrix, k)
    neigh_labels = labels[nn_idx]  # (n, k)
    counts = np.zeros((n, K), dtype=np.int64)
    rows = np.repeat(np.arange(n), k)
    np.add.at(counts, (rows, neigh_labels.ravel()), 1)
    mode = counts.argmax(axis=1)  # argmax takes the lower index on ties
    mode_count = counts[np.arange(n), mode]
    scores = mode_count / k
    flags = ((mode != labels) & (mode_count * 2 > k)).astype(np.int64)
    report = CurationReport(method="knn-vote", sample_ids=matrix.row_ids, flags=flags, scores=scores)
    report.compute_summary(labels)
    return report


def confident_learning_detect(
    probs: np.ndarray, labels: np.ndarray, sample_ids: list[str]
) -> CurationReport:
    """Confidence screening against per-class mean self-confidence thresholds.

    t_j is the mean predicted probability of class j over samples labeled j;
    a sample's confident class is the highest-probability class whose
    threshold it clears, and a mismatch with the given label is flagged.
    Samples clearing no threshold are left unflagged.
    """
    probs = np.asarray(probs, dtype=np.float64)
    n, K = probs.shape
    labels = _check_labels(labels, n, K)
    if len(sample_ids) != n:
        raise AlignmentError("sample ids not aligned with probability rows")
    counts = np.bincount(labels, minlength=K)
    if (counts == 0).any():
        missing = int(np.argwhere(counts == 0)[0][0])
        raise MissingClassError(f"class {missing} has no members")
    thresholds = np.array([probs[labels == j, j].mean() for j in range(K)])
    qualifies = probs >= thresholds[None, :]
    masked = np.where(qualifies, probs, -np.inf)
    confident = masked.argmax(axis=1)
    any_qualifies = qualifies.any(axis=1)
    flags = (any_qualifies & (confident != labels)).astype(np.int64)
    scores = probs[np.arange(n), labels]
    report = CurationReport(method="confident-learning", sample_ids=list(sample_ids), flags=flags, scores=scores)
    report.compute_summary(labels)
    return report


def cores_score_detect(
    probs: np.ndarray,
    labels: np.ndarray,
    sample_ids: list[str],
    sign: str = "flag_above",
) -> CurationReport:
    """Static confidence-regularized sieve on supplied probabilities.

    score_n = -log p_n[label_n] + (1/K) * sum_j log p_n[j]; under the default
    ``flag_above`` convention a positive score (label less likely than the
    row average) marks the sample noisy. ``flag_below`` inverts the rule.
    """
    if sign not in ("flag_above", "flag_below"):
        raise AdcError(f"unknown sign convention {sign!r}")
    probs = np.asarray(probs, dtype=np.float64)
    n, K = probs.shape
    labels = _check_labels(labels, n, K)
    if len(sample_ids) != n:
        raise AlignmentError("sample ids not aligned with probability rows")
    if (probs[np.arange(n), labels] <= 0).any():
        warnings.warn(f"zero probability at given label, clipping at {LOG_CLIP}", RuntimeWarning, stacklevel=2)
    logs = -np.log(np.clip(probs, LOG_CLIP, None))
    scores = logs[np.arange(n), labels] - logs.mean(axis=1)
    flags = (scores > 0).astype(np.int64) if sign == "flag_above" else (scores < 0).astype(np.int64)
    report = CurationReport(method="cores", sample_ids=list(sample_ids), flags=flags, scores=scores)
    report.compute_summary(labels)
    return report


def confidence_percentile_filter(
    probs: np.ndarray,
    labels: np.ndarray,
    sample_ids: list[str],
    x_percent: float = 25.0,
) -> CurationReport:
    """Flag exactly floor(x * N / 100) samples with the lowest confidence in
    their own label; equal confidences flag the lower sample index first."""
    if not 0 < x_percent < 100:
        raise AdcError(f"x_percent must be in (0, 100), got {x_percent}")
    probs = np.asarray(probs, dtype=np.float64)
    n, K = probs.shape
    labels = _check_labels(labels, n, K)
    if len(sample_ids) != n:
        raise AlignmentError("sample ids not aligned with probability rows")
    confidence = probs[np.arange(n), labels]
    m = int(np.floor(x_percent * n / 100.0))
    flags = np.zeros(n, dtype=np.int64)
    order = np.lexsort((np.arange(n), confidence))
    flags[order[:m]] = 1
    report = CurationReport(
        method="confidence-percentile", sample_ids=list(sample_ids), flags=flags, scores=confidence
    )
    report.compute_summary(labels)
    return report


def knn_relabel(
    matrix: EmbeddingMatrix,
    labels: np.ndarray,
    report: CurationReport,
    k: int = 10,
) -> CurationReport:
    """Suggest replacement labels for flagged samples by majority vote over
    the unflagged members of their k-neighborhoods.

    Vote ties prefer the class with the larger summed similarity, then the
    lower class index. A flagged sample with no unflagged neighbor among its
    k nearest stays unresolved (no suggestion).
    """
    n = matrix.n_rows
    labels = _check_labels(labels, n)
    if report.sample_ids != matrix.row_ids:
        raise AlignmentError("report is not aligned with the embedding matrix")
    K = int(labels.max()) + 1
    nn_idx, nn_sim = neighbor_index_matrix(matrix, k)
    flagged = report.flags.astype(bool)
    suggested = np.full(n, -1, dtype=np.int64)
    for i in np.flatnonzero(flagged):
        neigh = nn_idx[i]
        keep = ~flagged[neigh]
        if not keep.any():
            continue
        votes = labels[neigh[keep]]
        sims = nn_sim[i][keep]
        counts = np.bincount(votes, minlength=K)
        simsum = np.zeros(K)
        np.add.at(simsum, votes, sims)
        best = counts.max()
        tied = np.flatnonzero(counts == best)
        if tied.size > 1:
            tied = tied[simsum[tied] == simsum[tied].max()]
        suggested[i] = int(tied[0])
    out = CurationReport(
        method=report.method + "+relabel",
        sample_ids=report.sample_ids,
        flags=report.flags.copy(),
        scores=report.scores.copy(),
        suggested=suggested,
        seed=report.seed,
    )
    out.compute_summary(labels)
    return out


@dataclass
class MergeStats:
    per_method: dict[str, float]
    overlap_fraction: float
    combined_fraction: float
    intersection_fraction: float

    def as_dict(self) -> dict:
        return {
            "per_method": self.per_method,
            "overlap_fraction": self.overlap_fraction,
            "combined_fraction": self.combined_fraction,
            "intersection_fraction": self.intersection_fraction,
        }


def merge_filters(reports: list[CurationReport], mode: str = "union") -> tuple[CurationReport, MergeStats]:
    """Combine detector flags by union or intersection, with overlap stats.

    Overlap is the multiplicity surplus (sum of per-method flag counts minus
    the union count) as a fraction, which for two reports is exactly the
    pairwise overlap, so combined = sum of fractions - overlap.
    """
    if mode not in ("union", "intersection"):
        raise AdcError(f"unknown merge mode {mode!r}")
    if not reports:
        raise AdcError("no reports to merge")
    ids = reports[0].sample_ids
    for rep in reports[1:]:
        if rep.sample_ids != ids:
            raise AlignmentError(f"report {rep.method!r} not aligned with {reports[0].method!r}")
    stack = np.stack([rep.flags for rep in reports])
    union = stack.any(axis=0).astype(np.int64)
    inter = stack.all(axis=0).astype(np.int64)
    flags = union if mode == "union" else inter
    n = len(ids)
    union_count = int(union.sum())
    total_flag_count = int(stack.sum())
    if len(reports) == 2:
        # inclusion-exclusion sanity: |A u B| = |A| + |B| - |A n B|
        a, b = int(stack[0].sum()), int(stack[1].sum())
        pair_overlap = int((stack[0] & stack[1]).sum())
        assert union_count == a + b - pair_overlap
    stats = MergeStats(
        per_method={rep.method: rep.flagged_fraction() for rep in reports},
        overlap_fraction=(total_flag_count - union_count) / n if n else 0.0,
        combined_fraction=union_count / n if n else 0.0,
        intersection_fraction=int(inter.sum()) / n if n else 0.0,
    )
    merged = CurationReport(
        method=f"{mode}({','.join(rep.method for rep in reports)})",
        sample_ids=list(ids),
        flags=flags,
        scores=stack.astype(np.float64).mean(axis=0),
    )
    return merged, stats
