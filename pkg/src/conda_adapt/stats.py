"""Per-class Gaussian statistics of concept scores and shift diagnosis.

Source-domain class statistics (mean and shrunk covariance of concept-score
vectors per class) drive both the alignment loss and the advisory shift
report.  Covariances are biased (1/n) with ridge shrinkage scaled by the
average eigenvalue so every class inverts cleanly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import NotPositiveDefiniteError, as_f64, check_finite, cholesky_inverse

SHRINKAGE_EPS = 1e-5
SHRINKAGE_ATTEMPTS = 5


@dataclass
class ClassStats:
    """Per-class score statistics: means, shrunk covariances, their inverses."""

    means: np.ndarray        # (L, m)
    covariances: np.ndarray  # (L, m, m), after shrinkage
    inverses: np.ndarray     # (L, m, m)
    counts: np.ndarray       # (L,) samples per class

    def __post_init__(self):
        self.means = as_f64(self.means, "means")
        self.covariances = as_f64(self.covariances, "covariances")
        self.inverses = as_f64(self.inverses, "inverses")
        self.counts = np.asarray(self.counts, dtype=np.int64)
        ell, m = self.means.shape
        if self.covariances.shape != (ell, m, m) or self.inverses.shape != (ell, m, m):
            raise ValueError("covariance stack shape does not match means")
        if self.counts.shape != (ell,):
            raise ValueError("counts length does not match class count")

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    @property
    def m(self) -> int:
        return self.means.shape[1]


def _shrunk_inverse(sigma: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Add ridge mass until Cholesky succeeds; return (shrunk, inverse).

    The ridge is eps * mean-eigenvalue * I with eps growing tenfold per
    attempt.  A zero (or negative) trace falls back to unit scale so fully
    degenerate classes still produce a usable diagonal.
    """
    m = sigma.shape[0]
    scale = float(np.trace(sigma)) / m
    if scale <= 0.0:
        scale = 1.0
    eps = SHRINKAGE_EPS
    last_exc = None
    for _ in range(SHRINKAGE_ATTEMPTS):
        shrunk = sigma + eps * scale * np.eye(m)
        try:
            return shrunk, cholesky_inverse(shrunk)
        except NotPositiveDefiniteError as exc:
            last_exc = exc
            eps *= 10.0
    raise NotPositiveDefiniteError(
        f"covariance not invertible after {SHRINKAGE_ATTEMPTS} shrinkage attempts: {last_exc}"
    )


def fit_class_stats(scores: np.ndarray, labels: np.ndarray,
                    num_classes: int | None = None) -> ClassStats:
    """Gaussian fit of score vectors per class label.

    Every class in [0, num_classes) must have at least one sample.  Biased
    covariance (divide by n) plus shrinkage; single-sample classes therefore
    get a pure ridge covariance.
    """
    v = as_f64(scores, "scores")
    y = np.asarray(labels)
    if v.ndim != 2:
        raise ValueError("scores must be N x m")
    if y.shape != (v.shape[0],):
        raise ValueError("labels length does not match score rows")
    check_finite(v, "scores")
    if y.size == 0:
        raise ValueError("cannot fit statistics on an empty set")
    if y.min() < 0:
        raise ValueError("labels must be non-negative")
    ell = int(num_classes) if num_classes is not None else int(y.max()) + 1
    if y.max() >= ell:
        raise ValueError(f"label {int(y.max())} outside [0, {ell})")

    m = v.shape[1]
    means = np.zeros((ell, m))
    covs = np.zeros((ell, m, m))
    invs = np.zeros((ell, m, m))
    counts = np.zeros(ell, dtype=np.int64)
    for c in range(ell):
        rows = v[y == c]
        if rows.shape[0] == 0:
            raise ValueError(f"class {c} has no samples")
        counts[c] = rows.shape[0]
        mu = rows.mean(axis=0)
        centered = rows - mu
        sigma = centered.T @ centered / rows.shape[0]
        covs[c], invs[c] = _shrunk_inverse(sigma)
        means[c] = mu
    return ClassStats(means=means, covariances=covs, inverses=invs, counts=counts)


def mahalanobis(v: np.ndarray, class_index: int, stats: ClassStats) -> float:
    """Squared Mahalanobis distance of one score vector to one class."""
    v = as_f64(v, "score vector")
    if v.shape != (stats.m,):
        raise ValueError(f"score vector shape {v.shape} does not match m={stats.m}")
    if not 0 <= class_index < stats.num_classes:
        raise ValueError(f"class index {class_index} out of range")
    diff = v - stats.means[class_index]
    return float(diff @ stats.inverses[class_index] @ diff)


def mahalanobis_all(scores: np.ndarray, stats: ClassStats) -> np.ndarray:
    """Squared distances of each score row to every class: shape (L, N)."""
    v = as_f64(scores, "scores")
    if v.ndim != 2 or v.shape[1] != stats.m:
        raise ValueError(f"scores shape {v.shape} does not match m={stats.m}")
    diffs = v[None, :, :] - stats.means[:, None, :]        # (L, N, m)
    solved = np.einsum("lnm,lmk->lnk", diffs, stats.inverses)
    return np.einsum("lnk,lnk->ln", solved, diffs)


def intra_inter(v: np.ndarray, label: int, stats: ClassStats) -> tuple[float, float]:
    """Distance to the labeled class and mean distance to the others."""
    if stats.num_classes < 2:
        raise ValueError("need at least two classes for an inter-class distance")
    d = np.array([mahalanobis(v, c, stats) for c in range(stats.num_classes)])
    intra = float(d[label])
    inter = float((d.sum() - intra) / (stats.num_classes - 1))
    return intra, inter


LOW_LEVEL_LIKE = "LOW_LEVEL_LIKE"
CONCEPT_LEVEL_LIKE = "CONCEPT_LEVEL_LIKE"


@dataclass
class ShiftReport:
    """Advisory comparison of target score statistics against the source.

    ``verdict`` is a coarse two-way call: small per-class mean movement reads
    as a low-level (geometry-preserving) shift, large movement as a
    concept-level one.  Classes with no pseudo-labeled samples are excluded
    and listed.
    """

    verdict: str
    aggregate_mean_shift: float
    threshold: float
    class_mean_shift: np.ndarray      # (L,) Euclidean shift per class, NaN if excluded
    class_cov_shift: np.ndarray       # (L,) Frobenius covariance shift, NaN if excluded
    concept_mean_shift: np.ndarray    # (m,) mean squared per-concept mean movement
    excluded_classes: list

    def to_dict(self) -> dict:
        def _clean(arr):
            return [None if not np.isfinite(x) else float(x) for x in arr]

        return {
            "verdict": self.verdict,
            "aggregate_mean_shift": float(self.aggregate_mean_shift),
            "threshold": float(self.threshold),
            "class_mean_shift": _clean(self.class_mean_shift),
            "class_cov_shift": _clean(self.class_cov_shift),
            "concept_mean_shift": [float(x) for x in self.concept_mean_shift],
            "excluded_classes": [int(c) for c in self.excluded_classes],
        }


def diagnose_shift(source: ClassStats, target_scores: np.ndarray,
                   target_labels: np.ndarray, threshold: float | None = None) -> ShiftReport:
    """Compare pseudo-labeled target score statistics against source stats.

    Advisory only: nothing downstream branches on the verdict.  The default
    threshold is half the mean pairwise distance between source class means,
    so "large" is measured relative to how separated the source classes are.
    """
    v = as_f64(target_scores, "target scores")
    y = np.asarray(target_labels)
    if v.ndim != 2 or v.shape[1] != source.m:
        raise ValueError(f"target scores shape {v.shape} does not match m={source.m}")
    if y.shape != (v.shape[0],):
        raise ValueError("target labels length does not match score rows")

    ell, m = source.num_classes, source.m
    if threshold is None:
        if ell > 1:
            gaps = [np.linalg.norm(source.means[i] - source.means[j])
                    for i in range(ell) for j in range(i + 1, ell)]
            threshold = 0.5 * float(np.mean(gaps))
        else:
            threshold = 1.0
    mean_shift = np.full(ell, np.nan)
    cov_shift = np.full(ell, np.nan)
    concept_sq = np.zeros(m)
    excluded = []
    used = 0
    for c in range(ell):
        rows = v[y == c]
        if rows.shape[0] == 0:
            excluded.append(c)
            continue
        mu = rows.mean(axis=0)
        delta = mu - source.means[c]
        mean_shift[c] = float(np.linalg.norm(delta))
        concept_sq += np.square(delta)
        centered = rows - mu
        sigma = centered.T @ centered / rows.shape[0]
        cov_shift[c] = float(np.linalg.norm(sigma - source.covariances[c]))
        used += 1
    if used == 0:
        raise ValueError("no target class has any pseudo-labeled samples")
    aggregate = float(np.nanmean(mean_shift))
    verdict = LOW_LEVEL_LIKE if aggregate < threshold else CONCEPT_LEVEL_LIKE
    return ShiftReport(
        verdict=verdict,
        aggregate_mean_shift=aggregate,
        threshold=float(threshold),
        class_mean_shift=mean_shift,
        class_cov_shift=cov_shift,
        concept_mean_shift=concept_sq / used,
        excluded_classes=excluded,
    )
