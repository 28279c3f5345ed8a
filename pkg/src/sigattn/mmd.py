"""Maximum mean discrepancy between embedding sets.

RBF kernel ``exp(-|x - y|^2 / (2 bw^2))`` with the bandwidth set to the median
pairwise distance of the pooled sample.  The bandwidth is fixed once on the
original data and reused for every bootstrap resample.
"""

from __future__ import annotations

import csv
import itertools
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from scipy.spatial.distance import cdist, pdist

__all__ = [
    "EmbeddingSet",
    "MmdResult",
    "EstimatorError",
    "BandwidthWarning",
    "rbf_kernel",
    "median_heuristic",
    "mmd2",
    "bootstrap_mmd",
    "pairwise_mmd_table",
    "write_mmd_table",
    "read_embeddings_csv",
    "gaussian_mixture_embeddings",
    "MMD_COLUMNS",
]

Estimator = Literal["biased", "unbiased"]


class EstimatorError(ValueError):
    pass


class BandwidthWarning(UserWarning):
    pass


@dataclass
class EmbeddingSet:
    points: np.ndarray
    label: str = ""

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        if not np.all(np.isfinite(self.points)):
            raise ValueError(f"embedding set {self.label!r} has non-finite entries")

    def __len__(self):
        return self.points.shape[0]


@dataclass
class MmdResult:
    point_estimate: float
    bootstrap_samples: np.ndarray
    ci_lower: float
    ci_upper: float
    bandwidth: float
    observed: float = math.nan
    estimator: str = "biased"
    bandwidth_fallback: bool = False
    mmd: float = field(init=False)
    mmd_ci_lower: float = field(init=False)
    mmd_ci_upper: float = field(init=False)

    def __post_init__(self):
        # sqrt is monotone, so the percentile interval maps straight through
        self.mmd = math.sqrt(max(self.point_estimate, 0.0))
        self.mmd_ci_lower = math.sqrt(max(self.ci_lower, 0.0))
        self.mmd_ci_upper = math.sqrt(max(self.ci_upper, 0.0))


def _points(x) -> np.ndarray:
    return x.points if isinstance(x, EmbeddingSet) else np.atleast_2d(np.asarray(x, dtype=np.float64))


def rbf_kernel(x, y, bandwidth: float) -> float:
    if not bandwidth > 0:
        raise ValueError(f"bandwidth must be > 0, got {bandwidth}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch {x.shape} vs {y.shape}")
    d2 = float(np.sum((x - y) ** 2))
    return math.exp(-d2 / (2.0 * bandwidth * bandwidth))


def _gram(x, y, bandwidth):
    return np.exp(-cdist(x, y, "sqeuclidean") / (2.0 * bandwidth * bandwidth))


def median_heuristic(pooled, max_exact: int = 2000, n_pairs: int = 1_000_000, seed: int = 0) -> tuple[float, bool]:
    """Median pairwise Euclidean distance.

    Exact over all pairs up to ``max_exact`` points, otherwise over a uniform
    sample of ``n_pairs`` distinct-index pairs.  Returns ``(bandwidth,
    fell_back)``; a zero median falls back to 1.0 with a warning.
    """
    x = _points(pooled)
    n = x.shape[0]
    if n < 2:
        raise ValueError("median heuristic needs at least two points")
    if n <= max_exact:
        med = float(np.median(pdist(x)))
    else:
        rng = np.random.default_rng(seed)
        i = rng.integers(0, n, n_pairs)
        j = rng.integers(0, n - 1, n_pairs)
        j = j + (j >= i)
        med = float(np.median(np.linalg.norm(x[i] - x[j], axis=1)))
    if med > 0:
        return med, False
    warnings.warn("median pairwise distance is 0; using bandwidth 1.0", BandwidthWarning, stacklevel=2)
    return 1.0, True


def _mmd2_from_gram(kxx, kyy, kxy, estimator: Estimator) -> float:
    n, m = kxx.shape[0], kyy.shape[0]
    if estimator == "biased":
        return float(kxx.mean() + kyy.mean() - 2.0 * kxy.mean())
    if estimator == "unbiased":
        if n < 2 or m < 2:
            raise EstimatorError("unbiased MMD needs at least two points per set")
        xx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
        yy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
        return float(xx + yy - 2.0 * kxy.mean())
    raise ValueError(f"unknown estimator {estimator!r}")


def mmd2(a, b, estimator: Estimator = "biased", bandwidth: float | None = None) -> float:
    """Squared MMD.  ``bandwidth=None`` applies the median heuristic to the
    pooled points."""
    x, y = _points(a), _points(b)
    if bandwidth is None:
        bandwidth, _ = median_heuristic(np.vstack([x, y]))
    if not bandwidth > 0:
        raise ValueError("bandwidth must be > 0")
    return _mmd2_from_gram(_gram(x, x, bandwidth), _gram(y, y, bandwidth), _gram(x, y, bandwidth), estimator)


def bootstrap_mmd(
    a,
    b,
    resamples: int = 1000,
    ci: float = 0.95,
    estimator: Estimator = "biased",
    seed: int = 0,
    bandwidth: float | None = None,
) -> MmdResult:
    """Bootstrap distribution of MMD^2 with a percentile interval.

    Resample ``i`` draws with replacement from each set using generator
    ``seed + i``, so results do not depend on evaluation order.  The point
    estimate is the bootstrap mean.
    """
    if resamples < 2:
        raise ValueError("need at least two bootstrap resamples")
    x, y = _points(a), _points(b)
    n, m = x.shape[0], y.shape[0]
    pooled = np.vstack([x, y])
    fallback = False
    if bandwidth is None:
        bandwidth, fallback = median_heuristic(pooled)
    gram = _gram(pooled, pooled, bandwidth)
    observed = _mmd2_from_gram(gram[:n, :n], gram[n:, n:], gram[:n, n:], estimator)

    samples = np.empty(resamples)
    for i in range(resamples):
        rng = np.random.default_rng(seed + i)
        ia = rng.integers(0, n, n)
        ib = n + rng.integers(0, m, m)
        samples[i] = _mmd2_from_gram(
            gram[np.ix_(ia, ia)], gram[np.ix_(ib, ib)], gram[np.ix_(ia, ib)], estimator
        )
    # rounded so ci=0.95 gives exactly the 2.5/97.5 percentiles
    tail = round(50.0 * (1.0 - ci), 10)
    lo, hi = np.percentile(samples, [tail, 100.0 - tail])
    return MmdResult(
        point_estimate=float(samples.mean()),
        bootstrap_samples=samples,
        ci_lower=float(lo),
        ci_upper=float(hi),
        bandwidth=float(bandwidth),
        observed=observed,
        estimator=estimator,
        bandwidth_fallback=fallback,
    )


MMD_COLUMNS = ("pair", "estimate", "ci_lower", "ci_upper", "bandwidth", "mmd", "mmd_ci_lower", "mmd_ci_upper")
_FIELD = {"estimate": "point_estimate"}


def pairwise_mmd_table(sets: list[EmbeddingSet], **kwargs) -> list[tuple[str, MmdResult]]:
    """Bootstrap MMD for every unordered pair of labelled sets, in input order."""
    if len(sets) < 2:
        raise ValueError("need at least two labelled sets")
    return [
        (f"{sa.label} vs {sb.label}", bootstrap_mmd(sa, sb, **kwargs))
        for sa, sb in itertools.combinations(sets, 2)
    ]


def write_mmd_table(rows: list[tuple[str, MmdResult]], path) -> Path:
    """CSV with one row per pair; ``estimate``/``ci_*`` are MMD^2, ``mmd*`` their square roots."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MMD_COLUMNS)
        for pair, r in rows:
            w.writerow([pair] + [repr(float(getattr(r, _FIELD.get(c, c)))) for c in MMD_COLUMNS[1:]])
    return path


def read_embeddings_csv(path, label_column: str = "label") -> list[EmbeddingSet]:
    """One row per point: a label column plus numeric feature columns.
    Sets are returned in order of first appearance."""
    groups: dict[str, list[list[float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or label_column not in reader.fieldnames:
            raise ValueError(f"{path}: missing {label_column!r} column")
        feats = [c for c in reader.fieldnames if c != label_column]
        for row in reader:
            groups.setdefault(row[label_column], []).append([float(row[c]) for c in feats])
    return [EmbeddingSet(np.array(pts), label) for label, pts in groups.items()]


def gaussian_mixture_embeddings(
    n_labels: int = 8, points_per_label: int = 40, dim: int = 16, spread: float = 3.0, seed: int = 0
) -> list[EmbeddingSet]:
    """Synthetic labelled clusters: isotropic Gaussians around random centres."""
    rng = np.random.default_rng(seed)
    centres = rng.standard_normal((n_labels, dim)) * spread / math.sqrt(dim)
    return [
        EmbeddingSet(c + rng.standard_normal((points_per_label, dim)), f"type{i}")
        for i, c in enumerate(centres)
    ]
