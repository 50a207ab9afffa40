"""Sample-based policy metrics via empirical maximum mean discrepancy."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist

from .kernels import kernel_sums, weighted_kernel_sums
from .metrics import MetricKind

_MEDIAN_POINTS = 1000


class SampleTag(str, enum.Enum):
    STATE_ACTION = "sa"
    STATE_NEXT = "ss"
    STATE_RETURN = "sg"


KIND_TAG = {
    MetricKind.DIST: SampleTag.STATE_ACTION,
    MetricKind.INFL: SampleTag.STATE_NEXT,
    MetricKind.VALUE: SampleTag.STATE_RETURN,
}


class InsufficientSamples(ValueError):
    pass


@dataclass
class SampleSet:
    points: np.ndarray
    tag: SampleTag
    state_dim: int | None = None

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        self.tag = SampleTag(self.tag)
        if self.points.shape[0] == 0:
            raise ValueError("sample set is empty")
        if self.tag is SampleTag.STATE_RETURN and self.state_dim is not None:
            if self.points.shape[1] != self.state_dim + 1:
                raise ValueError("state-return samples must be state_dim + 1 wide")

    def __len__(self):
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class KernelSpec:
    """Gaussian kernel ladder ``base * multiplier ** (i - count // 2)``.

    ``base_bandwidth=None`` selects the median heuristic per pair of sets.
    """

    base_bandwidth: float | None = None
    multiplier: float = 2.0
    count: int = 5

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("kernel count must be at least 1")
        if self.multiplier <= 0:
            raise ValueError("kernel multiplier must be positive")
        if self.base_bandwidth is not None and self.base_bandwidth <= 0:
            raise ValueError("base bandwidth must be positive")

    def bandwidths(self, base: float | None = None) -> np.ndarray:
        base = self.base_bandwidth if base is None else base
        if base is None:
            raise ValueError("no base bandwidth given")
        offsets = np.arange(self.count) - self.count // 2
        return base * self.multiplier ** offsets.astype(np.float64)


def gaussian_kernel(x, y, sigma: float) -> float:
    if sigma <= 0:
        raise ValueError("bandwidth must be positive")
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if x.shape != y.shape:
        raise ValueError("kernel arguments differ in dimension")
    d2 = 0.0
    for a, b in zip(x.tolist(), y.tolist()):
        diff = a - b
        d2 += diff * diff
    return math.exp(-d2 / (2.0 * sigma * sigma))


def _canonical(points):
    # lexicographic row order makes every sum independent of the input order
    if points.shape[0] <= 1:
        return np.ascontiguousarray(points)
    order = np.lexsort(points.T[::-1])
    return np.ascontiguousarray(points[order])


def median_bandwidth(X, Y) -> float:
    """Median of nonzero pairwise distances over the pooled sets (1.0 if none)."""
    pooled = _canonical(np.vstack([X, Y]))
    if pooled.shape[0] > _MEDIAN_POINTS:
        idx = np.linspace(0, pooled.shape[0] - 1, _MEDIAN_POINTS).round().astype(int)
        pooled = pooled[idx]
    dists = pdist(pooled)
    dists = dists[dists > 0]
    if dists.size == 0:
        return 1.0
    return float(np.median(dists))


def _as_points(s):
    if isinstance(s, SampleSet):
        return s.points, s.tag
    return np.atleast_2d(np.asarray(s, dtype=np.float64)), None


def mmd2_empirical(X, Y, spec: KernelSpec | None = None, *, base_bandwidth: float | None = None) -> float:
    """Biased (V-statistic) squared MMD averaged over the kernel ladder."""
    spec = spec or KernelSpec()
    X, tag_x = _as_points(X)
    Y, tag_y = _as_points(Y)
    if X.shape[0] == 0 or Y.shape[0] == 0:
        raise ValueError("empty sample set")
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    if tag_x is not None and tag_y is not None and tag_x != tag_y:
        raise ValueError(f"sample tags differ: {tag_x.value} vs {tag_y.value}")
    X = _canonical(X)
    Y = _canonical(Y)
    base = base_bandwidth or spec.base_bandwidth or median_bandwidth(X, Y)
    bw = spec.bandwidths(base)
    n, m = X.shape[0], Y.shape[0]
    kxx = kernel_sums(X, X, bw)
    kyy = kernel_sums(Y, Y, bw)
    # fixed argument order for the cross term keeps the estimate exactly symmetric
    first, second = (X, Y) if _precedes(X, Y) else (Y, X)
    kxy = kernel_sums(first, second, bw)
    est = kxx / (n * n) + kyy / (m * m) - 2.0 * kxy / (n * m)
    return float(np.mean(est))


def _precedes(A, B) -> bool:
    if A.shape != B.shape:
        return A.shape < B.shape
    diff = np.nonzero(A.ravel() != B.ravel())[0]
    return diff.size == 0 or A.ravel()[diff[0]] < B.ravel()[diff[0]]


def unique_rows(points, weights=None):
    """Distinct rows (lexicographic order) and their multiplicities (or summed ``weights``)."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if weights is None:
        weights = np.ones(points.shape[0], dtype=np.int64)
    order = np.lexsort(points.T[::-1])
    srt = points[order]
    new = np.ones(srt.shape[0], dtype=bool)
    new[1:] = np.any(srt[1:] != srt[:-1], axis=1)
    starts = np.nonzero(new)[0]
    return np.ascontiguousarray(srt[starts]), np.add.reduceat(np.asarray(weights)[order], starts)


def weighted_median_bandwidth(U, counts) -> float:
    """Median heuristic over the multiset of rows ``U`` repeated ``counts`` times.

    Matches :func:`median_bandwidth` on the expanded rows (pooled sets of at
    most 1000 points) without materialising them.
    """
    if U.shape[0] < 2:
        return 1.0
    iu, ju = np.triu_indices(U.shape[0], k=1)
    d = pdist(U)
    w = counts[iu] * counts[ju]
    order = np.argsort(d, kind="stable")
    d, w = d[order], w[order]
    keep = d > 0
    d, w = d[keep], w[keep]
    total = int(w.sum())
    if total == 0:
        return 1.0
    cum = np.cumsum(w)
    lo = d[np.searchsorted(cum, (total - 1) // 2, side="right")]
    hi = d[np.searchsorted(cum, total // 2, side="right")]
    return float((lo + hi) / 2.0)


def mmd2_weighted(ux, cx, uy, cy, spec: KernelSpec | None = None, *, base_bandwidth: float | None = None) -> float:
    """Squared MMD between multisets given as distinct rows with integer counts."""
    spec = spec or KernelSpec()
    if ux.shape[1] != uy.shape[1]:
        raise ValueError(f"dimension mismatch: {ux.shape[1]} vs {uy.shape[1]}")
    base = base_bandwidth or spec.base_bandwidth
    if base is None:
        pooled, merged = unique_rows(np.vstack([ux, uy]), np.concatenate([cx, cy]))
        base = weighted_median_bandwidth(pooled, merged)
    bw = spec.bandwidths(base)
    wx = np.asarray(cx, dtype=np.float64) / np.sum(cx)
    wy = np.asarray(cy, dtype=np.float64) / np.sum(cy)
    est = (weighted_kernel_sums(ux, wx, ux, wx, bw) + weighted_kernel_sums(uy, wy, uy, wy, bw)
           - 2.0 * weighted_kernel_sums(ux, wx, uy, wy, bw))
    return float(np.mean(est))


def mmd2_compressed(X, Y, spec: KernelSpec | None = None, *, base_bandwidth: float | None = None) -> float:
    """:func:`mmd2_empirical` evaluated over distinct rows weighted by multiplicity.

    Equal to the plain estimate up to rounding and much cheaper for discrete
    (one-hot) samples with many repeated rows.
    """
    X, _ = _as_points(X)
    Y, _ = _as_points(Y)
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    ux, cx = unique_rows(X)
    uy, cy = unique_rows(Y)
    return mmd2_weighted(ux, cx, uy, cy, spec, base_bandwidth=base_bandwidth)


def pairwise_mmd2(sets, spec: KernelSpec | None = None, *, base_bandwidth: float) -> np.ndarray:
    """Matrix of :func:`mmd2_empirical` values for all pairs at one fixed base bandwidth.

    Self-kernel sums are computed once per set; entries equal the pairwise
    calls exactly.
    """
    spec = spec or KernelSpec()
    bw = spec.bandwidths(base_bandwidth)
    canon = [_canonical(np.atleast_2d(np.asarray(x, dtype=np.float64))) for x in sets]
    self_terms = [kernel_sums(c, c, bw) / (c.shape[0] * c.shape[0]) for c in canon]
    k = len(canon)
    out = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            X, Y = canon[i], canon[j]
            first, second = (X, Y) if _precedes(X, Y) else (Y, X)
            kxy = kernel_sums(first, second, bw)
            n, m = X.shape[0], Y.shape[0]
            out[i, j] = out[j, i] = float(np.mean(self_terms[i] + self_terms[j] - 2.0 * kxy / (n * m)))
    return out


def mmd(X, Y, spec: KernelSpec | None = None, **kwargs) -> float:
    return math.sqrt(max(0.0, mmd2_empirical(X, Y, spec, **kwargs)))


def subsample(points, m: int, seed) -> np.ndarray:
    """Draw ``m`` rows without replacement."""
    points = np.asarray(points)
    n = points.shape[0]
    if n < m:
        raise InsufficientSamples(f"need {m} samples, record holds {n}")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=m, replace=False))
    return points[idx]


def _scaled(points, tag, return_scale):
    if tag is SampleTag.STATE_RETURN and return_scale not in (None, 0.0):
        points = points.copy()
        points[:, -1] = points[:, -1] / return_scale
    return points


def estimate_metric(record_i, record_j, kind, spec: KernelSpec | None = None,
                    m: int = 1000, seed: int = 0, return_scale: float | None = None) -> float:
    """Squared-MMD estimate of a policy metric from two records' samples.

    Records expose ``samples[tag]`` as :class:`SampleSet`. Both subsamples use
    the same seed. ``return_scale`` divides the return column of
    state-return samples (the dataset-wide return range).
    """
    kind = MetricKind(kind)
    if not kind.has_mmd:
        raise ValueError(f"metric {kind.value} has no sample-based estimator")
    tag = KIND_TAG[kind]
    xs = record_i.samples[tag]
    ys = record_j.samples[tag]
    X = _scaled(subsample(xs.points, m, seed), tag, return_scale)
    Y = _scaled(subsample(ys.points, m, seed), tag, return_scale)
    return mmd2_empirical(SampleSet(X, tag), SampleSet(Y, tag), spec)
