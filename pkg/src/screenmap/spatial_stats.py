"""Spatial weights, Getis-Ord Gi* hot/cold spots, and Jenks natural breaks."""

import enum
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.special import ndtr
from scipy.stats import false_discovery_control
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .geo import SpatialIndex, as_coords

DEFAULT_WEIGHTS_K = 8
DEFAULT_JENKS_K = 5

# two-sided normal critical values for 90/95/99% confidence
Z_90, Z_95, Z_99 = 1.645, 1.960, 2.576


class DegenerateVarianceError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SpatialWeights:
    """Row-wise neighbour weights stored as a CSR matrix (row i = unit i)."""

    ids: tuple
    matrix: sparse.csr_matrix
    self_inclusive: bool = True
    scheme: str = "custom"

    def __post_init__(self):
        m = sparse.csr_matrix(self.matrix, dtype=float)
        m.sort_indices()
        n = len(self.ids)
        if m.shape != (n, n):
            raise ValueError("weights matrix must be n x n")
        if m.nnz and (not np.all(np.isfinite(m.data)) or m.data.min() < 0):
            raise ValueError("weights must be finite and non-negative")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))

    @property
    def n(self):
        return len(self.ids)

    def neighbors(self, i):
        row = self.matrix.getrow(i)
        return [self.ids[j] for j in row.indices]

    def weights(self, i):
        return self.matrix.getrow(i).data.copy()

    def cardinalities(self):
        return np.diff(self.matrix.indptr)

    @classmethod
    def from_neighbors(cls, ids, neighbor_lists, weight_lists=None, self_inclusive=True, scheme="custom"):
        n = len(ids)
        rows, cols, vals = [], [], []
        for i, nb in enumerate(neighbor_lists):
            w = np.ones(len(nb)) if weight_lists is None else np.asarray(weight_lists[i], dtype=float)
            rows.extend([i] * len(nb))
            cols.extend(nb)
            vals.extend(w)
        m = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
        return cls(tuple(ids), m, self_inclusive, scheme)


def weights_knn(points, k=DEFAULT_WEIGHTS_K, ids=None, self_inclusive=True):
    """Binary weights: each unit's k nearest others (haversine, ties by id), plus itself."""
    coords = as_coords(points)
    n = len(coords)
    if k < 1:
        raise ValueError("k must be >= 1")
    if n <= k:
        raise ValueError(f"need more than k={k} units for k-nearest weights, got {n}")
    index = SpatialIndex(coords, ids)
    lists = []
    for i, (lat, lon) in enumerate(coords):
        order, _ = index.k_nearest_idx(lat, lon, k + 1)
        order = order[order != i][:k]
        if len(order) < k:  # coincident points crowded self out of the first k+1
            order, _ = index.k_nearest_idx(lat, lon, k + 2)
            order = order[order != i][:k]
        lists.append(([i] if self_inclusive else []) + order.tolist())
    return SpatialWeights.from_neighbors(index.ids.tolist(), lists, self_inclusive=self_inclusive, scheme=f"knn:{k}")


def weights_distance_band(points, d_miles, ids=None, self_inclusive=True):
    """Binary weights: w_ij = 1 iff haversine(i, j) <= d_miles (or i == j when self-inclusive)."""
    if not d_miles > 0:
        raise ValueError("distance band must be positive")
    coords = as_coords(points)
    index = SpatialIndex(coords, ids)
    lists = []
    for i, (lat, lon) in enumerate(coords):
        nb = index.within_radius_idx(lat, lon, d_miles)[0]
        nb = np.sort(nb[nb != i])
        lists.append(([i] if self_inclusive else []) + nb.tolist())
    return SpatialWeights.from_neighbors(index.ids.tolist(), lists, self_inclusive=self_inclusive,
                                         scheme=f"distance_band:{d_miles!r}")


@dataclass(frozen=True, eq=False)
class GiResult:
    ids: tuple
    z: np.ndarray  # NaN where undefined
    p: np.ndarray  # two-sided normal p-value, NaN where undefined

    @property
    def defined(self):
        return np.isfinite(self.z)


def gi_star(values, weights):
    """Getis-Ord Gi* z-scores and two-sided normal p-values.

    z_i = (sum_j w_ij x_j - xbar W_i) / (S sqrt((n S1_i - W_i^2) / (n - 1)))
    with W_i = sum_j w_ij, S1_i = sum_j w_ij^2 and S the population standard
    deviation of x. Units whose denominator vanishes (neighbourhood = whole
    set) get NaN.
    """
    x = np.asarray(values, dtype=float)
    n = len(x)
    if n < 3:
        raise ValueError("Gi* needs at least 3 units")
    if x.shape != (n,) or not np.all(np.isfinite(x)):
        raise ValueError("values must be a finite 1-D array")
    if weights.n != n:
        raise ValueError(f"weights cover {weights.n} units, values have {n}")
    W = weights.matrix
    if np.any(W.diagonal() <= 0):
        raise ValueError("Gi* requires self-inclusive weights (w_ii > 0)")
    if np.ptp(x) == 0:
        raise DegenerateVarianceError("degenerate variance: all values are equal")
    xbar = x.mean()
    dev = x - xbar
    s = np.sqrt(np.mean(dev * dev))
    wsum = np.asarray(W.sum(axis=1)).ravel()
    w2sum = np.asarray(W.multiply(W).sum(axis=1)).ravel()
    num = W @ dev  # == sum_j w_ij x_j - xbar * W_i
    bracket = (n * w2sum - wsum * wsum) / (n - 1)
    ok = bracket > 1e-12 * n * w2sum
    z = np.full(n, np.nan)
    z[ok] = num[ok] / (s * np.sqrt(bracket[ok]))
    p = np.full(n, np.nan)
    p[ok] = np.maximum(2.0 * ndtr(-np.abs(z[ok])), np.finfo(float).tiny)
    return GiResult(weights.ids, z, p)


class HotspotClass(str, enum.Enum):
    HOT99 = "Hot99"
    HOT95 = "Hot95"
    HOT90 = "Hot90"
    NOT_SIGNIFICANT = "NotSignificant"
    COLD90 = "Cold90"
    COLD95 = "Cold95"
    COLD99 = "Cold99"

    @property
    def level(self):
        """Signed confidence level: +3 for Hot99 ... -3 for Cold99."""
        return _LEVEL[self]


_LEVEL = {
    HotspotClass.HOT99: 3, HotspotClass.HOT95: 2, HotspotClass.HOT90: 1, HotspotClass.NOT_SIGNIFICANT: 0,
    HotspotClass.COLD90: -1, HotspotClass.COLD95: -2, HotspotClass.COLD99: -3,
}
_BY_LEVEL = {v: k for k, v in _LEVEL.items()}


def classify_z(z):
    """Class of a single z-score by the fixed 90/95/99% thresholds."""
    if not np.isfinite(z):
        return HotspotClass.NOT_SIGNIFICANT
    a = abs(z)
    level = 3 if a >= Z_99 else 2 if a >= Z_95 else 1 if a >= Z_90 else 0
    return _BY_LEVEL[level if z > 0 else -level]


def classify_hotspots(result, fdr=False):
    """Per-unit :class:`HotspotClass` plus a mask of units with undefined z.

    With ``fdr=True`` significance uses Benjamini-Hochberg adjusted p-values
    (<= 0.01 / 0.05 / 0.10) instead of the raw z thresholds.
    """
    z = np.asarray(result.z, dtype=float)
    undefined = ~np.isfinite(z)
    if not fdr:
        return [classify_z(v) for v in z], undefined
    q = np.full(len(z), np.nan)
    if (~undefined).any():
        q[~undefined] = false_discovery_control(result.p[~undefined], method="bh")
    classes = []
    for zi, qi in zip(z, q):
        if not np.isfinite(zi):
            classes.append(HotspotClass.NOT_SIGNIFICANT)
            continue
        level = 3 if qi <= 0.01 else 2 if qi <= 0.05 else 1 if qi <= 0.10 else 0
        classes.append(_BY_LEVEL[level if zi > 0 else -level])
    return classes, undefined


@dataclass(frozen=True)
class JenksBreaks:
    breaks: tuple  # class maxima, ascending
    ssd: float  # total within-class sum of squared deviations

    @property
    def k(self):
        return len(self.breaks)


def _ssd_table(v, w):
    c = v - np.average(v, weights=w)
    W = np.concatenate(([0.0], np.cumsum(w)))
    S1 = np.concatenate(([0.0], np.cumsum(w * c)))
    S2 = np.concatenate(([0.0], np.cumsum(w * c * c)))
    return W, S1, S2


def _class_ssd(vals, counts):
    m = np.average(vals, weights=counts)
    return float(np.sum(counts * (vals - m) ** 2))


def jenks_breaks(values, k=DEFAULT_JENKS_K):
    """Exact natural breaks: contiguous classes of the sorted data minimising total SSD.

    Duplicates are grouped first, so the dynamic programme runs in O(k u^2)
    over u distinct values. Breaks are reported as class maxima.
    """
    x = np.asarray(values, dtype=float).ravel()
    if not np.all(np.isfinite(x)):
        raise ValueError("values must be finite")
    v, w = np.unique(x, return_counts=True)
    w = w.astype(float)
    u = len(v)
    if not 1 <= k <= u:
        raise ValueError(f"k={k} classes requested but only {u} distinct values")
    W, S1, S2 = _ssd_table(v, w)

    def ssd(i, j):
        # SSD of distinct values i..j inclusive; i may be an array
        cw = W[j + 1] - W[i]
        cs = S1[j + 1] - S1[i]
        return np.maximum(S2[j + 1] - S2[i] - cs * cs / cw, 0.0)

    cost = np.full((k, u), np.inf)
    start = np.zeros((k, u), dtype=np.int64)
    cost[0] = ssd(np.zeros(u, dtype=np.int64), np.arange(u))
    for c in range(1, k):
        for j in range(c, u):
            i = np.arange(c, j + 1)  # first distinct value of the last class
            total = cost[c - 1, i - 1] + ssd(i, j)
            best = int(np.argmin(total))
            cost[c, j] = total[best]
            start[c, j] = i[best]
    ends = []
    j = u - 1
    for c in range(k - 1, -1, -1):
        ends.append(j)
        j = start[c, j] - 1
    ends.reverse()
    lo = 0
    total = 0.0
    for e in ends:
        total += _class_ssd(v[lo:e + 1], w[lo:e + 1])
        lo = e + 1
    return JenksBreaks(tuple(float(v[e]) for e in ends), total)


def assign_classes(values, breaks):
    """Index of the first break >= value; values above the last break clamp to the top class."""
    b = np.asarray(breaks, dtype=float)
    if np.any(np.diff(b) <= 0):
        raise ValueError("breaks must be strictly ascending")
    x = np.asarray(values, dtype=float)
    cls = np.searchsorted(b, x, side="left")
    over = cls >= len(b)
    if over.any():
        warnings.warn(f"{int(over.sum())} value(s) above the last break assigned to the top class", stacklevel=2)
        cls[over] = len(b) - 1
    return cls


class GetisOrdGiStar(BaseEstimator):
    """Local Gi* hot/cold-spot detector.

    Parameters
    ----------
    weights : {"knn", "distance_band"}
    k : int
        Neighbours for ``"knn"`` weights.
    distance_miles : float
        Band for ``"distance_band"`` weights.
    fdr : bool
        Benjamini-Hochberg adjusted significance.
    """

    def __init__(self, weights="knn", k=DEFAULT_WEIGHTS_K, distance_miles=None, fdr=False):
        self.weights = weights
        self.k = k
        self.distance_miles = distance_miles
        self.fdr = fdr

    def build_weights(self, coords, ids=None):
        if self.weights == "knn":
            return weights_knn(coords, self.k, ids)
        if self.weights == "distance_band":
            if self.distance_miles is None:
                raise ValueError("distance_band weights need distance_miles")
            return weights_distance_band(coords, self.distance_miles, ids)
        raise ValueError(f"unknown weights scheme {self.weights!r}")

    def fit(self, values, *, coords=None, ids=None, weights=None):
        self.weights_ = weights if weights is not None else self.build_weights(coords, ids)
        res = gi_star(values, self.weights_)
        self.result_ = res
        self.z_ = res.z
        self.p_ = res.p
        self.classes_, self.undefined_ = classify_hotspots(res, fdr=self.fdr)
        return self

    def fit_predict(self, values, *, coords=None, ids=None, weights=None):
        return self.fit(values, coords=coords, ids=ids, weights=weights).classes_


class JenksNaturalBreaks(TransformerMixin, BaseEstimator):
    """Choropleth classifier: fit breaks on 1-D values, transform to class indices."""

    def __init__(self, n_classes=DEFAULT_JENKS_K):
        self.n_classes = n_classes

    def fit(self, X, y=None):
        res = jenks_breaks(np.asarray(X, dtype=float).ravel(), self.n_classes)
        self.breaks_ = np.array(res.breaks)
        self.ssd_ = res.ssd
        return self

    def transform(self, X):
        check_is_fitted(self, "breaks_")
        return assign_classes(np.asarray(X, dtype=float).ravel(), self.breaks_).reshape(-1, 1)

    def predict(self, X):
        return self.transform(X).ravel()
