"""Shapley-value attributions for fitted models.

Attributions are interventional: features outside a coalition S take their
values from a background row, and the coalition value v(S) averages the
model output over the background set. ``shap_bruteforce`` evaluates the
definition directly for any model; ``shap_forest`` computes the same numbers
for tree ensembles in time linear in the tree size.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.stats import spearmanr

from .models.forest import ForestModel, mean_of_trees
from .models.tree import DecisionTree
from .rng import SplitMix64

MAX_BRUTEFORCE_FEATURES = 16
DEFAULT_BACKGROUND_SIZE = 100
DEFAULT_THRESHOLD = 0.3


@dataclass(frozen=True, eq=False)
class ShapMatrix:
    """Per-instance, per-feature attributions sharing one base value.

    ``base_value + phi[i].sum()`` reproduces the model output for instance i.
    """

    base_value: float
    phi: np.ndarray  # (n_instances, n_features), response units
    feature_names: tuple = None

    @property
    def n_instances(self):
        return self.phi.shape[0]

    @property
    def n_features(self):
        return self.phi.shape[1]

    @property
    def names(self):
        if self.feature_names is not None:
            return tuple(self.feature_names)
        return tuple(f"x{j}" for j in range(self.n_features))

    def reconstructed(self):
        """base_value + row sums of phi (should equal the model predictions)."""
        return self.base_value + self.phi.sum(axis=1)

    def column(self, feature):
        j = self.names.index(feature) if isinstance(feature, str) else int(feature)
        return self.phi[:, j]


@dataclass(frozen=True)
class ImportanceRanking:
    """Features sorted by decreasing mean |phi|; ties keep feature order."""

    features: tuple
    importance: tuple
    index: tuple  # original column of each ranked feature

    def __len__(self):
        return len(self.features)

    def as_dict(self):
        return dict(zip(self.features, self.importance))

    def rows(self):
        """(feature, mean_abs_shap, rank) with ranks starting at 1."""
        return [(f, v, r + 1) for r, (f, v) in enumerate(zip(self.features, self.importance))]


# --- brute force -------------------------------------------------------------

def _shapley_weights(d):
    fd = math.factorial(d)
    return np.array([math.factorial(s) * math.factorial(d - s - 1) / fd for s in range(d)])


def coalition_values(model_fn, x, background, chunk=4096):
    """v(S) for every coalition S, indexed by bitmask (bit j set = feature j in S)."""
    d = len(x)
    nb = background.shape[0]
    out = np.empty(1 << d)
    shifts = np.arange(d)
    for lo in range(0, 1 << d, chunk):
        masks = np.arange(lo, min(lo + chunk, 1 << d))
        member = ((masks[:, None] >> shifts) & 1).astype(bool)
        rows = np.where(member[:, None, :], x, background[None, :, :]).reshape(-1, d)
        pred = np.asarray(model_fn(rows), dtype=float).reshape(len(masks), nb)
        out[masks] = pred.mean(axis=1)
    return out


def shap_bruteforce(model_fn, x, background):
    """Exact interventional Shapley values of one instance by subset enumeration.

    ``model_fn`` maps an (m, d) array to m predictions. Cost is 2^d model
    evaluations per background row, so d is capped at 16.

    Returns ``(phi, base)`` where ``base = v(empty set)``.
    """
    x = np.asarray(x, dtype=float).ravel()
    background = np.atleast_2d(np.asarray(background, dtype=float))
    d = len(x)
    if d > MAX_BRUTEFORCE_FEATURES:
        raise ValueError(f"brute-force Shapley needs 2^{d} coalitions; use shap_forest for tree models "
                         f"(limit is {MAX_BRUTEFORCE_FEATURES} features)")
    if background.shape[0] == 0:
        raise ValueError("background set is empty")
    if background.shape[1] != d:
        raise ValueError(f"background has {background.shape[1]} columns, instance has {d}")
    v = coalition_values(model_fn, x, background)
    masks = np.arange(1 << d)
    sizes = np.array([bin(m).count("1") for m in range(1 << d)])
    w = _shapley_weights(d)
    phi = np.empty(d)
    for j in range(d):
        S = masks[(masks >> j) & 1 == 0]
        phi[j] = np.sum(w[sizes[S]] * (v[S | (1 << j)] - v[S]))
    return phi, float(v[0])


# --- tree algorithm ----------------------------------------------------------

def _path_weights(d):
    """Leaf payout weights for a path fixing |A| features to x and |B| to the background.

    A leaf reached exactly when A is inside S and B is disjoint from S
    contributes value * pos[|A|, |B|] to each j in A and
    -value * neg[|A|, |B|] to each j in B.
    """
    pos = np.zeros((d + 1, d + 1))
    neg = np.zeros((d + 1, d + 1))
    f = math.factorial
    for a in range(d + 1):
        for b in range(d + 1 - a):
            if a >= 1:
                pos[a, b] = f(a - 1) * f(b) / f(a + b)
            if b >= 1:
                neg[a, b] = f(a) * f(b - 1) / f(a + b)
    return pos, neg


@njit(cache=True, nogil=True)
def _pair_shap(feature, threshold, left, right, value, root, x, z, pos, neg, out, nodes, sets, counts):
    # Adds the Shapley values of one tree, foreground x against background row z, into out.
    # sets[k, j]: 0 = feature j not yet split on, 1 = in A (follow x), 2 = in B (follow z)
    d = x.shape[0]
    nodes[0] = root
    sets[0, :] = 0
    counts[0, 0] = 0
    counts[0, 1] = 0
    top = 1
    while top > 0:
        top -= 1
        node = nodes[top]
        na = counts[top, 0]
        nb = counts[top, 1]
        f = feature[node]
        if f < 0:
            if na + nb > 0:
                v = value[node]
                wp = v * pos[na, nb]
                wn = v * neg[na, nb]
                for j in range(d):
                    s = sets[top, j]
                    if s == 1:
                        out[j] += wp
                    elif s == 2:
                        out[j] -= wn
            continue
        xchild = left[node] if x[f] <= threshold[node] else right[node]
        zchild = left[node] if z[f] <= threshold[node] else right[node]
        s = sets[top, f]
        if s == 1 or xchild == zchild:
            nodes[top] = xchild
            top += 1
        elif s == 2:
            nodes[top] = zchild
            top += 1
        else:
            sets[top + 1, :] = sets[top, :]
            sets[top, f] = 1
            nodes[top] = xchild
            counts[top, 0] = na + 1
            sets[top + 1, f] = 2
            nodes[top + 1] = zchild
            counts[top + 1, 0] = na
            counts[top + 1, 1] = nb + 1
            top += 2


@njit(cache=True, nogil=True)
def _forest_shap(feature, threshold, left, right, value, roots, X, Z, pos, neg, stack_size, out):
    n, d = X.shape
    n_trees = roots.shape[0]
    nb = Z.shape[0]
    nodes = np.empty(stack_size, dtype=np.int64)
    sets = np.empty((stack_size, d), dtype=np.int8)
    counts = np.empty((stack_size, 2), dtype=np.int64)
    tree_phi = np.empty(d)
    for i in range(n):
        acc = np.zeros(d)
        for t in range(n_trees):
            tree_phi[:] = 0.0
            for b in range(nb):
                _pair_shap(feature, threshold, left, right, value, roots[t], X[i], Z[b], pos, neg,
                           tree_phi, nodes, sets, counts)
            for j in range(d):
                acc[j] += tree_phi[j] / nb
        for j in range(d):
            out[i, j] = acc[j] / n_trees


def _as_trees(model):
    if isinstance(model, ForestModel):
        return model.trees, model.n_features, model.feature_names
    if isinstance(model, DecisionTree):
        return (model,), model.n_features, None
    raise TypeError(f"expected a ForestModel or DecisionTree, got {type(model).__name__}")


def _pack(trees):
    """Concatenate tree arrays with child indices shifted to global node ids."""
    offsets = np.cumsum([0] + [t.n_nodes for t in trees])[:-1]
    feature = np.concatenate([t.feature for t in trees]).astype(np.int64)
    threshold = np.concatenate([t.threshold for t in trees]).astype(np.float64)
    value = np.concatenate([t.value for t in trees]).astype(np.float64)
    left = np.concatenate([np.where(t.left >= 0, t.left + o, -1) for t, o in zip(trees, offsets)]).astype(np.int64)
    right = np.concatenate([np.where(t.right >= 0, t.right + o, -1) for t, o in zip(trees, offsets)]).astype(np.int64)
    depth = max(t.depth for t in trees)
    return feature, threshold, left, right, value, offsets.astype(np.int64), depth


def shap_forest(model, X, background, n_jobs=1):
    """Interventional Shapley values for a forest (or a single tree).

    Exact: per (tree, background row) the coalitions are enumerated
    implicitly by following x or the background row at each split on a
    feature not seen before on the path. Results are averaged over the
    background and over trees. Instances are independent, so any
    ``n_jobs`` gives identical output.

    ``X`` may be one instance (1-D) or a matrix. Returns a :class:`ShapMatrix`.
    """
    trees, d, names = _as_trees(model)
    X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=np.float64)))
    Z = np.ascontiguousarray(np.atleast_2d(np.asarray(background, dtype=np.float64)))
    if X.shape[1] != d or Z.shape[1] != d:
        raise ValueError(f"model has {d} features; instances have {X.shape[1]}, background {Z.shape[1]}")
    if Z.shape[0] == 0:
        raise ValueError("background set is empty")
    feature, threshold, left, right, value, roots, depth = _pack(trees)
    pos, neg = _path_weights(d)
    stack_size = depth + 2
    phi = np.zeros((X.shape[0], d))
    if X.shape[0]:
        chunks = np.array_split(np.arange(X.shape[0]), max(1, min(int(n_jobs), X.shape[0])))

        def run(idx):
            if len(idx):
                out = np.empty((len(idx), d))
                _forest_shap(feature, threshold, left, right, value, roots, X[idx], Z, pos, neg, stack_size, out)
                phi[idx] = out

        if n_jobs == 1:
            run(chunks[0])
        else:
            with ThreadPoolExecutor(max_workers=n_jobs) as pool:
                list(pool.map(run, chunks))
    per_tree_base = np.array([t.predict(Z).mean() for t in trees])
    base = float(mean_of_trees(per_tree_base[:, None])[0])
    return ShapMatrix(base, phi, None if names is None else tuple(names))


# --- summaries ---------------------------------------------------------------

def mean_abs_shap(shap):
    """Rank features by mean |phi| over instances.

    Means use exactly rounded sums, so the ranking does not depend on
    instance order.
    """
    phi = np.asarray(shap.phi, dtype=float)
    if phi.size == 0:
        raise ValueError("empty SHAP matrix")
    n = phi.shape[0]
    imp = np.array([math.fsum(np.abs(phi[:, j])) / n for j in range(phi.shape[1])])
    order = np.lexsort((np.arange(len(imp)), -imp))
    names = shap.names
    return ImportanceRanking(tuple(names[j] for j in order), tuple(float(imp[j]) for j in order),
                             tuple(int(j) for j in order))


def top_features(ranking, threshold=DEFAULT_THRESHOLD):
    """Features whose mean |phi| is strictly above ``threshold``, in rank order."""
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    return [f for f, v in zip(ranking.features, ranking.importance) if v > threshold]


@dataclass(frozen=True, eq=False)
class ScatterTable:
    feature: str
    x: np.ndarray
    phi: np.ndarray
    rho: float  # Spearman rank correlation; nan when undefined
    direction: str  # "positive", "negative" or "none"

    def rows(self):
        return list(zip(self.x.tolist(), self.phi.tolist()))


def shap_scatter_export(feature, x_values, phi_column):
    """Pair feature values with their attributions and summarise the direction of influence."""
    x = np.asarray(x_values, dtype=float).ravel()
    phi = np.asarray(phi_column, dtype=float).ravel()
    if len(x) != len(phi):
        raise ValueError(f"length mismatch: {len(x)} feature values, {len(phi)} SHAP values")
    rho = float("nan")
    if len(x) >= 2 and np.ptp(x) > 0 and np.ptp(phi) > 0:
        rho = float(spearmanr(x, phi).statistic)
    if rho > 0:
        direction = "positive"
    elif rho < 0:
        direction = "negative"
    else:
        direction = "none"
    return ScatterTable(str(feature), x, phi, rho, direction)


def sample_background(X, size=DEFAULT_BACKGROUND_SIZE, seed=0):
    """Seeded uniform sample of ``size`` distinct rows (all rows if fewer).

    Returns ``(rows, indices)`` with indices ascending.
    """
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if n == 0:
        raise ValueError("cannot sample a background from zero rows")
    if size < 1:
        raise ValueError("background size must be >= 1")
    if n <= size:
        idx = np.arange(n)
    else:
        idx = np.sort(SplitMix64(seed).choice(n, size))
    return X[idx], idx


class ForestExplainer:
    """Interventional SHAP for a fitted forest with a sampled background.

    Parameters
    ----------
    model : ForestModel, DecisionTree or a fitted RandomForestRegressor
    background_size : int
        Rows drawn from the data passed to :meth:`fit`.
    seed : int
        Seed of the background draw.
    """

    def __init__(self, model, background_size=DEFAULT_BACKGROUND_SIZE, seed=0, n_jobs=1):
        self.model = model
        self.background_size = background_size
        self.seed = seed
        self.n_jobs = n_jobs

    def _tree_model(self):
        return getattr(self.model, "model_", self.model)

    def fit(self, X):
        self.background_, self.background_index_ = sample_background(X, self.background_size, self.seed)
        return self

    def shap_values(self, X):
        if not hasattr(self, "background_"):
            raise RuntimeError("call fit() with background data first")
        return shap_forest(self._tree_model(), X, self.background_, n_jobs=self.n_jobs)

    def metadata(self):
        model = self._tree_model()
        meta = {"background_size": int(len(self.background_)), "background_seed": self.seed,
                "background_rows": self.background_index_.tolist()}
        if isinstance(model, ForestModel):
            meta["model_sha256"] = model.digest()
        return meta
