"""Regression trees grown by greedy SSD-minimising splits (numba kernels)."""

from dataclasses import dataclass

import numpy as np
from numba import njit

from ..rng import SplitMix64, _integer

LEAF = -1


@njit(cache=True, nogil=True)
def _grow(X, y, samples, mtry, min_leaf, max_depth, state):
    """Grow one tree over ``samples`` (row indices, duplicates allowed).

    Returns node arrays (feature, threshold, left, right, value, cover, n_nodes)
    and the advanced RNG state.
    """
    m = samples.shape[0]
    d = X.shape[1]
    cap = 2 * m + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)
    cover = np.zeros(cap, dtype=np.int64)

    buf = np.empty(m, dtype=np.int64)
    pool = np.empty(d, dtype=np.int64)
    # explicit stack of (node, start, end, depth)
    stack = np.empty((cap, 4), dtype=np.int64)
    top = 0
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = m
    stack[0, 3] = 0
    top = 1
    n_nodes = 1

    while top > 0:
        top -= 1
        node = stack[top, 0]
        start = stack[top, 1]
        end = stack[top, 2]
        depth = stack[top, 3]
        cnt = end - start

        s = 0.0
        ymin = np.inf
        ymax = -np.inf
        for p in range(start, end):
            v = y[samples[p]]
            s += v
            if v < ymin:
                ymin = v
            if v > ymax:
                ymax = v
        mean = s / cnt if ymin < ymax else ymin
        value[node] = mean
        cover[node] = cnt
        if cnt < 2 * min_leaf or ymin == ymax or (max_depth >= 0 and depth >= max_depth):
            continue

        for j in range(d):
            pool[j] = j
        for i in range(mtry):
            state, r = _integer(state, d - i)
            r += i
            tmp = pool[i]
            pool[i] = pool[r]
            pool[r] = tmp
        cand = np.sort(pool[:mtry].copy())

        best_f = -1
        best_t = 0.0
        best_cost = np.inf
        idx = samples[start:end]
        for f in cand:
            xv = np.empty(cnt)
            for p in range(cnt):
                xv[p] = X[idx[p], f]
            order = np.argsort(xv, kind="mergesort")
            if xv[order[0]] == xv[order[cnt - 1]]:
                continue
            tot_s = 0.0
            tot_q = 0.0
            for p in range(cnt):
                v = y[idx[p]] - mean
                tot_s += v
                tot_q += v * v
            ls = 0.0
            lq = 0.0
            for p in range(cnt - 1):
                v = y[idx[order[p]]] - mean
                ls += v
                lq += v * v
                nl = p + 1
                nr = cnt - nl
                if nl < min_leaf:
                    continue
                if nr < min_leaf:
                    break
                a = xv[order[p]]
                b = xv[order[p + 1]]
                if a == b:
                    continue
                rs = tot_s - ls
                rq = tot_q - lq
                cost = (lq - ls * ls / nl) + (rq - rs * rs / nr)
                if cost < best_cost:
                    best_cost = cost
                    best_f = f
                    t = a + (b - a) / 2.0
                    if t >= b:
                        t = a
                    best_t = t
        if best_f < 0:
            continue

        # stable partition: x <= t to the left
        nl = 0
        for p in range(start, end):
            if X[samples[p], best_f] <= best_t:
                buf[nl] = samples[p]
                nl += 1
        k = nl
        for p in range(start, end):
            if X[samples[p], best_f] > best_t:
                buf[k] = samples[p]
                k += 1
        for p in range(cnt):
            samples[start + p] = buf[p]

        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        feature[node] = best_f
        threshold[node] = best_t
        left[node] = lc
        right[node] = rc
        # right pushed first so the left subtree is grown first
        stack[top, 0] = rc
        stack[top, 1] = start + nl
        stack[top, 2] = end
        stack[top, 3] = depth + 1
        top += 1
        stack[top, 0] = lc
        stack[top, 1] = start
        stack[top, 2] = start + nl
        stack[top, 3] = depth + 1
        top += 1

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), value[:n_nodes].copy(), cover[:n_nodes].copy(), state)


@njit(cache=True, nogil=True)
def _predict(feature, threshold, left, right, value, X):
    out = np.empty(X.shape[0])
    for i in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]
    return out


@njit(cache=True, nogil=True)
def _apply(feature, threshold, left, right, X):
    out = np.empty(X.shape[0], dtype=np.int64)
    for i in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out


@dataclass(frozen=True, eq=False)
class DecisionTree:
    """Array-encoded binary regression tree; ``feature == -1`` marks a leaf.

    ``cover`` counts the training samples (bootstrap duplicates included)
    reaching each node, so ``cover[node] == cover[left] + cover[right]``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    cover: np.ndarray
    n_features: int
    seed: int = None

    @property
    def n_nodes(self):
        return len(self.feature)

    @property
    def is_leaf(self):
        return self.feature < 0

    @property
    def depth(self):
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for node in range(self.n_nodes):
            if self.feature[node] >= 0:
                depth[self.left[node]] = depth[node] + 1
                depth[self.right[node]] = depth[node] + 1
        return int(depth.max())

    def _check(self, X):
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got shape {X.shape}")
        return X

    def predict(self, X):
        return _predict(self.feature, self.threshold, self.left, self.right, self.value, self._check(X))

    def apply(self, X):
        """Leaf index reached by each row."""
        return _apply(self.feature, self.threshold, self.left, self.right, self._check(X))

    def to_dict(self):
        nodes = []
        for i in range(self.n_nodes):
            node = {"id": i, "value": float(self.value[i]), "cover": int(self.cover[i])}
            if self.feature[i] >= 0:
                node.update(feature=int(self.feature[i]), threshold=float(self.threshold[i]),
                            left=int(self.left[i]), right=int(self.right[i]))
            nodes.append(node)
        return {"seed": self.seed, "nodes": nodes}

    @classmethod
    def from_dict(cls, data, n_features):
        nodes = sorted(data["nodes"], key=lambda nd: nd["id"])
        n = len(nodes)
        if [nd["id"] for nd in nodes] != list(range(n)):
            raise ValueError("tree node ids must be 0..n-1")
        feature = np.array([nd.get("feature", LEAF) for nd in nodes], dtype=np.int64)
        return cls(
            feature=feature,
            threshold=np.array([nd.get("threshold", 0.0) for nd in nodes], dtype=float),
            left=np.array([nd.get("left", LEAF) for nd in nodes], dtype=np.int64),
            right=np.array([nd.get("right", LEAF) for nd in nodes], dtype=np.int64),
            value=np.array([nd["value"] for nd in nodes], dtype=float),
            cover=np.array([nd.get("cover", 0) for nd in nodes], dtype=np.int64),
            n_features=int(n_features),
            seed=data.get("seed"),
        )

    @classmethod
    def from_arrays(cls, feature, threshold, left, right, value, cover=None, n_features=None):
        """Hand-built trees; ``cover`` defaults to ones at leaves summed upwards."""
        feature = np.asarray(feature, dtype=np.int64)
        n_features = int(n_features if n_features is not None else feature.max() + 1)
        left = np.asarray(left, dtype=np.int64)
        right = np.asarray(right, dtype=np.int64)
        if cover is None:
            cover = np.zeros(len(feature), dtype=np.int64)

            def fill(node):
                if feature[node] < 0:
                    cover[node] = 1
                else:
                    cover[node] = fill(left[node]) + fill(right[node])
                return cover[node]

            fill(0)
        return cls(feature, np.asarray(threshold, dtype=float), left, right,
                   np.asarray(value, dtype=float), np.asarray(cover, dtype=np.int64), n_features)


def fit_tree(X, y, config, rng, sample_indices=None):
    """Grow one tree.

    ``rng`` is a :class:`SplitMix64` (or a seed). With ``config.bootstrap`` and
    no explicit ``sample_indices``, n rows are first drawn with replacement from
    ``rng``; the same stream then drives per-node feature sampling.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    n, d = X.shape if X.ndim == 2 else (0, 0)
    if n == 0 or len(y) != n:
        raise ValueError("fit_tree needs at least one sample and len(y) == len(X)")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("X and y must be finite")
    mtry = config.resolve_mtry(d)
    if not isinstance(rng, SplitMix64):
        rng = SplitMix64(rng)
    seed = int(rng.state)
    if sample_indices is None:
        sample_indices = rng.integers(n, size=n) if config.bootstrap else np.arange(n, dtype=np.int64)
    samples = np.array(sample_indices, dtype=np.int64)
    max_depth = -1 if config.max_depth is None else int(config.max_depth)
    *arrays, state = _grow(X, y, samples, mtry, int(config.min_leaf), max_depth, rng.state)
    rng.state = state
    return DecisionTree(*arrays, n_features=d, seed=seed)
