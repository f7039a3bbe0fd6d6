"""Random-forest regression on bootstrap samples with per-split feature sampling."""

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ..rng import SplitMix64, derive_seed
from .tree import DecisionTree, fit_tree

FOREST_FORMAT = "screenmap-forest"
FOREST_VERSION = 1


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 500
    mtry: int = 4
    min_leaf: int = 5
    max_depth: int = None
    seed: int = 0
    bootstrap: bool = True

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.mtry < 1:
            raise ValueError("mtry must be >= 1")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be non-negative")

    def resolve_mtry(self, d):
        if self.mtry > d:
            raise ValueError(f"mtry={self.mtry} exceeds the number of features ({d})")
        return int(self.mtry)

    def to_dict(self):
        return asdict(self)


def canonical_order(X, y, sample_ids=None):
    """Row order used before bootstrapping, so fits ignore input row order.

    Rows sort by ``sample_ids`` when given, else lexicographically by (X, y).
    """
    if sample_ids is not None:
        keys = np.asarray([str(s) for s in sample_ids])
        if len(set(keys.tolist())) != len(keys):
            raise ValueError("sample_ids must be unique")
        return np.argsort(keys, kind="stable")
    cols = [y] + [X[:, j] for j in range(X.shape[1] - 1, -1, -1)]
    return np.lexsort(cols)


def tree_seed(seed, index):
    return derive_seed(seed, index)


@dataclass(frozen=True, eq=False)
class ForestModel:
    trees: tuple
    config: ForestConfig
    n_features: int
    feature_names: tuple = None

    def tree_predictions(self, X):
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got shape {X.shape}")
        return np.stack([t.predict(X) for t in self.trees])

    def predict(self, X):
        return mean_of_trees(self.tree_predictions(X))

    def to_dict(self):
        return {
            "format": FOREST_FORMAT,
            "version": FOREST_VERSION,
            "n_features": self.n_features,
            "feature_names": list(self.feature_names) if self.feature_names else None,
            "config": self.config.to_dict(),
            "trees": [t.to_dict() for t in self.trees],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), separators=(",", ":"), sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        if data.get("format") != FOREST_FORMAT:
            raise ValueError("not a serialized forest")
        if data.get("version") != FOREST_VERSION:
            raise ValueError(f"unsupported forest format version {data.get('version')!r}")
        d = int(data["n_features"])
        trees = tuple(DecisionTree.from_dict(t, d) for t in data["trees"])
        names = data.get("feature_names")
        return cls(trees, ForestConfig(**data["config"]), d, tuple(names) if names else None)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def digest(self):
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def mean_of_trees(preds):
    """Forest output from stacked per-tree predictions (trees on axis 0).

    Averaged as an offset from the first tree so that trees which agree
    reproduce their common value exactly.
    """
    preds = np.asarray(preds, dtype=float)
    return preds[0] + np.mean(preds - preds[0], axis=0)


def fit_forest(X, y, config, sample_ids=None, n_jobs=1, feature_names=None):
    """Fit ``config.n_trees`` trees; tree t uses the stream ``derive_seed(config.seed, t)``.

    The output does not depend on ``n_jobs`` or on the input row order.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("X must be a non-empty 2-D array")
    if len(y) != len(X):
        raise ValueError("X and y differ in length")
    config.resolve_mtry(X.shape[1])
    order = canonical_order(X, y, sample_ids)
    Xc = np.ascontiguousarray(X[order])
    yc = np.ascontiguousarray(y[order])

    def grow(t):
        return fit_tree(Xc, yc, config, SplitMix64(tree_seed(config.seed, t)))

    if n_jobs == 1 or config.n_trees == 1:
        trees = [grow(t) for t in range(config.n_trees)]
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            trees = list(pool.map(grow, range(config.n_trees)))
    return ForestModel(tuple(trees), config, X.shape[1], tuple(feature_names) if feature_names is not None else None)


def predict_forest(model, X):
    return model.predict(X)


class RandomForestRegressor(RegressorMixin, BaseEstimator):
    """Random forest with a scikit-learn estimator interface.

    Parameters mirror :class:`ForestConfig`; ``n_jobs`` only changes speed.
    ``fit`` accepts optional ``sample_ids`` that fix the canonical row order.
    """

    def __init__(self, n_trees=500, mtry=4, min_leaf=5, max_depth=None, seed=0, bootstrap=True, n_jobs=1):
        self.n_trees = n_trees
        self.mtry = mtry
        self.min_leaf = min_leaf
        self.max_depth = max_depth
        self.seed = seed
        self.bootstrap = bootstrap
        self.n_jobs = n_jobs

    @property
    def config(self):
        return ForestConfig(self.n_trees, self.mtry, self.min_leaf, self.max_depth, self.seed, self.bootstrap)

    @classmethod
    def from_config(cls, config, n_jobs=1):
        return cls(n_jobs=n_jobs, **config.to_dict())

    def fit(self, X, y, sample_ids=None, feature_names=None):
        self.model_ = fit_forest(X, y, self.config, sample_ids=sample_ids, n_jobs=self.n_jobs,
                                 feature_names=feature_names)
        self.n_features_in_ = self.model_.n_features
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict(X)

    @property
    def estimators_(self):
        check_is_fitted(self, "model_")
        return list(self.model_.trees)

    def with_trees(self, n_trees):
        """Forest made of the first ``n_trees`` trees (same as refitting with fewer trees)."""
        check_is_fitted(self, "model_")
        if not 1 <= n_trees <= len(self.model_.trees):
            raise ValueError("n_trees out of range")
        est = RandomForestRegressor(**{**self.get_params(), "n_trees": n_trees})
        est.model_ = replace(self.model_, trees=self.model_.trees[:n_trees], config=est.config)
        est.n_features_in_ = self.n_features_in_
        return est
