"""Spatial k-nearest-neighbour imputation of missing covariates."""

import json
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .geo import SpatialIndex, as_coords

DEFAULT_K = 20


class UnimputableFeatureError(ValueError):
    pass


@dataclass
class ImputationReport:
    k: int
    counts: dict = field(default_factory=dict)
    cells: list = field(default_factory=list)

    @property
    def n_imputed(self):
        return sum(self.counts.values())

    @property
    def n_widened(self):
        return sum(c["widened"] for c in self.cells)

    def to_dict(self):
        return {
            "k": self.k,
            "n_imputed": self.n_imputed,
            "n_widened": self.n_widened,
            "counts": self.counts,
            "cells": self.cells,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _mean(values):
    """Arithmetic mean rounded once from the exact rational value."""
    return float(sum(map(Fraction, values), Fraction(0)) / len(values))


def _mode01(values):
    ones = sum(1 for v in values if v == 1.0)
    return 1.0 if ones > len(values) - ones else 0.0


def _impute(X, coords, ids, donors_X, index, binary, k, names):
    """Fill NaNs of X from donors in ``index`` (row j of donors_X is index point j).

    A donor with the same id as the query row is never used. Values are read
    from ``donors_X`` only, so already-imputed cells never feed other cells.
    """
    X = np.array(X, dtype=float)
    n_donors = len(index)
    present = np.isfinite(donors_X)
    for j, name in enumerate(names):
        if np.isnan(X[:, j]).any() and not present[:, j].any():
            raise UnimputableFeatureError(f"uninputable feature {name!r}: missing in every unit")
    out = X.copy()
    cells = []
    counts = dict.fromkeys(names, 0)
    for i in np.flatnonzero(np.isnan(X).any(axis=1)):
        lat, lon = coords[i]
        todo = np.flatnonzero(np.isnan(X[i]))
        m = min(n_donors, k + 1)
        while True:
            order, _ = index.k_nearest_idx(lat, lon, m)
            order = order[index.ids[order] != ids[i]]
            found = {j: order[present[order, j]][:k] for j in todo}
            if all(len(v) == k for v in found.values()) or m >= n_donors:
                break
            m = min(n_donors, 2 * m)
        for j in todo:
            use = found[j]
            if len(use) == 0:
                raise UnimputableFeatureError(f"uninputable feature {names[j]!r}: no donor for unit {ids[i]!r}")
            vals = donors_X[use, j].tolist()
            if binary[j]:
                value, rule = _mode01(vals), "mode"
            else:
                value, rule = _mean(vals), "mean"
            out[i, j] = value
            counts[names[j]] += 1
            # widened: some donor lies beyond the k nearest other units
            rank_last = int(np.flatnonzero(order == use[-1])[0])
            cells.append({
                "id": str(ids[i]),
                "feature": names[j],
                "rule": rule,
                "value": value,
                "donors": [str(index.ids[d]) for d in use],
                "widened": rank_last >= k,
                "short": len(use) < k,
            })
    return out, counts, cells


def impute_knn(dataset, index=None, k=DEFAULT_K):
    """Impute every missing covariate from the k nearest other units.

    Numeric cells take the mean and binary cells the mode (ties -> 0) over the
    k nearest units that have the feature present; the search widens past the
    k nearest units when some of them lack the value. Returns
    ``(dataset, ImputationReport)``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if index is None:
        index = SpatialIndex(dataset.coords, dataset.ids)
    elif len(index) != len(dataset) or list(index.ids) != [str(i) for i in dataset.ids]:
        raise ValueError("spatial index must be built over the dataset's unit centroids, in unit order")
    X, counts, cells = _impute(dataset.X, dataset.coords, dataset.ids, dataset.X, index,
                               dataset.binary_mask, k, dataset.feature_names)
    return dataset.with_X(X), ImputationReport(k=k, counts=counts, cells=cells)


class SpatialKNNImputer(TransformerMixin, BaseEstimator):
    """Imputer whose neighbours are the geographically closest fitted rows.

    Parameters
    ----------
    k : int
        Donors per missing cell.
    binary_features : array-like of bool or int, optional
        Mask or indices of 0/1 columns, imputed by mode instead of mean.

    ``fit``/``transform`` take the centroid coordinates as a required keyword
    ``coords`` (``(n, 2)`` latitude/longitude) and optional ``ids``; a row is
    never its own donor.
    """

    def __init__(self, k=DEFAULT_K, binary_features=None):
        self.k = k
        self.binary_features = binary_features

    def _binary_mask(self, d):
        mask = np.zeros(d, dtype=bool)
        if self.binary_features is not None:
            b = np.asarray(self.binary_features)
            if b.dtype == bool:
                mask[:] = b
            else:
                mask[b.astype(int)] = True
        return mask

    def fit(self, X, y=None, *, coords, ids=None):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2:
            raise ValueError("X must be 2-D")
        coords = as_coords(coords)
        if ids is None:
            ids = [str(i) for i in range(len(X))]
        self.index_ = SpatialIndex(coords, ids)
        self.donors_ = X.copy()
        self.binary_mask_ = self._binary_mask(X.shape[1])
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X, *, coords, ids=None):
        check_is_fitted(self, "donors_")
        X = np.asarray(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        coords = as_coords(coords)
        if ids is None:
            ids = [f"__query_{i}" for i in range(len(X))]
        names = [f"x{j}" for j in range(X.shape[1])]
        out, counts, cells = _impute(X, coords, np.array(ids, dtype=object), self.donors_, self.index_,
                                     self.binary_mask_, self.k, names)
        self.report_ = ImputationReport(k=self.k, counts=counts, cells=cells)
        return out

    def fit_transform(self, X, y=None, *, coords, ids=None):
        if ids is None:
            ids = [str(i) for i in range(len(X))]
        return self.fit(X, coords=coords, ids=ids).transform(X, coords=coords, ids=ids)
