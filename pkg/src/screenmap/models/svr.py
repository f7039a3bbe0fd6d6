"""Linear epsilon-insensitive support vector regression, trained in the primal.

Minimises  lambda/2 ||w||^2 + mean_i max(0, |y_i - w.x_i - b| - eps)  with
lambda = 1 / (C n), on standardised features and targets, by averaged
stochastic subgradient descent with step eta_t = eta0 / (1 + eta0 lambda t).
Sample order per epoch is a SplitMix64 permutation, so training is
deterministic given the seed.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from numba import njit
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ..rng import SplitMix64, derive_seed


@njit(cache=True, nogil=True)
def _asgd_epoch(X, y, order, w, b, wbar, bbar, t, n_avg, lam, eps, eta0, average):
    d = X.shape[1]
    for i in order:
        eta = eta0 / (1.0 + eta0 * lam * t)
        pred = b
        for j in range(d):
            pred += w[j] * X[i, j]
        r = y[i] - pred
        g = 0.0
        if r > eps:
            g = -1.0
        elif r < -eps:
            g = 1.0
        for j in range(d):
            w[j] -= eta * (lam * w[j] + g * X[i, j])
        b -= eta * g
        t += 1.0
        if average:
            n_avg += 1.0
            for j in range(d):
                wbar[j] += (w[j] - wbar[j]) / n_avg
            bbar += (b - bbar) / n_avg
    return b, bbar, t, n_avg


@dataclass(frozen=True)
class SvrParams:
    C: float = 1.0
    epsilon: float = 0.1
    epochs: int = 50
    eta0: float = 0.05
    seed: int = 0

    def to_dict(self):
        return {"C": self.C, "epsilon": self.epsilon, "epochs": self.epochs, "eta0": self.eta0, "seed": self.seed}


@dataclass(frozen=True, eq=False)
class SvrModel:
    intercept: float  # in standardised target units
    coef: np.ndarray  # per standardised feature; 0 for dropped features
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: float
    y_scale: float
    params: SvrParams

    def predict(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != len(self.coef):
            raise ValueError(f"expected {len(self.coef)} features, got shape {X.shape}")
        Z = (X - self.x_mean) / self.x_scale
        return self.y_mean + self.y_scale * (self.intercept + Z @ self.coef)

    def raw_coefficients(self):
        """(intercept, coef) on the original feature and target scales."""
        c = self.y_scale * self.coef / self.x_scale
        return self.y_mean + self.y_scale * self.intercept - float(self.x_mean @ c), c

    def to_dict(self):
        return {
            "intercept": self.intercept,
            "coef": self.coef.tolist(),
            "x_mean": self.x_mean.tolist(),
            "x_scale": self.x_scale.tolist(),
            "y_mean": self.y_mean,
            "y_scale": self.y_scale,
            "params": self.params.to_dict(),
        }


def fit_svr(X, y, params=None):
    params = params or SvrParams()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    n, d = X.shape
    if n == 0 or len(y) != n:
        raise ValueError("X and y must be non-empty and aligned")
    x_mean = X.mean(axis=0)
    x_std = X.std(axis=0)
    dead = x_std == 0
    if dead.any():
        warnings.warn(f"dropping {int(dead.sum())} zero-variance feature(s) from SVR", stacklevel=2)
    x_scale = np.where(dead, 1.0, x_std)
    Z = np.ascontiguousarray(np.where(dead, 0.0, (X - x_mean) / x_scale))
    y_mean = float(y.mean())
    y_std = float(y.std())
    y_scale = y_std if y_std > 0 else 1.0
    t_y = np.ascontiguousarray((y - y_mean) / y_scale)

    lam = 1.0 / (params.C * n)
    eps = params.epsilon / y_scale
    w = np.zeros(d)
    wbar = np.zeros(d)
    b = bbar = 0.0
    t = n_avg = 0.0
    for epoch in range(params.epochs):
        order = SplitMix64(derive_seed(params.seed, epoch)).permutation(n)
        # average from the second epoch on (the first is burn-in) unless there is only one
        average = epoch >= 1 or params.epochs == 1
        b, bbar, t, n_avg = _asgd_epoch(Z, t_y, order, w, b, wbar, bbar, t, n_avg, lam, eps, params.eta0, average)
    wbar[dead] = 0.0
    return SvrModel(float(bbar), wbar, x_mean, x_scale, y_mean, y_scale, params)


def predict_svr(model, X):
    return model.predict(X)


class LinearSVR(RegressorMixin, BaseEstimator):
    def __init__(self, C=1.0, epsilon=0.1, epochs=50, eta0=0.05, seed=0):
        self.C = C
        self.epsilon = epsilon
        self.epochs = epochs
        self.eta0 = eta0
        self.seed = seed

    def fit(self, X, y):
        self.model_ = fit_svr(X, y, SvrParams(self.C, self.epsilon, self.epochs, self.eta0, self.seed))
        self.n_features_in_ = len(self.model_.coef)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict(X)
