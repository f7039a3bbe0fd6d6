"""Ordinary least squares via QR."""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted


class SingularDesignError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LinearModel:
    intercept: float
    coef: np.ndarray

    def predict(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != len(self.coef):
            raise ValueError(f"expected {len(self.coef)} features, got shape {X.shape}")
        return self.intercept + X @ self.coef

    def to_dict(self):
        return {"intercept": self.intercept, "coef": self.coef.tolist()}


def fit_ols(X, y, rcond=1e-10):
    """Least squares with intercept, solved by Householder QR of the column-scaled design.

    Raises :class:`SingularDesignError` when the design is rank deficient.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    n, d = X.shape
    if n <= d:
        raise SingularDesignError(f"need more rows than features (n={n}, d={d})")
    A = np.column_stack((np.ones(n), X))
    scale = np.linalg.norm(A, axis=0)
    if np.any(scale == 0):
        raise SingularDesignError("singular design: all-zero column")
    Q, R = np.linalg.qr(A / scale)
    diag = np.abs(np.diag(R))
    if diag.min() <= rcond * diag.max():
        raise SingularDesignError("singular design: columns are linearly dependent")
    beta = solve_triangular(R, Q.T @ y) / scale
    return LinearModel(float(beta[0]), beta[1:])


def predict_linear(model, X):
    return model.predict(X)


class OLSRegressor(RegressorMixin, BaseEstimator):
    def fit(self, X, y):
        self.model_ = fit_ols(X, y)
        self.intercept_ = self.model_.intercept
        self.coef_ = self.model_.coef
        self.n_features_in_ = len(self.coef_)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict(X)
