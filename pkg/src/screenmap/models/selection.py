"""Train/test split, k-fold assignment, CV grid search and model comparison."""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from ..rng import SplitMix64, derive_seed
from .forest import ForestConfig, fit_forest, mean_of_trees
from .linear import fit_ols
from .metrics import r2, rmse
from .svr import SvrParams, fit_svr

DEFAULT_GRID = {"n_trees": (100, 300, 500), "mtry": (2, 4, 6, 8)}

# key paths under the master seed
_FOLD_KEY = 1
_CV_FOREST_KEY = 2


@dataclass(frozen=True, eq=False)
class SplitSpec:
    train: np.ndarray
    test: np.ndarray
    seed: int

    def to_dict(self):
        return {"seed": self.seed, "train": self.train.tolist(), "test": self.test.tolist()}


def train_test_split(n, frac=0.75, seed=0):
    """Random split of range(n); the first round(frac * n) permuted positions train."""
    if not 0 < frac < 1:
        raise ValueError("frac must lie strictly between 0 and 1")
    if n < 4:
        raise ValueError("need at least 4 units to split")
    perm = SplitMix64(seed).permutation(n)
    n_train = math.floor(frac * n + 0.5)
    return SplitSpec(np.sort(perm[:n_train]), np.sort(perm[n_train:]), seed)


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    indices: np.ndarray
    labels: np.ndarray  # fold of indices[i]
    k: int
    seed: int

    def fold(self, f):
        """(train, validation) index arrays for fold f."""
        return self.indices[self.labels != f], self.indices[self.labels == f]

    def sizes(self):
        return np.bincount(self.labels, minlength=self.k)


def kfold(indices, k=5, seed=0):
    """Shuffle, then deal positions round-robin into k folds (sizes differ by at most 1)."""
    if k < 2:
        raise ValueError("k must be >= 2")
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) < k:
        raise ValueError(f"cannot make {k} folds from {len(indices)} items")
    perm = SplitMix64(seed).permutation(len(indices))
    labels = np.empty(len(indices), dtype=np.int64)
    labels[perm] = np.arange(len(indices)) % k
    return FoldAssignment(indices, labels, k, seed)


@dataclass
class CVTable:
    rows: list
    k: int
    seed: int

    def to_dict(self):
        return {"k": self.k, "seed": self.seed, "rows": self.rows}


def _grid_cells(grid):
    if not grid or not grid.get("n_trees") or not grid.get("mtry"):
        raise ValueError("empty hyperparameter grid")
    return sorted({(int(t), int(m)) for t in grid["n_trees"] for m in grid["mtry"]})


def grid_search_cv(X, y, grid=None, k=5, seed=0, base=None, sample_ids=None, n_jobs=1):
    """Pick (n_trees, mtry) minimising mean k-fold validation RMSE.

    Ties go to fewer trees, then smaller mtry. Tree t in every forest uses
    the stream derived from (fold seed, t), so the n-tree forest is a prefix
    of the largest one and is scored from it without refitting.
    Returns ``(best ForestConfig, CVTable)``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    grid = grid or DEFAULT_GRID
    cells = _grid_cells(grid)
    base = base or ForestConfig(seed=seed)
    folds = kfold(np.arange(len(X)), k, derive_seed(seed, _FOLD_KEY))
    ids = None if sample_ids is None else np.asarray([str(s) for s in sample_ids])
    t_values = sorted({t for t, _ in cells})
    mtrys = sorted({m for _, m in cells})
    tasks = [(m, f) for m in mtrys for f in range(k)]

    def run(task):
        m, f = task
        tr, va = folds.fold(f)
        cfg = replace(base, n_trees=max(t_values), mtry=m, seed=derive_seed(seed, _CV_FOREST_KEY, f))
        model = fit_forest(X[tr], y[tr], cfg, sample_ids=None if ids is None else ids[tr])
        preds = model.tree_predictions(X[va])
        return {t: rmse(mean_of_trees(preds[:t]), y[va]) for t in t_values}

    if n_jobs == 1:
        results = [run(t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(run, tasks))
    scores = {task: res for task, res in zip(tasks, results)}
    rows = []
    for t, m in cells:
        fold_rmse = [scores[(m, f)][t] for f in range(k)]
        rows.append({"n_trees": t, "mtry": m, "fold_rmse": fold_rmse, "mean_rmse": float(np.mean(fold_rmse)),
                     "sd_rmse": float(np.std(fold_rmse, ddof=1))})
    best = min(rows, key=lambda r: (r["mean_rmse"], r["n_trees"], r["mtry"]))
    return replace(base, n_trees=best["n_trees"], mtry=best["mtry"]), CVTable(rows, k, seed)


@dataclass
class ComparisonReport:
    rows: list
    forest_config: ForestConfig
    svr_params: SvrParams
    cv_table: CVTable = None
    models: dict = field(default=None, repr=False)

    def row(self, name):
        return next(r for r in self.rows if r["model"] == name)

    def to_dict(self):
        return {
            "metrics": self.rows,
            "forest_config": self.forest_config.to_dict(),
            "svr_params": self.svr_params.to_dict(),
            "cv": None if self.cv_table is None else self.cv_table.to_dict(),
        }


def compare_models(X_train, y_train, X_test, y_test, forest_config=None, grid=None, cv_folds=5,
                   svr_params=None, seed=0, sample_ids=None, n_jobs=1):
    """Fit random forest, OLS and linear SVR on the training rows; score all on the test rows.

    With ``grid`` the forest hyperparameters come from :func:`grid_search_cv`.
    """
    forest_config = forest_config or ForestConfig(seed=seed)
    cv_table = None
    if grid is not None:
        forest_config, cv_table = grid_search_cv(X_train, y_train, grid, cv_folds, seed, forest_config,
                                                 sample_ids=sample_ids, n_jobs=n_jobs)
    svr_params = svr_params or SvrParams(seed=seed)
    forest = fit_forest(X_train, y_train, forest_config, sample_ids=sample_ids, n_jobs=n_jobs)
    ols = fit_ols(X_train, y_train)
    svr = fit_svr(X_train, y_train, svr_params)
    rows = []
    for name, model in (("random_forest", forest), ("linear_regression", ols), ("svr", svr)):
        pred = model.predict(X_test)
        rows.append({"model": name, "r2": r2(pred, y_test), "rmse": rmse(pred, y_test)})
    return ComparisonReport(rows, forest_config, svr_params, cv_table,
                            {"random_forest": forest, "linear_regression": ols, "svr": svr})
