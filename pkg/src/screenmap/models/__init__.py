from .forest import ForestConfig, ForestModel, RandomForestRegressor, fit_forest, predict_forest
from .linear import LinearModel, OLSRegressor, SingularDesignError, fit_ols, predict_linear
from .metrics import r2, rmse
from .selection import (
    DEFAULT_GRID,
    ComparisonReport,
    CVTable,
    FoldAssignment,
    SplitSpec,
    compare_models,
    grid_search_cv,
    kfold,
    train_test_split,
)
from .svr import LinearSVR, SvrModel, SvrParams, fit_svr, predict_svr
from .tree import DecisionTree, fit_tree

__all__ = [
    "DEFAULT_GRID", "ComparisonReport", "CVTable", "DecisionTree", "FoldAssignment", "ForestConfig",
    "ForestModel", "LinearModel", "LinearSVR", "OLSRegressor", "RandomForestRegressor",
    "SingularDesignError", "SplitSpec", "SvrModel", "SvrParams", "compare_models", "fit_forest",
    "fit_ols", "fit_svr", "fit_tree", "grid_search_cv", "kfold", "predict_forest", "predict_linear",
    "predict_svr", "r2", "rmse", "train_test_split",
]
