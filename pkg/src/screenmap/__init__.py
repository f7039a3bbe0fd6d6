"""Spatial statistics and interpretable machine learning for area-level health data."""

__version__ = "0.1.0"

from .explain import (  # noqa: E402
    ForestExplainer,
    ImportanceRanking,
    ShapMatrix,
    mean_abs_shap,
    sample_background,
    shap_bruteforce,
    shap_forest,
    shap_scatter_export,
    top_features,
)
from .geo import GeoPoint, SpatialIndex, accessibility_features, build_index, haversine, haversine_miles  # noqa: E402
from .impute import ImputationReport, SpatialKNNImputer, impute_knn  # noqa: E402
from .ingest import (  # noqa: E402
    DEFAULT_SCHEMA,
    INPUT_SCHEMA,
    Dataset,
    FacilitySet,
    FeatureSpec,
    ValidationReport,
    build_response,
    filter_eligible,
    parse_facilities,
    parse_units,
    summary_stats,
)
from .models import (  # noqa: E402
    ForestConfig,
    ForestModel,
    LinearSVR,
    OLSRegressor,
    RandomForestRegressor,
    compare_models,
    fit_forest,
    fit_ols,
    fit_svr,
    grid_search_cv,
    kfold,
    r2,
    rmse,
    train_test_split,
)
from .spatial_stats import (  # noqa: E402
    GetisOrdGiStar,
    HotspotClass,
    JenksNaturalBreaks,
    classify_hotspots,
    gi_star,
    jenks_breaks,
    weights_distance_band,
    weights_knn,
)
from .synth import synth_generate  # noqa: E402
