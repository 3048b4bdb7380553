"""Isoscape origin models with Shapley-based training-data valuation and selection."""

__version__ = "0.1.0"

from .dataset import (
    Dataset,
    FeatureFieldSpec,
    FieldTerm,
    MissingPolicy,
    Sample,
    SyntheticConfig,
    apply_missing_policy,
    default_feature_specs,
    generate_synthetic,
    load_csv,
    split,
    write_csv,
)
from .errors import ConfigError, DataError, NumericalError
from .forest import ForestConfig, ForestModel, backward_location, fit_forest, forest_rmse, predict_forest
from .geo import (
    EARTH_RADIUS_KM,
    Location,
    SpatialGrid,
    build_grid,
    cluster_by_radius,
    great_circle_distance,
    pairwise_distance_km,
)
from .isoscape import (
    IsoscapeModel,
    KernelConfig,
    PosteriorGrid,
    export_posterior_csv,
    fit_gp,
    forward_rmse,
    grid_search_kernel,
    likelihood,
    log_likelihood,
    log_marginal_likelihood,
    mean_posterior_rmse,
    posterior,
    posterior_from_log_likelihood,
    posterior_rmse,
    predict_forward,
)
from .selection import (
    RankComparison,
    SelectionStep,
    SelectionTrace,
    SpeciesSummary,
    StopRule,
    StrategyComparison,
    cluster_select,
    compare_strategies,
    iterative_select,
    rank_compare,
    species_summary,
)
from .valuation import (
    BetaParams,
    UtilitySpec,
    ValuationResult,
    beta_cardinality_weights,
    beta_shapley,
    beta_shapley_values,
    exact_shapley,
    exact_shapley_values,
    loo_values,
    random_values,
    tmc_shapley,
    tmc_shapley_values,
    utility,
)
