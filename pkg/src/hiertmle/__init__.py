"""Targeted maximum likelihood estimation for hierarchical data under single time-point interventions."""
from .data import (
    DataError,
    HierDataset,
    NodeRoles,
    RoleBindingError,
    WeightScheme,
    aggregate_to_community,
    build_weights,
    from_frame,
    load_csv,
    write_csv,
)
from .density import (
    BinLayout,
    BinningConfig,
    ConditionalDensityEstimator,
    FittedDensity,
    choose_bins,
    classify_variable,
    eval_density,
    fit_density,
    marginalize_individual_g,
)
from .formula import Formula, parse_formula
from .glm import GLM, GlmFit, GlmSpec
from .hierarchy import StrategyConfig, TMLECommunity, run
from .interventions import (
    InterventionSpec,
    McConfig,
    additive_shift,
    bernoulli,
    builtin_shift_truncate,
    constant,
    sample_gstar,
    table,
)
from .tmle import EstimationReport, OutcomeScale, TmleSettings

__version__ = "0.1.0"

__all__ = [
    "DataError", "HierDataset", "NodeRoles", "RoleBindingError", "WeightScheme", "aggregate_to_community",
    "build_weights", "from_frame", "load_csv", "write_csv", "BinLayout", "BinningConfig",
    "ConditionalDensityEstimator", "FittedDensity", "choose_bins", "classify_variable", "eval_density",
    "fit_density", "marginalize_individual_g", "Formula", "parse_formula", "GLM", "GlmFit", "GlmSpec",
    "StrategyConfig", "TMLECommunity", "run", "InterventionSpec", "McConfig", "additive_shift", "bernoulli",
    "builtin_shift_truncate", "constant", "sample_gstar", "table", "EstimationReport", "OutcomeScale",
    "TmleSettings",
]
