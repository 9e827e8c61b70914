"""Weighted mixed-model estimation and comparison of embedded DTRs in SMARTs."""
__version__ = "0.1.0"

from .design import (
    DtrIndex,
    Replicate,
    SmartDesign,
    SubjectRecord,
    augment_dataset,
    autism_design,
    consistency_indicator,
    design_weight,
    symmetric_design,
    weight_table,
)
from .errors import (
    IdentifiabilityError,
    InsufficientDataError,
    InvalidQueryError,
    NumericalError,
    PositivityError,
    SchemaError,
    SmartLMMError,
    ValidationError,
)
from .estimator import AugmentedData, FitResult, OptimizerSettings, fit, fit_subjects, profile_beta, pseudo_loglik
from .gee import WorkingCovariance, gee_fit, moment_covariance, ols_prefit
from .inference import (
    ContrastResult,
    effect_size_d,
    effect_size_from_fit,
    linear_contrast,
    omnibus_auc_test,
    pairwise_contrasts,
    wald_test,
)
from .model import (
    INTERCEPT_AND_SLOPE,
    INTERCEPT_ONLY,
    MeanModel,
    RandomEffectsSpec,
    VarianceParams,
    autism_mean_model,
    build_X,
    build_Z,
    marginal_covariance,
    symmetric_mean_model,
)
from .prediction import SubjectPrediction, predict_random_effects
from .simulator import (
    DropoutRule,
    GenerativeConfig,
    SimReport,
    apply_dropout,
    generate_potential_outcomes,
    randomize_and_observe,
    run_study,
    simulation1_config,
    simulation2_config,
    true_moments,
)
