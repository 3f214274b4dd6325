"""Matrix completion for causal panel data with l1-regularized covariates.

Penalized estimation of untreated potential outcomes, cross-validated
penalty selection, permutation inference for the sharp null, and a
simulation harness.
"""

__version__ = "0.1.0"

from .dgp import DgpConfig, generate
from .effects import EffectEstimate, estimate_atet
from .estimator import (
    ConvergenceWarning,
    EmptyControlSetError,
    FitResult,
    LambdaMax,
    Mode,
    PenaltyConfig,
    fit,
    fit_post,
    kkt_violations,
    lambda_max,
    lambda_max_beta,
    lambda_max_H,
    lambda_max_L,
)
from .inference import InferenceResult, PermutationPlan, permutation_p_value, test_statistic
from .panel import ModelParams, PanelData, PanelValidationError, predict_y0, standardize, validate
from .prox import nuclear_norm, soft_threshold, svt
from .selection import CvResult, GridSpec, cross_validate, make_folds

__all__ = [
    "ConvergenceWarning", "CvResult", "DgpConfig", "EffectEstimate", "EmptyControlSetError",
    "FitResult", "GridSpec", "InferenceResult", "LambdaMax", "Mode", "ModelParams", "PanelData",
    "PanelValidationError", "PenaltyConfig", "PermutationPlan", "cross_validate", "estimate_atet",
    "fit", "fit_post", "generate", "kkt_violations", "lambda_max", "lambda_max_H",
    "lambda_max_L", "lambda_max_beta", "make_folds", "nuclear_norm", "permutation_p_value",
    "predict_y0", "soft_threshold", "standardize", "svt", "test_statistic", "validate",
]
