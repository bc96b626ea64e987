"""Moment-matched pseudo-data for one-round federated GLM and GLMM fitting.

Data providers export standardized sample moments once; the analyst
synthesizes unconstrained pseudo-rows matching those moments and fits
fixed-effect or random-intercept models to the pooled pseudo-data.
"""

from .errors import NumericalError, ValidationError
from .families import GAUSSIAN, SOFT_BINOMIAL, SOFT_POISSON, get_family
from .federation import PipelineConfig, export_summary, fit_frame, validate_summary
from .glm import FitResult, fit_glm
from .glmm import MixedFitResult, MixedModelSpec, fit_glmm, fit_lmm, predict
from .moments import ProviderSummary, SubgroupSummary, enumerate_multi_indices, summarize_subgroup
from .pseudogen import SolverOptions, generate_provider, generate_pseudo_data

__all__ = [
    "GAUSSIAN", "SOFT_BINOMIAL", "SOFT_POISSON", "FitResult", "MixedFitResult", "MixedModelSpec",
    "NumericalError", "PipelineConfig", "ProviderSummary", "SolverOptions", "SubgroupSummary",
    "ValidationError", "enumerate_multi_indices", "export_summary", "fit_frame", "fit_glm", "fit_glmm",
    "fit_lmm", "generate_provider", "generate_pseudo_data", "get_family", "predict", "summarize_subgroup",
    "validate_summary",
]
