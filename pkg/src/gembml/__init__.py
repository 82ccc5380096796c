"""Bayesian meta-learning with Gradient-EM meta-gradients.

Diagonal-Gaussian priors over small MLP weights, a variational inner loop,
backprop-free prior updates and an exact conjugate-Gaussian oracle.
"""

__version__ = "0.1.0"

from ._validation import ConfigError, NumericError
from .gaussian import DiagGaussian, PriorGrad, delta_limit_score, expected_prior_score, kl, log_pdf, sample
from .meta import (
    MetaConfig,
    MetaGradient,
    MetaParams,
    fomaml_gradient,
    gem_bml_gradient,
    gem_bml_plus_gradient,
    meta_test,
    meta_train,
    pretrain_gradient,
    reptile_gradient,
)
from .nn import ArchSpec, Dataset, MLPLikelihood, finite_diff_grad, forward, nll_and_grad
from .tasks import ConjugateTaskFamily, SplitTask, sample_conjugate_task, sample_sinusoid
from .vi import VIConfig, VIResult, elbo_estimate, vi_fit

__all__ = [
    "ArchSpec", "ConfigError", "ConjugateTaskFamily", "Dataset", "DiagGaussian", "MLPLikelihood",
    "MetaConfig", "MetaGradient", "MetaParams", "NumericError", "PriorGrad", "SplitTask", "VIConfig",
    "VIResult", "delta_limit_score", "elbo_estimate", "expected_prior_score", "finite_diff_grad",
    "fomaml_gradient", "forward", "gem_bml_gradient", "gem_bml_plus_gradient", "kl", "log_pdf",
    "meta_test", "meta_train", "nll_and_grad", "pretrain_gradient", "reptile_gradient", "sample",
    "sample_conjugate_task", "sample_sinusoid", "vi_fit",
]
