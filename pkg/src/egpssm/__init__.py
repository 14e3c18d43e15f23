"""Efficient GP state-space models: one shared sparse GP warped by per-dimension flows."""
from .data import Sequence, Standardizer, gen_kink, load_csv, save_csv, split_standardize
from .flows import FlowBank, FlowKind, FlowStack, SalLayerParams, etgp_cross_cov, flow_forward, flow_inverse, flow_logdet
from .kernels import KernelFamily, KernelParams, kernel_diag, kernel_matrix
from .models import (
    BaselineModel,
    ComplexitySpec,
    EgpssmModel,
    ElboEstimate,
    ModelSpec,
    SsmParams,
    build_model,
    count_params,
    elbo,
    emission_loglik,
    forecast,
    forecast_many,
    load_checkpoint,
    rmse,
    sample_transition,
    save_checkpoint,
)
from .numerics import (
    CholFactor,
    DiagGaussian,
    DimensionMismatch,
    NegativeVariance,
    NotPositiveDefinite,
    cholesky_jitter,
    gaussian_kl,
    gaussian_logpdf,
    reparam_sample,
)
from .sparse_gp import InducingState, conditional_moments, exact_gp_posterior, kl_inducing
from .training import ParamVector, TrainConfig, adam_step, fit, value_and_grad

__version__ = "0.1.0"
