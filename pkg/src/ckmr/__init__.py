"""Collapsible kernel machine regression and collapsible multiple index models."""

__version__ = "0.1.0"

from .data import ExposureDataset, GroupingSpec, load_dataset, load_grouping, standardize_column
from .draws import DrawLayout, PosteriorDraws
from .kernel import GppKnots, KernelParams, gpp_logdet, gpp_quadform, kernel_matrix, select_knots
from .model import HyperParameters, ModelState, adaptive_projection, log_posterior_unnorm, marginal_loglik
from .sampler import ChainConfig, run_chain
from .splines import SplineSystem, build_spline_system, evaluate_basis
from .summaries import (
    compute_pips,
    indexwise_curves,
    interaction_curve_family,
    predict_surface,
    weight_summaries,
)

__all__ = [
    "ExposureDataset",
    "GroupingSpec",
    "load_dataset",
    "load_grouping",
    "standardize_column",
    "DrawLayout",
    "PosteriorDraws",
    "GppKnots",
    "KernelParams",
    "gpp_logdet",
    "gpp_quadform",
    "kernel_matrix",
    "select_knots",
    "HyperParameters",
    "ModelState",
    "adaptive_projection",
    "log_posterior_unnorm",
    "marginal_loglik",
    "ChainConfig",
    "run_chain",
    "SplineSystem",
    "build_spline_system",
    "evaluate_basis",
    "compute_pips",
    "indexwise_curves",
    "interaction_curve_family",
    "predict_surface",
    "weight_summaries",
]
