"""Differentiable Gaussian splat rendering."""

from .backend import HAS_NATIVE, active_backend_name, available_backends, get_backend
from .gaussians import GaussianBatch, GaussianGrads
from .loss import LossWeights, mapping_loss, scale_isotropy
from .projection import Splat2D, project_gaussian, project_gaussians
from .render import (
    ALPHA_CAP,
    RenderOutput,
    RenderState,
    render,
    render_backward,
    render_forward,
)
from .ssim import d_ssim, ssim

__all__ = [
    "ALPHA_CAP",
    "GaussianBatch",
    "GaussianGrads",
    "HAS_NATIVE",
    "LossWeights",
    "RenderOutput",
    "RenderState",
    "Splat2D",
    "active_backend_name",
    "available_backends",
    "d_ssim",
    "get_backend",
    "mapping_loss",
    "project_gaussian",
    "project_gaussians",
    "render",
    "render_backward",
    "render_forward",
    "scale_isotropy",
    "ssim",
]
