"""The mapping objective: photometric L1 + D-SSIM + masked depth L1 plus an
isotropy regularizer on splat scales, with the full gradient chain back to
every Gaussian attribute."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .gaussians import GaussianGrads
from .render import RenderState, render_backward
from .ssim import d_ssim


@dataclass(frozen=True)
class LossWeights:
    l1: float = 0.8        # photometric L1
    dssim: float = 0.2     # structural dissimilarity
    depth: float = 0.5     # masked depth L1
    scale_reg: float = 0.01

    def __post_init__(self):
        if self.l1 < 0 or self.dssim < 0 or self.depth < 0 or self.scale_reg < 0:
            raise ValueError("loss weights must be non-negative")
        if self.l1 + self.dssim <= 0:
            raise ValueError("need a positive photometric weight")


def scale_isotropy(s: np.ndarray, with_grad: bool = False):
    """Mean coefficient of variation of per-splat scales.

    Spheres contribute zero; elongated splats are penalized. The gradient
    at exactly isotropic scales is taken as zero.
    """
    s = np.asarray(s, dtype=np.float64)
    if len(s) == 0:
        return (0.0, np.zeros_like(s)) if with_grad else 0.0
    m = s.mean(axis=1)
    sd = s.std(axis=1)
    sd[sd <= 1e-12] = 0.0     # exact zero for spheres
    cv = sd / m
    value = float(cv.mean())
    if not with_grad:
        return value
    grad = np.zeros_like(s)
    nz = sd > 1e-12
    if nz.any():
        sn, mn, sdn = s[nz], m[nz], sd[nz]
        dsd = (sn - mn[:, None]) / (3.0 * sdn[:, None])
        dm = np.full_like(sn, 1.0 / 3.0)
        grad[nz] = (dsd * mn[:, None] - sdn[:, None] * dm) / (mn**2)[:, None]
    grad /= len(s)
    return value, grad


def mapping_loss(state: RenderState, rgb_gt: np.ndarray, depth_gt: np.ndarray,
                 weights: LossWeights = LossWeights()):
    """Weighted mapping objective and its gradients w.r.t. splat attributes.

    Depth pixels with depth_gt <= 0 (or non-finite) are masked out of the
    depth term; if no pixel is valid the term contributes zero.
    Returns (loss, GaussianGrads, parts) where parts breaks the loss down.
    """
    out = state.output
    rgb_gt = np.asarray(rgb_gt, dtype=np.float64)
    depth_gt = np.asarray(depth_gt, dtype=np.float64)
    if rgb_gt.shape != out.color.shape:
        raise ValueError("ground-truth color shape mismatch")
    if depth_gt.shape != out.depth.shape:
        raise ValueError("ground-truth depth shape mismatch")

    n_px = out.color.size
    diff = out.color - rgb_gt
    l1 = float(np.abs(diff).mean())
    g_color = weights.l1 * np.sign(diff) / n_px

    dssim_val, dssim_grad = d_ssim(out.color, rgb_gt, with_grad=True)
    g_color = g_color + weights.dssim * dssim_grad

    mask = np.isfinite(depth_gt) & (depth_gt > 0)
    g_depth = np.zeros_like(out.depth)
    if mask.any():
        ddiff = out.depth[mask] - depth_gt[mask]
        depth_l1 = float(np.abs(ddiff).mean())
        g_depth[mask] = weights.depth * np.sign(ddiff) / mask.sum()
    else:
        depth_l1 = 0.0
        if weights.depth > 0:
            warnings.warn("mapping_loss: no valid ground-truth depth pixels")

    iso_val, iso_grad = scale_isotropy(state.gaussians.s, with_grad=True)

    loss = (weights.l1 * l1 + weights.dssim * dssim_val
            + weights.depth * depth_l1 + weights.scale_reg * iso_val)
    grads = render_backward(state, g_color, g_depth, np.zeros_like(out.alpha))
    grads.s += weights.scale_reg * iso_grad
    parts = {"l1": l1, "dssim": dssim_val, "depth_l1": depth_l1,
             "isotropy": iso_val}
    return loss, grads, parts
