"""Differentiable splat rendering: forward image formation and the exact
reverse-mode pass through compositing and projection.

Splats are sorted front-to-back by camera depth and composited per pixel
with transmittance weights w_i = a_i * prod_{j<i}(1 - a_j), evaluated in
16x16 tiles using per-splat 3-sigma bounding boxes. The rendered depth is
the alpha-weighted mean depth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import DEFAULT_Z_NEAR, CameraIntrinsics, Pose
from . import backend as _backend
from .gaussians import GaussianBatch, GaussianGrads
from .projection import COV2D_REG, ProjectionState, project_gaussians, project_gaussians_vjp

ALPHA_CAP = 0.99
TILE_SIZE = 16
DEPTH_EPS = 1e-6


@dataclass
class RenderOutput:
    color: np.ndarray    # (H,W,3) in [0,1]
    depth: np.ndarray    # (H,W) alpha-weighted mean depth, meters
    alpha: np.ndarray    # (H,W) accumulated weight, <= 1


@dataclass
class RenderState:
    """Saved forward state consumed by render_backward."""

    gaussians: GaussianBatch
    proj: ProjectionState
    K: CameraIntrinsics
    height: int
    width: int
    order: np.ndarray          # depth sort of kept splats
    tile_splats: np.ndarray
    tile_offsets: np.ndarray
    n_tiles_x: int
    tile_size: int
    alpha_cap: float
    depth_sum: np.ndarray
    alpha_img: np.ndarray
    output: RenderOutput
    backend: str


def _tile_lists(mean2d, radius, depth, width, height, tile_size):
    """Depth-sorted per-tile splat lists over 3-sigma bounding boxes."""
    n_tiles_x = (width + tile_size - 1) // tile_size
    n_tiles_y = (height + tile_size - 1) // tile_size
    n_tiles = n_tiles_x * n_tiles_y
    v = len(mean2d)
    order = np.argsort(depth, kind="stable")
    rank = np.empty(v, dtype=np.int64)
    rank[order] = np.arange(v)
    tx0 = np.clip(np.floor((mean2d[:, 0] - radius) / tile_size), 0, n_tiles_x - 1).astype(np.int64)
    tx1 = np.clip(np.floor((mean2d[:, 0] + radius) / tile_size), 0, n_tiles_x - 1).astype(np.int64)
    ty0 = np.clip(np.floor((mean2d[:, 1] - radius) / tile_size), 0, n_tiles_y - 1).astype(np.int64)
    ty1 = np.clip(np.floor((mean2d[:, 1] + radius) / tile_size), 0, n_tiles_y - 1).astype(np.int64)
    tiles_all, ranks_all, splats_all = [], [], []
    if v:
        max_dy = int((ty1 - ty0).max()) + 1
        max_dx = int((tx1 - tx0).max()) + 1
        for dy in range(max_dy):
            for dx in range(max_dx):
                sel = np.nonzero((ty0 + dy <= ty1) & (tx0 + dx <= tx1))[0]
                if len(sel) == 0:
                    continue
                tiles_all.append((ty0[sel] + dy) * n_tiles_x + tx0[sel] + dx)
                ranks_all.append(rank[sel])
                splats_all.append(sel)
    if tiles_all:
        tiles = np.concatenate(tiles_all)
        ranks = np.concatenate(ranks_all)
        splats = np.concatenate(splats_all)
        perm = np.lexsort((ranks, tiles))
        tiles, splats = tiles[perm], splats[perm]
        counts = np.bincount(tiles, minlength=n_tiles)
    else:
        splats = np.zeros(0, dtype=np.int64)
        counts = np.zeros(n_tiles, dtype=np.int64)
    offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return order, splats.astype(np.int64), offsets, n_tiles_x


def render_forward(g: GaussianBatch, cam_from_world: Pose, K: CameraIntrinsics,
                   height: int = None, width: int = None,
                   z_near: float = DEFAULT_Z_NEAR, cov_reg: float = COV2D_REG,
                   tile_size: int = TILE_SIZE, alpha_cap: float = ALPHA_CAP,
                   backend: str = None):
    """Render and keep the state needed for the backward pass."""
    height = height if height is not None else K.height
    width = width if width is not None else K.width
    proj = project_gaussians(g, cam_from_world, K, width, height, z_near, cov_reg)
    depth = np.ascontiguousarray(proj.y[:, 2])
    order, tile_splats, tile_offsets, n_tiles_x = _tile_lists(
        proj.mean2d, proj.radius, depth, width, height, tile_size)
    kern = _backend.get_backend(backend)
    color, depth_sum, alpha_img = kern.rasterize_forward(
        proj.mean2d, proj.conic, g.alpha[proj.valid], g.color[proj.valid],
        depth, tile_splats, tile_offsets, height, width, tile_size,
        n_tiles_x, alpha_cap)
    depth_img = depth_sum / np.maximum(alpha_img, DEPTH_EPS)
    out = RenderOutput(color, depth_img, alpha_img)
    state = RenderState(g, proj, K, height, width, order, tile_splats,
                        tile_offsets, n_tiles_x, tile_size, alpha_cap,
                        depth_sum, alpha_img, out,
                        backend or _backend.active_backend_name())
    return out, state


def render(g: GaussianBatch, cam_from_world: Pose, K: CameraIntrinsics,
           height: int = None, width: int = None, **kwargs) -> RenderOutput:
    out, _ = render_forward(g, cam_from_world, K, height, width, **kwargs)
    return out


def render_backward(state: RenderState, g_color: np.ndarray,
                    g_depth: np.ndarray, g_alpha: np.ndarray) -> GaussianGrads:
    """Exact gradients of the rendered images w.r.t. every splat attribute.

    g_depth differentiates the normalized (alpha-weighted mean) depth map;
    splats culled in the forward pass receive zero gradients.
    """
    g = state.gaussians
    proj = state.proj
    if g_color.shape != state.output.color.shape:
        raise ValueError("upstream color gradient shape mismatch")
    denom = np.maximum(state.alpha_img, DEPTH_EPS)
    g_depth_sum = g_depth / denom
    g_alpha_total = np.asarray(g_alpha, dtype=np.float64).copy()
    live = state.alpha_img > DEPTH_EPS
    g_alpha_total[live] -= (g_depth[live] * state.depth_sum[live]) / denom[live] ** 2

    kern = _backend.get_backend(state.backend)
    depth = np.ascontiguousarray(proj.y[:, 2])
    d_mean2d, d_conic, d_alpha_v, d_color_v, d_depth_v = kern.rasterize_backward(
        proj.mean2d, proj.conic, g.alpha[proj.valid], g.color[proj.valid],
        depth, state.tile_splats, state.tile_offsets, state.height,
        state.width, state.tile_size, state.n_tiles_x, state.alpha_cap,
        np.ascontiguousarray(g_color, dtype=np.float64),
        np.ascontiguousarray(g_depth_sum, dtype=np.float64),
        np.ascontiguousarray(g_alpha_total, dtype=np.float64))
    d_mu_v, d_q_v, d_s_v = project_gaussians_vjp(proj, state.K, d_mean2d,
                                                 d_conic, d_depth_v)
    grads = GaussianGrads.zeros(len(g))
    grads.mu[proj.valid] = d_mu_v
    grads.q[proj.valid] = d_q_v
    grads.s[proj.valid] = d_s_v
    grads.alpha[proj.valid] = d_alpha_v
    grads.color[proj.valid] = d_color_v
    return grads
