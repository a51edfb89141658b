"""EWA-style projection of 3D Gaussians to screen-space splats.

cov2d = J W Sigma W^T J^T + reg*I with J the pinhole Jacobian at the mean
(first-order approximation) and W the world-to-camera rotation. The
backward pass propagates screen-space gradients to (mu, q, s).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..geometry import DEFAULT_Z_NEAR, CameraIntrinsics, Pose
from .gaussians import GaussianBatch, quat_rotmats, quat_rotmats_vjp

COV2D_REG = 0.3


@dataclass
class Splat2D:
    mean: np.ndarray      # (2,) pixel
    cov2d: np.ndarray     # (2,2) SPD after regularization
    depth: float
    alpha: float
    color: np.ndarray


@dataclass
class ProjectionState:
    """Everything the projection backward pass needs."""

    valid: np.ndarray          # (N,) kept mask
    y: np.ndarray              # (V,3) camera-frame means
    J: np.ndarray              # (V,2,3)
    M: np.ndarray              # (V,2,3) = J @ R_cw
    Rq: np.ndarray             # (V,3,3)
    sigma3: np.ndarray         # (V,3,3)
    cov2d: np.ndarray          # (V,2,2)
    conic: np.ndarray          # (V,3) packed (a,b,c) of cov2d^-1
    mean2d: np.ndarray         # (V,2)
    radius: np.ndarray         # (V,) 3-sigma screen radius
    R_cw: np.ndarray
    q: np.ndarray              # (V,4)
    s: np.ndarray              # (V,3)


def project_gaussians(g: GaussianBatch, cam_from_world: Pose,
                      K: CameraIntrinsics, width: int, height: int,
                      z_near: float = DEFAULT_Z_NEAR,
                      cov_reg: float = COV2D_REG) -> ProjectionState:
    """Project a batch, culling behind-camera splats and splats whose
    3-sigma extent misses the image entirely."""
    R_cw = cam_from_world.rotation
    y_all = g.mu @ R_cw.T + cam_from_world.t
    in_front = y_all[:, 2] > z_near

    idx = np.nonzero(in_front)[0]
    y = y_all[idx]
    x, yy, z = y[:, 0], y[:, 1], y[:, 2]
    mean2d = np.column_stack([K.fx * x / z + K.cx, K.fy * yy / z + K.cy])

    J = np.zeros((len(y), 2, 3))
    J[:, 0, 0] = K.fx / z
    J[:, 0, 2] = -K.fx * x / z**2
    J[:, 1, 1] = K.fy / z
    J[:, 1, 2] = -K.fy * yy / z**2
    M = np.einsum("nij,jk->nik", J, R_cw)

    Rq = quat_rotmats(g.q[idx])
    D = g.s[idx] ** 2
    sigma3 = np.einsum("nij,nj,nkj->nik", Rq, D, Rq)
    cov2d = np.einsum("nij,njk,nlk->nil", M, sigma3, M)
    cov2d[:, 0, 0] += cov_reg
    cov2d[:, 1, 1] += cov_reg

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    tr_half = 0.5 * (a + c)
    det = a * c - b * b
    lam_max = tr_half + np.sqrt(np.maximum(tr_half**2 - det, 0.0))
    radius = 3.0 * np.sqrt(np.maximum(lam_max, 0.0))
    on_screen = ((mean2d[:, 0] >= -radius) & (mean2d[:, 0] <= width - 1 + radius)
                 & (mean2d[:, 1] >= -radius) & (mean2d[:, 1] <= height - 1 + radius))

    keep = idx[on_screen]
    valid = np.zeros(len(g), dtype=bool)
    valid[keep] = True
    sub = on_screen
    y, J, M, Rq, sigma3, cov2d = (arr[sub] for arr in (y, J, M, Rq, sigma3, cov2d))
    mean2d, radius = mean2d[sub], radius[sub]
    det = det[sub]
    inv_det = 1.0 / det
    conic = np.column_stack([cov2d[:, 1, 1] * inv_det,
                             -cov2d[:, 0, 1] * inv_det,
                             cov2d[:, 0, 0] * inv_det])
    return ProjectionState(valid, y, J, M, Rq, sigma3, cov2d, conic, mean2d,
                           radius, R_cw, g.q[valid], g.s[valid])


def project_gaussians_vjp(state: ProjectionState, K: CameraIntrinsics,
                          d_mean2d: np.ndarray, d_conic: np.ndarray,
                          d_depth: np.ndarray):
    """Backward through projection for the kept splats.

    Returns (d_mu, d_q, d_s) of shape (V,3), (V,4), (V,3); caller scatters
    them into full-batch gradients via state.valid.
    """
    y = state.y
    x, yy, z = y[:, 0], y[:, 1], y[:, 2]
    # conic = inv(cov2d): dCov = -Q dQ Q with dQ the symmetric-packed grad
    Q = np.zeros((len(y), 2, 2))
    Q[:, 0, 0] = state.conic[:, 0]
    Q[:, 0, 1] = Q[:, 1, 0] = state.conic[:, 1]
    Q[:, 1, 1] = state.conic[:, 2]
    dQ = np.zeros_like(Q)
    dQ[:, 0, 0] = d_conic[:, 0]
    dQ[:, 0, 1] = dQ[:, 1, 0] = 0.5 * d_conic[:, 1]
    dQ[:, 1, 1] = d_conic[:, 2]
    dCov = -np.einsum("nij,njk,nkl->nil", Q, dQ, Q)

    # cov2d = M sigma3 M^T + reg I
    dM = 2.0 * np.einsum("nij,njk,nkl->nil", dCov, state.M, state.sigma3)
    dSigma3 = np.einsum("nji,njk,nkl->nil", state.M, dCov, state.M)
    dJ = np.einsum("nij,kj->nik", dM, state.R_cw)

    # sigma3 = Rq diag(s^2) Rq^T
    D = state.s**2
    dRq = 2.0 * np.einsum("nij,njk,nk->nik", dSigma3, state.Rq, D)
    dD = np.einsum("nji,njk,nki->ni", state.Rq, dSigma3, state.Rq)
    d_s = 2.0 * state.s * dD
    d_q = quat_rotmats_vjp(state.q, dRq)

    # camera-point gradient from J entries, pixel mean, and depth channel
    dy = np.zeros_like(y)
    fz2x = K.fx / z**2
    fz2y = K.fy / z**2
    dy[:, 0] += dJ[:, 0, 2] * (-fz2x)
    dy[:, 1] += dJ[:, 1, 2] * (-fz2y)
    dy[:, 2] += (dJ[:, 0, 0] * (-fz2x)
                 + dJ[:, 0, 2] * (2 * K.fx * x / z**3)
                 + dJ[:, 1, 1] * (-fz2y)
                 + dJ[:, 1, 2] * (2 * K.fy * yy / z**3))
    dy[:, 0] += d_mean2d[:, 0] * K.fx / z
    dy[:, 1] += d_mean2d[:, 1] * K.fy / z
    dy[:, 2] += (-d_mean2d[:, 0] * K.fx * x / z**2
                 - d_mean2d[:, 1] * K.fy * yy / z**2)
    dy[:, 2] += d_depth

    d_mu = dy @ state.R_cw
    return d_mu, d_q, d_s


def project_gaussian(g: GaussianBatch, index: int, cam_from_world: Pose,
                     K: CameraIntrinsics, width: int, height: int,
                     z_near: float = DEFAULT_Z_NEAR,
                     cov_reg: float = COV2D_REG) -> Optional[Splat2D]:
    """Single-splat projection; None when culled."""
    one = GaussianBatch(g.mu[index:index + 1], g.alpha[index:index + 1],
                        g.q[index:index + 1], g.s[index:index + 1],
                        g.color[index:index + 1])
    state = project_gaussians(one, cam_from_world, K, width, height, z_near, cov_reg)
    if not state.valid[0]:
        return None
    return Splat2D(state.mean2d[0], state.cov2d[0], float(state.y[0, 2]),
                   float(g.alpha[index]), g.color[index].copy())
