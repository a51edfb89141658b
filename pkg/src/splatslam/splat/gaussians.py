"""Renderable Gaussian batches in structure-of-arrays form."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class GaussianBatch:
    """N renderable 3D Gaussians.

    mu: (N,3) world positions [m]; alpha: (N,) opacity in [0,1];
    q: (N,4) unit quaternions (w,x,y,z); s: (N,3) positive scales [m];
    color: (N,3) RGB in [0,1]. anchor_ids optionally route positional
    gradients back to map anchors.
    """

    mu: np.ndarray
    alpha: np.ndarray
    q: np.ndarray
    s: np.ndarray
    color: np.ndarray
    anchor_ids: np.ndarray = None

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1, 3)
        n = len(self.mu)
        self.alpha = np.asarray(self.alpha, dtype=np.float64).reshape(n)
        self.q = np.asarray(self.q, dtype=np.float64).reshape(n, 4)
        self.s = np.asarray(self.s, dtype=np.float64).reshape(n, 3)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(n, 3)
        if self.anchor_ids is not None:
            self.anchor_ids = np.asarray(self.anchor_ids).reshape(n)

    def __len__(self):
        return len(self.mu)

    @staticmethod
    def empty() -> "GaussianBatch":
        z = np.zeros((0, 3))
        return GaussianBatch(z, np.zeros(0), np.zeros((0, 4)), z.copy(), z.copy())


@dataclass
class GaussianGrads:
    """Gradients w.r.t. every GaussianBatch attribute."""

    mu: np.ndarray
    alpha: np.ndarray
    q: np.ndarray
    s: np.ndarray
    color: np.ndarray

    @staticmethod
    def zeros(n) -> "GaussianGrads":
        return GaussianGrads(np.zeros((n, 3)), np.zeros(n), np.zeros((n, 4)),
                             np.zeros((n, 3)), np.zeros((n, 3)))


def quat_rotmats(q: np.ndarray) -> np.ndarray:
    """Batched quaternion-to-rotation (polynomial form, assumes unit q)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((len(q), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_rotmats_vjp(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Gradient of the polynomial map through quat_rotmats: (N,3,3)->(N,4)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    dq = np.empty((len(q), 4))
    # contract dR with dR/dw, dR/dx, dR/dy, dR/dz
    dq[:, 0] = 2 * (-z * dR[:, 0, 1] + y * dR[:, 0, 2]
                    + z * dR[:, 1, 0] - x * dR[:, 1, 2]
                    - y * dR[:, 2, 0] + x * dR[:, 2, 1])
    dq[:, 1] = 2 * (y * dR[:, 0, 1] + z * dR[:, 0, 2]
                    + y * dR[:, 1, 0] - 2 * x * dR[:, 1, 1] - w * dR[:, 1, 2]
                    + z * dR[:, 2, 0] + w * dR[:, 2, 1] - 2 * x * dR[:, 2, 2])
    dq[:, 2] = 2 * (-2 * y * dR[:, 0, 0] + x * dR[:, 0, 1] + w * dR[:, 0, 2]
                    + x * dR[:, 1, 0] + z * dR[:, 1, 2]
                    - w * dR[:, 2, 0] + z * dR[:, 2, 1] - 2 * y * dR[:, 2, 2])
    dq[:, 3] = 2 * (-2 * z * dR[:, 0, 0] - w * dR[:, 0, 1] + x * dR[:, 0, 2]
                    + w * dR[:, 1, 0] - 2 * z * dR[:, 1, 1] + y * dR[:, 1, 2]
                    + x * dR[:, 2, 0] + y * dR[:, 2, 1])
    return dq
