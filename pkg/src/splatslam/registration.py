"""Coarse point-cloud alignment: generalized ICP and point-to-plane refine.

Both solvers iterate nearest-neighbor correspondence search (with a
shrinking gating radius) and a Gauss-Newton step on the left-perturbed
se(3) tangent, guarded by step-halving line search so the per-iteration
objective never increases on the correspondence set it was built from.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloud import PointCloud, SpatialIndex
from .geometry import Pose, se3_exp


@dataclass
class RegistrationParams:
    max_corr_dist: float = 0.3
    corr_shrink: float = 0.9
    corr_floor: float = 0.05
    max_iter: int = 30
    step_tol: float = 1e-6
    min_fitness: float = 0.2
    max_halvings: int = 5


@dataclass
class RegistrationResult:
    pose: Pose
    fitness: float
    inlier_rmse: float
    iterations: int
    converged: bool
    objective_history: list = field(default_factory=list)


def _cross_columns(y):
    """Stack of -[y]x matrices, the rotational residual Jacobian block."""
    n = len(y)
    J = np.zeros((n, 3, 3))
    J[:, 0, 1] = y[:, 2]
    J[:, 0, 2] = -y[:, 1]
    J[:, 1, 0] = -y[:, 2]
    J[:, 1, 2] = y[:, 0]
    J[:, 2, 0] = y[:, 1]
    J[:, 2, 1] = -y[:, 0]
    return J


def _result(pose, fitness, rmse, iters, converged, history):
    return RegistrationResult(pose, float(fitness), float(rmse), iters,
                              converged, history)


def gicp(source: PointCloud, target: PointCloud, init: Pose,
         params: RegistrationParams = None) -> RegistrationResult:
    """Align source onto target minimizing the combined-covariance
    Mahalanobis distance over nearest-neighbor correspondences.

    Both clouds must carry per-point covariances. Returns the best pose
    found; fitness below params.min_fitness flags the result not-converged
    so the caller can fall back to relocalization.
    """
    params = params or RegistrationParams()
    if source.covariances is None or target.covariances is None:
        raise ValueError("gicp requires covariances on both clouds")
    if len(source) < 10 or len(target) < 10:
        raise ValueError("gicp needs at least 10 points per cloud")
    index = SpatialIndex(target)
    T = init
    corr_dist = params.max_corr_dist
    history = []
    fitness = 0.0
    rmse = np.inf
    converged = False
    it = 0
    for it in range(1, params.max_iter + 1):
        R = T.rotation
        ps = T.transform(source.points)
        idx, dists, found = index.nearest_batch(ps, corr_dist)
        fitness = found.mean() if len(found) else 0.0
        if fitness < params.min_fitness:
            rmse = float(np.sqrt(np.mean(dists[found] ** 2))) if found.any() else np.inf
            return _result(T, fitness, rmse, it, False, history)
        si = np.nonzero(found)[0]
        ti = idx[si]
        y = ps[si]
        r = y - target.points[ti]
        rmse = float(np.sqrt(np.mean(np.sum(r**2, axis=1))))
        # combined covariance C_p + R C_q R^T, inverted per pair
        cq_rot = np.einsum("ij,njk,lk->nil", R, source.covariances[si], R)
        W = np.linalg.inv(target.covariances[ti] + cq_rot)

        def objective(pose):
            rr = pose.transform(source.points[si]) - target.points[ti]
            return float(np.einsum("ni,nij,nj->", rr, W, rr))

        obj0 = float(np.einsum("ni,nij,nj->", r, W, r))
        Jw = _cross_columns(y)                    # (n,3,3), d r / d omega
        # normal equations: J = [Jw | I]
        WJw = np.einsum("nij,njk->nik", W, Jw)
        H = np.zeros((6, 6))
        H[:3, :3] = np.einsum("nji,njk->ik", Jw, WJw)
        H[:3, 3:] = np.einsum("nji,njk->ik", Jw, W)
        H[3:, :3] = H[:3, 3:].T
        H[3:, 3:] = W.sum(axis=0)
        b = np.zeros(6)
        b[:3] = -np.einsum("nji,nj->i", WJw, r)
        b[3:] = -np.einsum("nij,nj->i", W, r)
        try:
            step = np.linalg.solve(H + 1e-12 * np.eye(6), b)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, b, rcond=None)[0]

        alpha = 1.0
        accepted = None
        for _ in range(params.max_halvings + 1):
            cand = se3_exp(alpha * step).compose(T)
            obj1 = objective(cand)
            if obj1 <= obj0:
                accepted = (cand, obj1, alpha)
                break
            alpha *= 0.5
        if accepted is None:
            converged = True   # stuck at a local minimum of this corr set
            history.append((obj0, obj0))
            break
        T, obj1, alpha = accepted
        history.append((obj0, obj1))
        if np.linalg.norm(alpha * step) < params.step_tol:
            converged = True
            break
        corr_dist = max(corr_dist * params.corr_shrink, params.corr_floor)

    ps = T.transform(source.points)
    idx, dists, found = index.nearest_batch(ps, corr_dist)
    fitness = found.mean() if len(found) else 0.0
    rmse = float(np.sqrt(np.mean(dists[found] ** 2))) if found.any() else np.inf
    return _result(T, fitness, rmse, it, converged and fitness >= params.min_fitness,
                   history)


def point_to_plane_refine(feature_cloud: PointCloud, map_index: SpatialIndex,
                          init: Pose, params: RegistrationParams = None
                          ) -> RegistrationResult:
    """Refine a pose by minimizing point-to-plane distances to an indexed
    map with normals, starting from a coarse initialization.

    Offsets along surface normals are observable; translation tangent to a
    single plane is a known sliding degeneracy and stays at init.
    """
    params = params or RegistrationParams()
    map_cloud = map_index.cloud
    if map_cloud.normals is None:
        raise ValueError("point-to-plane needs map normals")
    if len(feature_cloud) < 10 or len(map_cloud) < 10:
        raise ValueError("point-to-plane needs at least 10 points per cloud")
    T = init
    corr_dist = params.max_corr_dist
    history = []
    fitness = 0.0
    rmse = np.inf
    converged = False
    it = 0
    for it in range(1, params.max_iter + 1):
        ps = T.transform(feature_cloud.points)
        idx, dists, found = map_index.nearest_batch(ps, corr_dist)
        fitness = found.mean() if len(found) else 0.0
        if fitness < params.min_fitness:
            rmse = float(np.sqrt(np.mean(dists[found] ** 2))) if found.any() else np.inf
            return _result(T, fitness, rmse, it, False, history)
        si = np.nonzero(found)[0]
        ti = idx[si]
        y = ps[si]
        n = map_cloud.normals[ti]
        p = map_cloud.points[ti]
        r = np.einsum("ni,ni->n", n, y - p)
        rmse = float(np.sqrt(np.mean(r**2)))

        def objective(pose):
            rr = np.einsum("ni,ni->n", n, pose.transform(feature_cloud.points[si]) - p)
            return float(rr @ rr)

        obj0 = float(r @ r)
        J = np.concatenate([np.cross(y, n), n], axis=1)    # (m, 6)
        H = J.T @ J
        b = -J.T @ r
        try:
            step = np.linalg.solve(H + 1e-12 * np.eye(6), b)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, b, rcond=None)[0]

        alpha = 1.0
        accepted = None
        for _ in range(params.max_halvings + 1):
            cand = se3_exp(alpha * step).compose(T)
            obj1 = objective(cand)
            if obj1 <= obj0:
                accepted = (cand, obj1, alpha)
                break
            alpha *= 0.5
        if accepted is None:
            converged = True
            history.append((obj0, obj0))
            break
        T, obj1, alpha = accepted
        history.append((obj0, obj1))
        if np.linalg.norm(alpha * step) < params.step_tol:
            converged = True
            break
        corr_dist = max(corr_dist * params.corr_shrink, params.corr_floor)

    ps = T.transform(feature_cloud.points)
    idx, dists, found = map_index.nearest_batch(ps, corr_dist)
    fitness = found.mean() if len(found) else 0.0
    return _result(T, fitness, rmse, it, converged and fitness >= params.min_fitness,
                   history)
