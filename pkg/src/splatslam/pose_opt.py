"""Robust camera pose estimation on reprojection constraints.

Contains the Levenberg-Marquardt pose solver with a Huber kernel and
optional depth priors, Schur-complement bundle adjustment, P3P+RANSAC
relocalization against a landmark database, and the cascaded tracker that
chains coarse cloud registration, point-to-plane refinement and the
reprojection solver.

Pose direction conventions are explicit in names: ``cam_from_world`` maps
world points into the camera frame (the transform the solvers optimize);
``world_from_cam`` is its inverse, stored by the SLAM loop.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .cloud import PointCloud, SpatialIndex
from .features import FrameFeatures, match
from .geometry import (
    DEFAULT_Z_NEAR,
    CameraIntrinsics,
    InsufficientData,
    Pose,
    se3_exp,
)
from .registration import RegistrationParams, gicp, point_to_plane_refine

PIXEL_SIGMA = 1.5
LEVEL_SCALE = 1.2


@dataclass(frozen=True)
class RobustKernel:
    """Huber kernel on the Mahalanobis-normalized residual."""

    delta: float = 1.0

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("huber delta must be positive")

    def cost(self, u):
        u = np.abs(u)
        return np.where(u <= self.delta,
                        0.5 * u * u,
                        self.delta * (u - 0.5 * self.delta))

    def weight(self, u):
        """IRLS weight rho'(u)/u."""
        u = np.abs(u)
        return np.where(u <= self.delta, 1.0,
                        self.delta / np.maximum(u, 1e-12))


@dataclass
class Observation:
    landmark_id: int
    pixel: np.ndarray                 # (2,) measured pixel
    depth: Optional[float] = None     # measured camera-frame depth, meters
    info: np.ndarray = None           # (2,2) SPD information matrix

    def __post_init__(self):
        self.pixel = np.asarray(self.pixel, dtype=np.float64).reshape(2)
        if self.info is None:
            self.info = np.eye(2) / PIXEL_SIGMA**2
        self.info = np.asarray(self.info, dtype=np.float64).reshape(2, 2)
        evals = np.linalg.eigvalsh(self.info)
        if evals.min() <= 0:
            raise ValueError("information matrix must be positive definite")


def observation_info(octave: int, sigma: float = PIXEL_SIGMA,
                     scale: float = LEVEL_SCALE) -> np.ndarray:
    """Isotropic information for a keypoint detected at a pyramid level."""
    s = sigma * scale**octave
    return np.eye(2) / (s * s)


def _pi_jacobian(K: CameraIntrinsics, y: np.ndarray) -> np.ndarray:
    """d(pixel)/d(camera point) at camera points y, shape (n, 2, 3)."""
    x, yy, z = y[:, 0], y[:, 1], y[:, 2]
    J = np.zeros((len(y), 2, 3))
    J[:, 0, 0] = K.fx / z
    J[:, 0, 2] = -K.fx * x / z**2
    J[:, 1, 1] = K.fy / z
    J[:, 1, 2] = -K.fy * yy / z**2
    return J


def _point_jacobian_blocks(y: np.ndarray) -> np.ndarray:
    """d(camera point)/d(left twist) = [-[y]x | I], shape (n, 3, 6)."""
    n = len(y)
    Jy = np.zeros((n, 3, 6))
    Jy[:, 0, 1] = y[:, 2]
    Jy[:, 0, 2] = -y[:, 1]
    Jy[:, 1, 0] = -y[:, 2]
    Jy[:, 1, 2] = y[:, 0]
    Jy[:, 2, 0] = y[:, 1]
    Jy[:, 2, 1] = -y[:, 0]
    Jy[:, 0, 3] = Jy[:, 1, 4] = Jy[:, 2, 5] = 1.0
    return Jy


def reprojection_residual(cam_from_world: Pose, K: CameraIntrinsics,
                          point, pixel, z_near: float = DEFAULT_Z_NEAR):
    """Residual e = pixel - project(point) and its (2,6) twist Jacobian.

    Returns (e, J, in_front). Behind-camera points yield in_front=False and
    zero residual/Jacobian so callers can exclude them.
    """
    point = np.asarray(point, dtype=np.float64).reshape(1, 3)
    pixel = np.asarray(pixel, dtype=np.float64).reshape(2)
    y = cam_from_world.transform(point)
    if y[0, 2] <= z_near:
        return np.zeros(2), np.zeros((2, 6)), False
    proj = np.array([K.fx * y[0, 0] / y[0, 2] + K.cx,
                     K.fy * y[0, 1] / y[0, 2] + K.cy])
    e = pixel - proj
    J = -(_pi_jacobian(K, y) @ _point_jacobian_blocks(y))[0]
    return e, J, True


@dataclass
class PoseOptResult:
    cam_from_world: Pose
    inliers: int
    cost: float
    iterations: int
    converged: bool
    diverged: bool = False
    excluded: int = 0
    cost_history: list = field(default_factory=list)   # accepted costs per round


# chi-square 95% gate for 2 dof on the Mahalanobis residual norm
INLIER_GATE = math.sqrt(5.991)


def _pose_cost(cam_from_world, K, points, pixels, infos, depths, kernel,
               depth_weight, depth_kernel, z_near):
    y = cam_from_world.transform(points)
    valid = y[:, 2] > z_near
    if not valid.any():
        return np.inf, valid
    yv = y[valid]
    proj = np.column_stack([K.fx * yv[:, 0] / yv[:, 2] + K.cx,
                            K.fy * yv[:, 1] / yv[:, 2] + K.cy])
    e = pixels[valid] - proj
    u = np.sqrt(np.einsum("ni,nij,nj->n", e, infos[valid], e))
    cost = kernel.cost(u).sum()
    if depth_weight > 0:
        has_d = valid & np.isfinite(depths)
        if has_d.any():
            rd = y[has_d, 2] - depths[has_d]
            cost += depth_weight * depth_kernel.cost(np.abs(rd)).sum()
    return float(cost), valid


def _mahalanobis_norms(T, K, points, pixels, infos, z_near):
    y = T.transform(points)
    valid = y[:, 2] > z_near
    u = np.full(len(points), np.inf)
    if valid.any():
        yv = y[valid]
        proj = np.column_stack([K.fx * yv[:, 0] / yv[:, 2] + K.cx,
                                K.fy * yv[:, 1] / yv[:, 2] + K.cy])
        e = pixels[valid] - proj
        u[valid] = np.sqrt(np.einsum("ni,nij,nj->n", e, infos[valid], e))
    return u, valid


def _lm_rounds(T, K, points, pixels, infos, depths, kernel, depth_weight,
               depth_kernel, max_iter, z_near):
    """One LM run on a fixed observation set. Returns
    (pose, iterations, converged, diverged, excluded, accepted_costs)."""
    lam = 1e-4
    cost0, _ = _pose_cost(T, K, points, pixels, infos, depths, kernel,
                          depth_weight, depth_kernel, z_near)
    history = [cost0]
    if not np.isfinite(cost0):
        return T, 0, False, True, 0, history
    converged = False
    it = 0
    excluded = 0
    for it in range(1, max_iter + 1):
        y = T.transform(points)
        valid = y[:, 2] > z_near
        excluded = int((~valid).sum())
        if valid.sum() < 6:
            return T, it, False, True, excluded, history
        yv = y[valid]
        proj = np.column_stack([K.fx * yv[:, 0] / yv[:, 2] + K.cx,
                                K.fy * yv[:, 1] / yv[:, 2] + K.cy])
        e = pixels[valid] - proj
        info_v = infos[valid]
        u = np.sqrt(np.einsum("ni,nij,nj->n", e, info_v, e))
        w = kernel.weight(u)
        J = -np.einsum("nij,njk->nik", _pi_jacobian(K, yv),
                       _point_jacobian_blocks(yv))
        WJ = np.einsum("n,nij,njk->nik", w, info_v, J)
        H = np.einsum("nji,njk->ik", J, WJ)
        b = -np.einsum("nji,nj->i", WJ, e)
        if depth_weight > 0:
            has_d = valid & np.isfinite(depths)
            if has_d.any():
                yd = y[has_d]
                rd = yd[:, 2] - depths[has_d]
                wd = depth_weight * depth_kernel.weight(np.abs(rd))
                Jd = _point_jacobian_blocks(yd)[:, 2, :]   # (m, 6) depth row
                H += np.einsum("n,ni,nj->ij", wd, Jd, Jd)
                b += -np.einsum("n,ni,n->i", wd, Jd, rd)

        accepted = False
        for _ in range(30):
            damped = H + lam * (np.diag(np.diag(H)) + 1e-9 * np.eye(6))
            try:
                step = np.linalg.solve(damped, b)
            except np.linalg.LinAlgError:
                step = np.linalg.lstsq(damped, b, rcond=None)[0]
            cand = se3_exp(step).compose(T)
            cost1, _ = _pose_cost(cand, K, points, pixels, infos, depths,
                                  kernel, depth_weight, depth_kernel, z_near)
            if np.isfinite(cost1) and cost1 <= cost0:
                T = cand
                decrease = cost0 - cost1
                cost0 = cost1
                history.append(cost1)
                lam = max(lam * 0.5, 1e-12)
                accepted = True
                if np.linalg.norm(step) < 1e-8 or decrease < 1e-10:
                    converged = True
                break
            lam *= 10.0
            if lam > 1e12:
                break
        if not accepted:
            converged = True   # no improving step exists at this damping scale
            break
        if converged:
            break
    return T, it, converged, False, excluded, history


def optimize_pose(init_cam_from_world: Pose, observations,
                  landmark_positions, K: CameraIntrinsics,
                  kernel: RobustKernel = RobustKernel(1.0),
                  depth_weight: float = 0.5,
                  depth_kernel: RobustKernel = RobustKernel(0.1),
                  max_iter: int = 20,
                  trim_rounds: int = 2,
                  z_near: float = DEFAULT_Z_NEAR) -> PoseOptResult:
    """Levenberg-Marquardt on robust reprojection (+ optional depth) terms.

    landmark_positions maps observation landmark ids to world points (any
    dict-like or array indexable by id). Damping starts at 1e-4, grows x10
    on rejected steps and shrinks x0.5 on accepted ones; the robust cost is
    non-increasing over accepted steps within a round.

    After each LM round, observations outside the chi-square 95% gate are
    trimmed and the solver re-runs on the surviving set (up to trim_rounds
    times); the Huber kernel bounds but does not remove the pull of gross
    outliers, so re-estimating the inlier set is what restores accuracy.
    Reported cost and inliers are evaluated on the full observation set.
    """
    if len(observations) < 6:
        raise InsufficientData(f"{len(observations)} observations (need >= 6)")
    points = np.stack([np.asarray(landmark_positions[o.landmark_id], dtype=np.float64)
                       for o in observations])
    pixels = np.stack([o.pixel for o in observations])
    infos = np.stack([o.info for o in observations])
    depths = np.array([o.depth if o.depth is not None else np.nan
                       for o in observations])

    T = init_cam_from_world
    active = np.arange(len(observations))
    total_iters = 0
    converged = False
    history = []
    for _ in range(trim_rounds + 1):
        T_new, it, converged, diverged, excluded, hist = _lm_rounds(
            T, K, points[active], pixels[active], infos[active],
            depths[active], kernel, depth_weight, depth_kernel, max_iter,
            z_near)
        total_iters += it
        history.append(hist)
        if diverged:
            full_cost, _ = _pose_cost(init_cam_from_world, K, points, pixels,
                                      infos, depths, kernel, depth_weight,
                                      depth_kernel, z_near)
            return PoseOptResult(init_cam_from_world, 0, full_cost,
                                 total_iters, False, True, excluded, history)
        T = T_new
        u, _ = _mahalanobis_norms(T, K, points, pixels, infos, z_near)
        keep = np.nonzero(u <= INLIER_GATE * kernel.delta)[0]
        if len(keep) < 6 or len(keep) == len(active):
            break
        if np.array_equal(keep, active):
            break
        active = keep

    u, valid = _mahalanobis_norms(T, K, points, pixels, infos, z_near)
    inliers = int((u <= INLIER_GATE * kernel.delta).sum())
    full_cost, _ = _pose_cost(T, K, points, pixels, infos, depths, kernel,
                              depth_weight, depth_kernel, z_near)
    return PoseOptResult(T, inliers, full_cost, total_iters, converged, False,
                         int((~valid).sum()), history)


@dataclass
class BAObservation:
    keyframe: int
    landmark: int
    pixel: np.ndarray
    info: np.ndarray = None

    def __post_init__(self):
        self.pixel = np.asarray(self.pixel, dtype=np.float64).reshape(2)
        if self.info is None:
            self.info = np.eye(2) / PIXEL_SIGMA**2
        self.info = np.asarray(self.info, dtype=np.float64).reshape(2, 2)


@dataclass
class BAProblem:
    """Joint pose/landmark problem; the first pose is held fixed (gauge)."""

    poses: list                      # cam_from_world per keyframe
    landmarks: np.ndarray            # (M, 3) world points
    observations: list
    fixed: Optional[list] = None     # bool per pose; default fixes pose 0

    def __post_init__(self):
        self.landmarks = np.asarray(self.landmarks, dtype=np.float64).reshape(-1, 3)
        if self.fixed is None:
            self.fixed = [i == 0 for i in range(len(self.poses))]
        if len(self.fixed) != len(self.poses):
            raise ValueError("fixed mask length mismatch")
        for obs in self.observations:
            if not (0 <= obs.keyframe < len(self.poses)):
                raise ValueError(f"observation references keyframe {obs.keyframe}")
            if not (0 <= obs.landmark < len(self.landmarks)):
                raise ValueError(f"observation references landmark {obs.landmark}")


@dataclass
class BAResult:
    poses: list
    landmarks: np.ndarray
    cost: float
    iterations: int
    converged: bool
    removed_landmarks: list = field(default_factory=list)
    cost_history: list = field(default_factory=list)


def _ba_cost(poses, landmarks, K, kf_idx, lm_idx, pixels, infos, kernel, z_near):
    cost = 0.0
    for k, pose in enumerate(poses):
        sel = kf_idx == k
        if not sel.any():
            continue
        y = pose.transform(landmarks[lm_idx[sel]])
        valid = y[:, 2] > z_near
        if not valid.any():
            continue
        yv = y[valid]
        proj = np.column_stack([K.fx * yv[:, 0] / yv[:, 2] + K.cx,
                                K.fy * yv[:, 1] / yv[:, 2] + K.cy])
        e = pixels[sel][valid] - proj
        u = np.sqrt(np.einsum("ni,nij,nj->n", e, infos[sel][valid], e))
        cost += kernel.cost(u).sum()
    return float(cost)


def bundle_adjust(problem: BAProblem, K: CameraIntrinsics,
                  kernel: RobustKernel = RobustKernel(1.0),
                  max_iter: int = 25,
                  z_near: float = DEFAULT_Z_NEAR) -> BAResult:
    """Robust LM over poses and landmarks with landmarks marginalized by a
    Schur complement; the gauge is fixed by the constant first pose.

    Landmarks without observations are excluded from optimization (their
    positions pass through unchanged) and reported in removed_landmarks.
    """
    poses = list(problem.poses)
    landmarks = problem.landmarks.copy()
    obs = problem.observations
    kf_idx = np.array([o.keyframe for o in obs], dtype=np.int64)
    lm_idx = np.array([o.landmark for o in obs], dtype=np.int64)
    pixels = np.stack([o.pixel for o in obs])
    infos = np.stack([o.info for o in obs])

    observed = np.zeros(len(landmarks), dtype=bool)
    observed[lm_idx] = True
    removed = list(np.nonzero(~observed)[0])
    if removed:
        warnings.warn(f"bundle_adjust: removing {len(removed)} landmark(s) "
                      "with no observations")
    active_lms = np.nonzero(observed)[0]
    lm_slot = -np.ones(len(landmarks), dtype=np.int64)
    lm_slot[active_lms] = np.arange(len(active_lms))
    M = len(active_lms)
    free_poses = [k for k, fx in enumerate(problem.fixed) if not fx]
    pose_slot = {k: i for i, k in enumerate(free_poses)}
    F = len(free_poses)

    lam = 1e-4
    cost0 = _ba_cost(poses, landmarks, K, kf_idx, lm_idx, pixels, infos,
                     kernel, z_near)
    history = [cost0]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        Hpp = np.zeros((F, 6, 6))
        Hll = np.zeros((M, 3, 3))
        P = np.zeros((6 * F, 3 * M))
        bp = np.zeros(6 * F)
        bl = np.zeros(3 * M)
        for k, pose in enumerate(poses):
            sel = np.nonzero(kf_idx == k)[0]
            if len(sel) == 0:
                continue
            lms = lm_idx[sel]
            y = pose.transform(landmarks[lms])
            valid = y[:, 2] > z_near
            sel, lms, y = sel[valid], lms[valid], y[valid]
            if len(sel) == 0:
                continue
            proj = np.column_stack([K.fx * y[:, 0] / y[:, 2] + K.cx,
                                    K.fy * y[:, 1] / y[:, 2] + K.cy])
            e = pixels[sel] - proj
            info_v = infos[sel]
            u = np.sqrt(np.einsum("ni,nij,nj->n", e, info_v, e))
            w = kernel.weight(u)
            Jpi = _pi_jacobian(K, y)
            Jp = -np.einsum("nij,njk->nik", Jpi, _point_jacobian_blocks(y))
            Jl = -np.einsum("nij,jk->nik", Jpi, pose.rotation)
            Wmat = w[:, None, None] * info_v
            WJl = np.einsum("nij,njk->nik", Wmat, Jl)
            slots = lm_slot[lms]
            np.add.at(Hll, slots, np.einsum("nji,njk->nik", Jl, WJl))
            blk = -np.einsum("nji,nj->ni", WJl, e)
            np.add.at(bl.reshape(M, 3), slots, blk)
            if k in pose_slot:
                i = pose_slot[k]
                WJp = np.einsum("nij,njk->nik", Wmat, Jp)
                Hpp[i] += np.einsum("nji,njk->ik", Jp, WJp)
                bp[6 * i:6 * i + 6] += -np.einsum("nji,nj->i", WJp, e)
                cross = np.einsum("nji,njk->nik", Jp, WJl)   # (n, 6, 3)
                for n_i, s in enumerate(slots):
                    P[6 * i:6 * i + 6, 3 * s:3 * s + 3] += cross[n_i]

        accepted = False
        for _ in range(30):
            Hll_d = Hll + lam * (np.einsum("nij,ij->nij", Hll, np.eye(3))
                                 + 1e-9 * np.eye(3))
            try:
                Hll_inv = np.linalg.inv(Hll_d)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            if F > 0:
                Hpp_big = np.zeros((6 * F, 6 * F))
                for i in range(F):
                    Hi = Hpp[i]
                    Hpp_big[6 * i:6 * i + 6, 6 * i:6 * i + 6] = (
                        Hi + lam * (np.diag(np.diag(Hi)) + 1e-9 * np.eye(6)))
                P3 = P.reshape(6 * F, M, 3)
                C = np.einsum("aml,mlk->amk", P3, Hll_inv).reshape(6 * F, 3 * M)
                S = Hpp_big - C @ P.T
                rhs = bp - C @ bl
                try:
                    dp = np.linalg.solve(S, rhs)
                except np.linalg.LinAlgError:
                    dp = np.linalg.lstsq(S, rhs, rcond=None)[0]
                back = bl - P.T @ dp
            else:
                dp = np.zeros(0)
                back = bl
            dl = np.einsum("mij,mj->mi", Hll_inv, back.reshape(M, 3))

            cand_poses = list(poses)
            for k, i in pose_slot.items():
                cand_poses[k] = se3_exp(dp[6 * i:6 * i + 6]).compose(poses[k])
            cand_lms = landmarks.copy()
            cand_lms[active_lms] += dl
            cost1 = _ba_cost(cand_poses, cand_lms, K, kf_idx, lm_idx, pixels,
                             infos, kernel, z_near)
            if np.isfinite(cost1) and cost1 <= cost0:
                poses, landmarks = cand_poses, cand_lms
                decrease = cost0 - cost1
                cost0 = cost1
                history.append(cost1)
                lam = max(lam * 0.5, 1e-12)
                accepted = True
                step_norm = np.linalg.norm(np.concatenate([dp, dl.ravel()]))
                if step_norm < 1e-8 or decrease < 1e-12:
                    converged = True
                break
            lam *= 10.0
            if lam > 1e12:
                break
        if not accepted:
            converged = True
            break
        if converged:
            break
    return BAResult(poses, landmarks, cost0, it, converged, removed, history)


# Grunert P3P: quartic coefficients derived by resultant elimination of the
# law-of-cosines system (s2 = u*s1, s3 = v*s1, ratios against the b^2 row).
def solve_p3p(world_pts, bearings, z_near: float = DEFAULT_Z_NEAR):
    """Minimal absolute pose from 3 world points and unit bearing vectors.

    Returns a list of candidate cam_from_world poses (0 to 4 entries).
    """
    X1, X2, X3 = [np.asarray(p, dtype=np.float64) for p in world_pts]
    f1, f2, f3 = [np.asarray(f, dtype=np.float64) for f in bearings]
    a2 = float(np.sum((X2 - X3) ** 2))
    b2 = float(np.sum((X1 - X3) ** 2))
    c2 = float(np.sum((X1 - X2) ** 2))
    if min(a2, b2, c2) < 1e-12:
        return []
    ca = float(f2 @ f3)
    cb = float(f1 @ f3)
    cg = float(f1 @ f2)
    A = a2 / b2
    B = c2 / b2

    a4 = A**2 - 2 * A * B - 2 * A + B**2 - 4 * B * ca**2 + 2 * B + 1
    a3 = (-4 * A**2 * cb + 8 * A * B * cb + 4 * A * ca * cg + 4 * A * cb
          - 4 * B**2 * cb + 8 * B * ca**2 * cb + 4 * B * ca * cg - 4 * B * cb
          - 4 * ca * cg)
    a2c = (4 * A**2 * cb**2 + 2 * A**2 - 8 * A * B * cb**2 - 4 * A * B
           - 8 * A * ca * cb * cg - 4 * A * cg**2 + 4 * B**2 * cb**2 + 2 * B**2
           - 4 * B * ca**2 - 8 * B * ca * cb * cg + 4 * ca**2 + 4 * cg**2 - 2)
    a1 = (-4 * A**2 * cb + 8 * A * B * cb + 4 * A * ca * cg
          + 8 * A * cb * cg**2 - 4 * A * cb - 4 * B**2 * cb + 4 * B * ca * cg
          + 4 * B * cb - 4 * ca * cg)
    a0 = A**2 - 2 * A * B - 4 * A * cg**2 + 2 * A + B**2 - 2 * B + 1

    coeffs = np.array([a4, a3, a2c, a1, a0])
    if not np.all(np.isfinite(coeffs)) or abs(a4) < 1e-14:
        return []
    roots = np.roots(coeffs)
    world = np.stack([X1, X2, X3])
    solutions = []
    for root in roots:
        if abs(root.imag) > 1e-7:
            continue
        v = float(root.real)
        if v <= 0:
            continue
        denom_b = 1.0 + v * v - 2.0 * v * cb
        if denom_b <= 1e-12:
            continue
        lin = 2.0 * (cg - v * ca)
        if abs(lin) < 1e-12:
            continue
        u = (1.0 - v * v + (A - B) * denom_b) / lin
        if u <= 0:
            continue
        s1 = math.sqrt(b2 / denom_b)
        cam_pts = np.stack([s1 * f1, u * s1 * f2, v * s1 * f3])
        if np.any(cam_pts[:, 2] <= z_near):
            continue
        from .geometry import umeyama_alignment
        R, t = umeyama_alignment(world, cam_pts)
        solutions.append(Pose.from_rt(R, t))
    return solutions


@dataclass
class RelocParams:
    max_hamming: int = 64
    ratio: float = 0.8
    max_iterations: int = 500
    inlier_px: float = 3.0
    min_inlier_ratio: float = 0.3
    min_inliers: int = 20
    confidence: float = 0.99


@dataclass
class RelocResult:
    success: bool
    world_from_cam: Optional[Pose]
    inliers: int
    inlier_ratio: float
    reason: str


def _reproj_errors(cam_from_world, K, pts, pix, z_near):
    y = cam_from_world.transform(pts)
    errs = np.full(len(pts), np.inf)
    valid = y[:, 2] > z_near
    yv = y[valid]
    proj = np.column_stack([K.fx * yv[:, 0] / yv[:, 2] + K.cx,
                            K.fy * yv[:, 1] / yv[:, 2] + K.cy])
    errs[valid] = np.linalg.norm(pix[valid] - proj, axis=1)
    return errs


def relocalize(features: FrameFeatures, landmark_positions,
               landmark_descriptors, K: CameraIntrinsics,
               params: RelocParams, rng: np.random.Generator,
               kernel: RobustKernel = RobustKernel(1.0),
               z_near: float = DEFAULT_Z_NEAR) -> RelocResult:
    """Recover an absolute pose by matching descriptors against the full
    landmark database and running P3P inside an adaptive RANSAC loop.

    Succeeds only when the refined pose keeps inlier_ratio >= the threshold
    and at least min_inliers correspondences within inlier_px.
    """
    landmark_positions = np.asarray(landmark_positions, dtype=np.float64)
    pairs = match(features.descriptors, landmark_descriptors,
                  params.max_hamming, params.ratio)
    if len(pairs) < 4:
        return RelocResult(False, None, 0, 0.0, "no-candidates")
    pix = np.stack([features.keypoints[i].pixel for i, _ in pairs])
    pts = landmark_positions[[j for _, j in pairs]]
    octaves = [features.keypoints[i].octave for i, _ in pairs]
    ones = np.ones((len(pix), 1))
    rays = np.linalg.solve(K.matrix(), np.concatenate([pix, ones], axis=1).T).T
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)

    n = len(pairs)
    best_inliers = None
    best_count = 0
    cap = params.max_iterations
    needed = cap
    it = 0
    while it < min(needed, cap):
        it += 1
        sample = rng.choice(n, size=4, replace=False)
        cands = solve_p3p(pts[sample[:3]], rays[sample[:3]], z_near)
        if not cands:
            continue
        # disambiguate with the 4th sampled point
        errs4 = [_reproj_errors(c, K, pts[sample[3:4]], pix[sample[3:4]],
                                z_near)[0] for c in cands]
        cand = cands[int(np.argmin(errs4))]
        errs = _reproj_errors(cand, K, pts, pix, z_near)
        inl = errs < params.inlier_px
        count = int(inl.sum())
        if count > best_count:
            best_count = count
            best_inliers = inl
            w = count / n
            if w > 0:
                denom = math.log(max(1.0 - w**4, 1e-12))
                needed = min(cap, int(math.ceil(
                    math.log(1.0 - params.confidence) / denom))) if denom < 0 else cap
    if best_inliers is None or best_count < 4:
        return RelocResult(False, None, best_count,
                           best_count / n, "low-confidence")

    obs = [Observation(i, pix[i], None, observation_info(octaves[i]))
           for i in np.nonzero(best_inliers)[0]]
    init_cands = []
    sample_idx = np.nonzero(best_inliers)[0][:3]
    init_cands = solve_p3p(pts[sample_idx], rays[sample_idx], z_near)
    # refine from the best RANSAC pose via the robust LM solver
    ref_init = None
    best_err = np.inf
    for c in init_cands:
        e = _reproj_errors(c, K, pts[best_inliers], pix[best_inliers], z_near)
        m = float(np.median(e))
        if m < best_err:
            best_err, ref_init = m, c
    if ref_init is None:
        return RelocResult(False, None, best_count, best_count / n,
                           "low-confidence")
    try:
        refined = optimize_pose(ref_init, obs, pts, K, kernel,
                                depth_weight=0.0, z_near=z_near)
    except InsufficientData:
        return RelocResult(False, None, best_count, best_count / n,
                           "low-confidence")
    errs = _reproj_errors(refined.cam_from_world, K, pts, pix, z_near)
    count = int((errs < params.inlier_px).sum())
    ratio = count / n
    if refined.diverged or ratio < params.min_inlier_ratio or count < params.min_inliers:
        return RelocResult(False, None, count, ratio, "low-confidence")
    return RelocResult(True, refined.cam_from_world.inverse(), count, ratio, "ok")


@dataclass
class TrackingFrame:
    """Per-frame inputs the tracker consumes."""

    cloud: PointCloud                 # strided depth cloud + covariances
    features: FrameFeatures
    feature_points: np.ndarray        # (F, 3) camera-frame keypoint positions
    feature_desc: np.ndarray          # descriptors aligned with feature_points
    feature_pixels: np.ndarray        # (F, 2) pixels aligned with feature_points
    feature_octaves: np.ndarray       # (F,) pyramid level per feature
    world_from_cam: Optional[Pose] = None


@dataclass
class TrackingMap:
    landmark_positions: np.ndarray
    landmark_descriptors: np.ndarray
    surface_index: Optional[SpatialIndex]


@dataclass
class TrackConfig:
    gicp: RegistrationParams = field(default_factory=RegistrationParams)
    refine: RegistrationParams = field(
        default_factory=lambda: RegistrationParams(max_corr_dist=0.2))
    kernel: RobustKernel = field(default_factory=lambda: RobustKernel(1.0))
    depth_weight: float = 0.5
    depth_kernel: RobustKernel = field(default_factory=lambda: RobustKernel(0.1))
    lm_max_iter: int = 20
    min_stage3_inliers: int = 10
    max_hamming: int = 64
    ratio: float = 0.8
    reloc: RelocParams = field(default_factory=RelocParams)
    use_refine_stage: bool = True
    use_reprojection_stage: bool = True


@dataclass
class TrackResult:
    world_from_cam: Optional[Pose]
    stage_reached: int            # 1, 2 or 3
    inliers: int
    lost: bool = False
    relocalized: bool = False
    stage3_init_cost: float = np.nan
    stage3_final_cost: float = np.nan


def _try_relocalize(frame, tmap, K, config, rng):
    if len(tmap.landmark_positions) == 0:
        return None
    res = relocalize(frame.features, tmap.landmark_positions,
                     tmap.landmark_descriptors, K, config.reloc, rng,
                     config.kernel)
    return res if res.success else None


def progressive_track(frame: TrackingFrame, prev: TrackingFrame,
                      tmap: TrackingMap, K: CameraIntrinsics,
                      config: TrackConfig,
                      rng: np.random.Generator) -> TrackResult:
    """Cascaded pose tracking: frame-to-frame GICP, point-to-plane map
    refinement, then robust reprojection optimization, each stage starting
    from the previous stage's pose. Stage failures trigger relocalization;
    a failed relocalization surfaces a tracking-lost result.
    """
    stage = 1
    # stage 1: coarse odometry against the previous frame's cloud
    res1 = gicp(frame.cloud, prev.cloud, Pose.identity(), config.gicp)
    relocalized = False
    if res1.converged:
        world_from_cam = prev.world_from_cam.compose(res1.pose)
    else:
        reloc = _try_relocalize(frame, tmap, K, config, rng)
        if reloc is None:
            return TrackResult(None, stage, 0, lost=True)
        world_from_cam = reloc.world_from_cam
        relocalized = True

    # stage 2: feature cloud against the map surface
    if (config.use_refine_stage and tmap.surface_index is not None
            and len(tmap.surface_index) >= 10 and len(frame.feature_points) >= 10):
        stage = 2
        res2 = point_to_plane_refine(PointCloud(frame.feature_points),
                                     tmap.surface_index, world_from_cam,
                                     config.refine)
        if res2.converged:
            world_from_cam = res2.pose

    inliers = 0
    init_cost = final_cost = np.nan
    if config.use_reprojection_stage and len(tmap.landmark_positions) > 0:
        pairs = match(frame.feature_desc, tmap.landmark_descriptors,
                      config.max_hamming, config.ratio)
        if len(pairs) >= 6:
            stage = 3
            obs = [Observation(j, frame.feature_pixels[i],
                               float(frame.feature_points[i, 2]),
                               observation_info(int(frame.feature_octaves[i])))
                   for i, j in pairs]
            init_cw = world_from_cam.inverse()
            pts = tmap.landmark_positions
            pix = np.stack([o.pixel for o in obs])
            infos = np.stack([o.info for o in obs])
            depths = np.array([o.depth for o in obs])
            init_cost, _ = _pose_cost(init_cw, K,
                                      np.stack([pts[o.landmark_id] for o in obs]),
                                      pix, infos, depths, config.kernel,
                                      config.depth_weight, config.depth_kernel,
                                      DEFAULT_Z_NEAR)
            result = optimize_pose(init_cw, obs, pts, K, config.kernel,
                                   config.depth_weight, config.depth_kernel,
                                   config.lm_max_iter)
            final_cost = result.cost
            inliers = result.inliers
            if result.diverged or result.inliers < config.min_stage3_inliers:
                reloc = _try_relocalize(frame, tmap, K, config, rng)
                if reloc is None:
                    return TrackResult(None, stage, result.inliers, lost=True)
                world_from_cam = reloc.world_from_cam
                inliers = reloc.inliers
                relocalized = True
            else:
                world_from_cam = result.cam_from_world.inverse()
    return TrackResult(world_from_cam, stage, inliers, False, relocalized,
                       init_cost, final_cost)
