"""SE(3) rigid transforms, pinhole projection and trajectory metrics.

Conventions used throughout the package:
  * quaternions are stored (w, x, y, z) and kept unit-norm,
  * twists are 6-vectors ordered (rotation[rad], translation[m]),
  * a Pose maps points from its source frame into its target frame via
    ``R @ x + t``; camera poses stored in trajectories are camera-to-world.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SMALL_ANGLE = 1e-8
DEFAULT_Z_NEAR = 0.01
ATE_ASSOC_WINDOW = 0.02


class InsufficientData(ValueError):
    """Raised when an estimator has too few inputs to produce a result."""


def _skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0 or not np.isfinite(n):
        raise ValueError("cannot normalize zero or non-finite quaternion")
    q = q / n
    # canonical sign: w >= 0 keeps log() on the principal branch
    if q[0] < 0.0:
        q = -q
    return q


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R):
    """Rotation matrix to unit quaternion via the largest-pivot branch."""
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax([R[0, 0], R[1, 1], R[2, 2]]))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = math.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0)) * 2.0
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    return quat_normalize(q)


@dataclass(frozen=True)
class Pose:
    """Rigid transform: unit quaternion (w,x,y,z) plus translation in meters.

    Instances are value objects; the stored arrays must not be mutated.
    """

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = quat_normalize(self.q)
        t = np.asarray(self.t, dtype=np.float64).reshape(3).copy()
        if not np.all(np.isfinite(t)):
            raise ValueError("non-finite translation")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @staticmethod
    def from_matrix(T) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return Pose(matrix_to_quat(T[:3, :3]), T[:3, 3])

    @staticmethod
    def from_rt(R, t) -> "Pose":
        return Pose(matrix_to_quat(R), t)

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.t
        return T

    def compose(self, other: "Pose") -> "Pose":
        # (self * other)(x) = self(other(x)); re-normalized in __post_init__
        q = quat_multiply(self.q, other.q)
        t = self.rotation @ other.t + self.t
        return Pose(q, t)

    def __mul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        qinv = np.array([self.q[0], -self.q[1], -self.q[2], -self.q[3]])
        R_inv = quat_to_matrix(qinv)
        return Pose(qinv, -(R_inv @ self.t))

    def transform(self, points):
        """Apply to one 3-vector or an (N,3) array of points."""
        points = np.asarray(points, dtype=np.float64)
        if points.ndim == 1:
            return self.rotation @ points + self.t
        return points @ self.rotation.T + self.t

    def rotate(self, vectors):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim == 1:
            return self.rotation @ vectors
        return vectors @ self.rotation.T


def se3_exp(xi) -> Pose:
    """Exponential map se(3) -> SE(3); xi = (omega, rho)."""
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    if not np.all(np.isfinite(xi)):
        raise ValueError("non-finite twist")
    omega, rho = xi[:3], xi[3:]
    theta = np.linalg.norm(omega)
    if theta < SMALL_ANGLE:
        # second-order series for both the quaternion and the V matrix
        q = quat_normalize(np.concatenate(([1.0 - theta * theta / 8.0], 0.5 * omega)))
        W = _skew(omega)
        V = np.eye(3) + 0.5 * W + (W @ W) / 6.0
    else:
        axis = omega / theta
        half = 0.5 * theta
        q = np.concatenate(([math.cos(half)], math.sin(half) * axis))
        W = _skew(omega)
        W2 = W @ W
        V = (np.eye(3)
             + (1.0 - math.cos(theta)) / theta**2 * W
             + (theta - math.sin(theta)) / theta**3 * W2)
    return Pose(q, V @ rho)


def se3_log(p: Pose) -> np.ndarray:
    """Logarithm map SE(3) -> se(3), principal branch (angle in [0, pi])."""
    q = p.q
    vec_norm = np.linalg.norm(q[1:])
    # quaternion form is stable for all angles including pi
    theta = 2.0 * math.atan2(vec_norm, q[0])
    if theta < SMALL_ANGLE:
        omega = 2.0 * q[1:]
        W = _skew(omega)
        V_inv = np.eye(3) - 0.5 * W + (W @ W) / 12.0
    else:
        axis = q[1:] / vec_norm
        omega = theta * axis
        W = _skew(omega)
        W2 = W @ W
        coeff = (1.0 / theta**2
                 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
                 if abs(math.sin(theta)) > 1e-12 else 1.0 / theta**2)
        V_inv = np.eye(3) - 0.5 * W + coeff * W2
    return np.concatenate([omega, V_inv @ p.t])


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 1.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def scaled(self, s: float) -> "CameraIntrinsics":
        """Intrinsics for an image resized by factor s."""
        return CameraIntrinsics(self.fx * s, self.fy * s, self.cx * s, self.cy * s,
                                max(1, int(round(self.width * s))),
                                max(1, int(round(self.height * s))),
                                self.depth_scale)


def project(K: CameraIntrinsics, pose: Pose, point, z_near: float = DEFAULT_Z_NEAR):
    """Project a world point through a world-to-camera pose.

    Returns the (u, v) pixel, or None when the camera-frame depth is at or
    below z_near (behind-camera flag; never NaN).
    """
    pc = pose.transform(np.asarray(point, dtype=np.float64))
    if pc[2] <= z_near:
        return None
    return np.array([K.fx * pc[0] / pc[2] + K.cx, K.fy * pc[1] / pc[2] + K.cy])


def project_points(K: CameraIntrinsics, pose: Pose, points, z_near: float = DEFAULT_Z_NEAR):
    """Vectorized projection. Returns (uv (N,2), z (N,), valid (N,) mask).

    uv rows for invalid points are filled with zeros.
    """
    pc = pose.transform(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    z = pc[:, 2]
    valid = z > z_near
    uv = np.zeros((len(pc), 2))
    zs = np.where(valid, z, 1.0)
    uv[:, 0] = np.where(valid, K.fx * pc[:, 0] / zs + K.cx, 0.0)
    uv[:, 1] = np.where(valid, K.fy * pc[:, 1] / zs + K.cy, 0.0)
    return uv, z, valid


@dataclass
class Trajectory:
    """Time-indexed camera-to-world poses with strictly increasing stamps."""

    timestamps: np.ndarray
    poses: list

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamp/pose length mismatch")
        if len(self.timestamps) > 1 and not np.all(np.diff(self.timestamps) > 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.poses)

    def positions(self) -> np.ndarray:
        if not self.poses:
            return np.zeros((0, 3))
        return np.stack([p.t for p in self.poses])


def umeyama_alignment(src, dst):
    """Rigid SE(3) (no scale) alignment mapping src onto dst, least squares.

    Returns (R, t) with dst ~= src @ R.T + t.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s) / len(src)
    U, _, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return R, mu_d - R @ mu_s


def associate_timestamps(ts_a, ts_b, max_dt: float = ATE_ASSOC_WINDOW):
    """Greedy nearest-timestamp association within max_dt.

    Returns index pairs (i, j), each index used at most once, chosen in order
    of increasing time difference.
    """
    ts_a = np.asarray(ts_a, dtype=np.float64)
    ts_b = np.asarray(ts_b, dtype=np.float64)
    cands = []
    for i, ta in enumerate(ts_a):
        j = int(np.argmin(np.abs(ts_b - ta))) if len(ts_b) else -1
        if j >= 0 and abs(ts_b[j] - ta) <= max_dt:
            cands.append((abs(ts_b[j] - ta), i, j))
    cands.sort()
    used_a, used_b, pairs = set(), set(), []
    for _, i, j in cands:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    pairs.sort()
    return pairs


def ate_rmse(estimated: Trajectory, ground_truth: Trajectory,
             max_dt: float = ATE_ASSOC_WINDOW) -> float:
    """Absolute trajectory error after rigid Umeyama alignment, in meters."""
    pairs = associate_timestamps(estimated.timestamps, ground_truth.timestamps, max_dt)
    if len(pairs) < 3:
        raise InsufficientData(f"only {len(pairs)} associated pose pairs (need >= 3)")
    est = np.stack([estimated.poses[i].t for i, _ in pairs])
    gt = np.stack([ground_truth.poses[j].t for _, j in pairs])
    R, t = umeyama_alignment(est, gt)
    residual = est @ R.T + t - gt
    return float(np.sqrt(np.mean(np.sum(residual**2, axis=1))))


def write_tum_trajectory(path, traj: Trajectory):
    """TUM format: 'timestamp tx ty tz qx qy qz qw' per line."""
    with open(path, "w") as f:
        f.write("# timestamp tx ty tz qx qy qz qw\n")
        for ts, pose in zip(traj.timestamps, traj.poses):
            w, x, y, z = pose.q
            tx, ty, tz = pose.t
            f.write(f"{ts:.6f} {tx:.9f} {ty:.9f} {tz:.9f} "
                    f"{x:.9f} {y:.9f} {z:.9f} {w:.9f}\n")


def read_tum_trajectory(path) -> Trajectory:
    times, poses = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ValueError(f"{path}: line {lineno}: expected 8 fields, got {len(parts)}")
            try:
                vals = [float(x) for x in parts]
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
            ts, tx, ty, tz, qx, qy, qz, qw = vals
            times.append(ts)
            poses.append(Pose(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz])))
    return Trajectory(np.array(times), poses)
