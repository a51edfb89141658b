"""Shared synthetic fixtures for registration and tracking tests."""

import math

import numpy as np

from splatslam.cloud import PointCloud, estimate_covariances
from splatslam.geometry import Pose, se3_exp


def sample_room_cloud(n=2000, seed=0, half=1.0) -> PointCloud:
    """Points on five faces of a box plus a central sphere.

    The mix of orthogonal planes and a curved patch constrains all six
    degrees of freedom for surface-based registration.
    """
    rng = np.random.default_rng(seed)
    n_face = n // 8
    pts = []
    for axis, sign in [(0, -1), (0, 1), (1, -1), (1, 1), (2, 1)]:
        p = rng.uniform(-half, half, (n_face, 3))
        p[:, axis] = sign * half
        pts.append(p)
    n_sphere = n - 5 * n_face
    dirs = rng.normal(size=(n_sphere, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pts.append(dirs * 0.3 * half + [0.2 * half, -0.1 * half, 0.0])
    return PointCloud(np.concatenate(pts))


def room_cloud_with_covariances(n=2000, seed=0, k=20) -> PointCloud:
    return estimate_covariances(sample_room_cloud(n, seed), k=k)


def random_small_transform(rng, max_angle_deg=15.0, max_trans=0.2) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = math.radians(rng.uniform(0.2 * max_angle_deg, max_angle_deg))
    t = rng.uniform(-max_trans, max_trans, 3)
    return se3_exp(np.concatenate([axis * angle, t]))


def rotation_angle_deg(R) -> float:
    c = (np.trace(R) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def pose_error(est: Pose, gt: Pose):
    """(translation error [m], rotation error [deg]) between two poses."""
    delta = est.compose(gt.inverse())
    return float(np.linalg.norm(est.t - gt.t)), rotation_angle_deg(delta.rotation)
