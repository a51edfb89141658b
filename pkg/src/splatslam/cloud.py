"""Point clouds: depth back-projection, downsampling, covariances, kNN.

Clouds are immutable after construction. The spatial index wraps an exact
k-d tree; queries must agree with a linear scan.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .geometry import CameraIntrinsics

DEFAULT_MAX_DEPTH = 10.0
PLANE_EPS = 1e-3


@dataclass
class PointCloud:
    points: np.ndarray                       # (N, 3) meters
    covariances: Optional[np.ndarray] = None  # (N, 3, 3) symmetric PSD
    normals: Optional[np.ndarray] = None      # (N, 3) unit vectors
    colors: Optional[np.ndarray] = None       # (N, 3) in [0, 1]
    degenerate: Optional[np.ndarray] = None   # (N,) bool, isotropic fallback used

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        for name in ("covariances", "normals", "colors", "degenerate"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != len(self.points):
                raise ValueError(f"{name} length does not match points")

    def __len__(self):
        return len(self.points)

    def transformed(self, pose) -> "PointCloud":
        """Rigidly transformed copy; covariances rotate as R C R^T."""
        R = pose.rotation
        cov = None
        if self.covariances is not None:
            cov = np.einsum("ij,njk,lk->nil", R, self.covariances, R)
        normals = self.normals @ R.T if self.normals is not None else None
        return PointCloud(pose.transform(self.points), cov, normals,
                          self.colors, self.degenerate)


def backproject_depth(depth: np.ndarray, K: CameraIntrinsics, stride: int = 1,
                      max_depth: float = DEFAULT_MAX_DEPTH,
                      rgb: Optional[np.ndarray] = None) -> PointCloud:
    """Back-project a metric depth image into a camera-frame cloud.

    One point per valid pixel on the stride grid; depths <= 0 or beyond
    max_depth are skipped. When rgb is given, per-point colors are attached.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    depth = np.asarray(depth, dtype=np.float64)
    vs = np.arange(0, depth.shape[0], stride)
    us = np.arange(0, depth.shape[1], stride)
    uu, vv = np.meshgrid(us, vs)
    z = depth[vv, uu]
    valid = (z > 0) & (z <= max_depth) & np.isfinite(z)
    uu, vv, z = uu[valid], vv[valid], z[valid]
    x = (uu - K.cx) / K.fx * z
    y = (vv - K.cy) / K.fy * z
    colors = None
    if rgb is not None:
        colors = np.asarray(rgb, dtype=np.float64)[vv, uu]
    return PointCloud(np.stack([x, y, z], axis=1), colors=colors)


def voxel_downsample(pc: PointCloud, voxel: float) -> PointCloud:
    """Replace each occupied voxel with the centroid of its members."""
    if voxel <= 0:
        raise ValueError("voxel size must be positive")
    if len(pc) == 0:
        return PointCloud(np.zeros((0, 3)))
    keys = np.floor(pc.points / voxel).astype(np.int64)
    # unique voxel keys; inverse maps each point to its voxel slot
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True,
                                   return_counts=True)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, pc.points)
    centroids = sums / counts[:, None]
    colors = None
    if pc.colors is not None:
        csums = np.zeros((len(counts), 3))
        np.add.at(csums, inverse, pc.colors)
        colors = csums / counts[:, None]
    return PointCloud(centroids, colors=colors)


def estimate_covariances(pc: PointCloud, k: int = 20) -> PointCloud:
    """Per-point covariance and normal from the k-nearest-neighbor scatter.

    Eigenvalues are regularized to (1, 1, PLANE_EPS) in the local eigenbasis,
    the plane-to-plane shape used by generalized ICP. Neighborhoods of rank
    < 2 fall back to an isotropic covariance and are flagged.
    """
    if k < 4:
        raise ValueError("need k >= 4 neighbors")
    if len(pc) <= k:
        raise ValueError(f"cloud of {len(pc)} points is too small for k={k}")
    tree = cKDTree(pc.points)
    _, idx = tree.query(pc.points, k=k)
    neigh = pc.points[idx]                       # (N, k, 3)
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    scatter = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, evecs = np.linalg.eigh(scatter)       # ascending eigenvalues
    # rank test: the two largest eigenvalues must carry real extent
    span = np.maximum(evals[:, 2], 1e-300)
    degenerate = (evals[:, 1] / span) < 1e-6
    reg = np.empty_like(scatter)
    target = np.array([PLANE_EPS, 1.0, 1.0])     # matches ascending order
    reg = np.einsum("nij,j,nkj->nik", evecs, target, evecs)
    reg[degenerate] = np.eye(3)
    normals = evecs[:, :, 0].copy()              # smallest-eigenvalue direction
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    normals /= np.where(norms == 0, 1.0, norms)
    return PointCloud(pc.points, covariances=reg, normals=normals,
                      colors=pc.colors, degenerate=degenerate)


class SpatialIndex:
    """Exact nearest-neighbor index over a cloud snapshot.

    Read-only after construction; safe for concurrent queries.
    """

    def __init__(self, pc: PointCloud):
        self.cloud = pc
        self._tree = cKDTree(pc.points) if len(pc) else None

    def __len__(self):
        return len(self.cloud)

    def nearest(self, query, max_dist: float):
        """Index of the exact nearest point within max_dist, else None."""
        if self._tree is None:
            return None
        dist, idx = self._tree.query(np.asarray(query, dtype=np.float64),
                                     distance_upper_bound=max_dist)
        if not np.isfinite(dist):
            return None
        return int(idx)

    def nearest_batch(self, queries, max_dist: float):
        """Vectorized nearest. Returns (indices (N,), dists (N,), found mask)."""
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if self._tree is None:
            n = len(queries)
            return np.full(n, -1), np.full(n, np.inf), np.zeros(n, dtype=bool)
        dists, idx = self._tree.query(queries, distance_upper_bound=max_dist)
        found = np.isfinite(dists)
        idx = np.where(found, idx, -1)
        return idx, dists, found


def write_ply(path, pc: PointCloud):
    """ASCII PLY export with optional normals and colors."""
    props = ["property float x", "property float y", "property float z"]
    if pc.normals is not None:
        props += ["property float nx", "property float ny", "property float nz"]
    if pc.colors is not None:
        props += ["property uchar red", "property uchar green", "property uchar blue"]
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(pc)}\n")
        f.write("\n".join(props) + "\n")
        f.write("end_header\n")
        for i in range(len(pc)):
            row = list(pc.points[i])
            if pc.normals is not None:
                row += list(pc.normals[i])
            cols = ""
            if pc.colors is not None:
                rgb = np.clip(np.round(pc.colors[i] * 255), 0, 255).astype(int)
                cols = " " + " ".join(str(c) for c in rgb)
            f.write(" ".join(f"{v:.6f}" for v in row) + cols + "\n")


def read_ply(path) -> PointCloud:
    """Reads clouds produced by write_ply (ASCII, known property order)."""
    with open(path) as f:
        lines = f.read().splitlines()
    n = 0
    props = []
    for i, line in enumerate(lines):
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        elif line.startswith("property"):
            props.append(line.split()[-1])
        elif line == "end_header":
            body = lines[i + 1:i + 1 + n]
            break
    else:
        raise ValueError(f"{path}: not a PLY produced by write_ply")
    data = np.array([[float(v) for v in row.split()] for row in body])
    pts = data[:, 0:3]
    normals = colors = None
    col = 3
    if "nx" in props:
        normals = data[:, col:col + 3]
        col += 3
    if "red" in props:
        colors = data[:, col:col + 3] / 255.0
    return PointCloud(pts, normals=normals, colors=colors)
