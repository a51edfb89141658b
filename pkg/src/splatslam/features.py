"""Multi-scale binary image features and descriptor matching.

Detection is a FAST-style segment test (contiguous arc of >= 9 pixels on the
radius-3 Bresenham circle brighter or darker than the center by a threshold),
followed by non-max suppression, intensity-centroid orientation, and a
256-pair rotated binary descriptor sampled from a fixed seeded pattern.

Descriptors are (32,) uint8 arrays packing 256 bits; descriptor sets are
(N, 32) arrays. Keypoint pixels are in full-resolution coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import cv2
import numpy as np
from scipy.ndimage import maximum_filter

from .cloud import PointCloud
from .geometry import CameraIntrinsics, Pose

FAST_THRESHOLD = 20.0
FAST_ARC = 9
PATCH_RADIUS = 15          # intensity-centroid orientation patch
BORDER_MARGIN = 19         # covers rotated descriptor reach and the patch
MIN_LEVEL_SIZE = 32
DESCRIPTOR_BYTES = 32
PATTERN_SEED = 0x51AB

# radius-3 Bresenham circle, clockwise from 12 o'clock: (dv, du)
_CIRCLE = np.array([
    (-3, 0), (-3, 1), (-2, 2), (-1, 3), (0, 3), (1, 3), (2, 2), (3, 1),
    (3, 0), (3, -1), (2, -2), (1, -3), (0, -3), (-1, -3), (-2, -2), (-3, -1),
], dtype=np.int64)

_POPCOUNT = np.unpackbits(np.arange(256, dtype=np.uint8)[:, None], axis=1).sum(axis=1)


def _make_pattern(seed: int) -> np.ndarray:
    """Fixed 256-pair sampling pattern, offsets in [-13, 13]."""
    rng = np.random.default_rng(seed)
    pat = np.clip(np.round(rng.normal(0.0, 13 / 2.5, size=(256, 2, 2))), -13, 13)
    # re-draw coincident pairs so every bit compares two distinct pixels
    for i in range(256):
        while np.all(pat[i, 0] == pat[i, 1]):
            pat[i, 1] = np.clip(np.round(rng.normal(0.0, 13 / 2.5, 2)), -13, 13)
    return pat.astype(np.float64)  # (256, 2, 2): pair index, (a, b), (du, dv)


PATTERN = _make_pattern(PATTERN_SEED)

_disk = [(dv, du) for dv in range(-PATCH_RADIUS, PATCH_RADIUS + 1)
         for du in range(-PATCH_RADIUS, PATCH_RADIUS + 1)
         if dv * dv + du * du <= PATCH_RADIUS * PATCH_RADIUS]
_DISK = np.array(_disk, dtype=np.int64)


@dataclass(frozen=True)
class Keypoint:
    pixel: np.ndarray      # (u, v) in full-resolution coordinates
    octave: int
    orientation: float     # radians
    response: float


@dataclass
class Landmark:
    id: int
    position: np.ndarray   # world frame, meters
    descriptor: np.ndarray
    observations: int = 1


@dataclass
class FrameFeatures:
    keypoints: list
    descriptors: np.ndarray   # (N, 32) uint8

    def __len__(self):
        return len(self.keypoints)


def build_pyramid(gray: np.ndarray, levels: int = 8, scale: float = 1.2):
    """Box-filtered image pyramid; level i has dims floor(dim / scale**i).

    Levels smaller than MIN_LEVEL_SIZE on either side are truncated.
    """
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if scale <= 1:
        raise ValueError("scale must be > 1")
    gray = np.asarray(gray, dtype=np.float32)
    h0, w0 = gray.shape
    pyramid = [gray]
    for i in range(1, levels):
        h = int(h0 / scale**i)
        w = int(w0 / scale**i)
        if h < MIN_LEVEL_SIZE or w < MIN_LEVEL_SIZE:
            break
        prev = cv2.blur(pyramid[-1], (3, 3))
        pyramid.append(cv2.resize(prev, (w, h), interpolation=cv2.INTER_LINEAR))
    return pyramid


def _fast_response(img: np.ndarray, threshold: float):
    """Segment-test corner mask and SAD-style response for one level."""
    h, w = img.shape
    padded = np.pad(img, 3, mode="edge")
    circle = np.empty((16, h, w), dtype=np.float32)
    for k, (dv, du) in enumerate(_CIRCLE):
        circle[k] = padded[3 + dv:3 + dv + h, 3 + du:3 + du + w]
    center = img[None]
    bright = circle > center + threshold
    dark = circle < center - threshold

    def has_arc(mask):
        doubled = np.concatenate([mask, mask[:FAST_ARC - 1]], axis=0)
        cs = np.cumsum(doubled, axis=0, dtype=np.int16)
        cs = np.concatenate([np.zeros((1, h, w), dtype=np.int16), cs], axis=0)
        win = cs[FAST_ARC:FAST_ARC + 16] - cs[0:16]
        return (win == FAST_ARC).any(axis=0)

    corner = has_arc(bright) | has_arc(dark)
    excess_b = np.maximum(circle - center - threshold, 0).sum(axis=0)
    excess_d = np.maximum(center - circle - threshold, 0).sum(axis=0)
    response = np.where(corner, np.maximum(excess_b, excess_d), 0.0)
    return corner, response


def _orientations(img: np.ndarray, vs: np.ndarray, us: np.ndarray):
    """Intensity-centroid angle for keypoints at integer (v, u)."""
    sample = img[vs[:, None] + _DISK[:, 0], us[:, None] + _DISK[:, 1]]
    m01 = (sample * _DISK[:, 0]).sum(axis=1)
    m10 = (sample * _DISK[:, 1]).sum(axis=1)
    return np.arctan2(m01, m10)


def _describe(img: np.ndarray, vs, us, angles):
    """Rotated 256-pair binary descriptors; img should be pre-smoothed."""
    cos, sin = np.cos(angles), np.sin(angles)
    # pattern offsets are (du, dv); rotate by each keypoint angle
    flat = PATTERN.reshape(-1, 2)                       # (512, 2)
    du = flat[:, 0][None] * cos[:, None] - flat[:, 1][None] * sin[:, None]
    dv = flat[:, 0][None] * sin[:, None] + flat[:, 1][None] * cos[:, None]
    su = np.round(us[:, None] + du).astype(np.int64)
    sv = np.round(vs[:, None] + dv).astype(np.int64)
    vals = img[sv, su].reshape(len(vs), 256, 2)
    bits = (vals[:, :, 0] < vals[:, :, 1]).astype(np.uint8)
    return np.packbits(bits, axis=1)


def detect_and_describe(pyramid, target: int = 1000,
                        threshold: float = FAST_THRESHOLD,
                        scale: float = 1.2,
                        grid=(8, 6)) -> FrameFeatures:
    """Detect corners across the pyramid and compute descriptors.

    At most `target` keypoints are kept, spread spatially by greedy grid
    bucketing (per-cell cap 2*target/cells) in response order. Output is
    deterministically ordered by (octave, response desc, pixel).
    """
    h0, w0 = pyramid[0].shape
    cand = []   # (response, octave, v0, u0, v, u, angle) per level candidate
    per_level = []
    for octave, img in enumerate(pyramid):
        corner, response = _fast_response(img, threshold)
        nms = (response > 0) & (response == maximum_filter(response, size=3))
        nms[:BORDER_MARGIN] = nms[-BORDER_MARGIN:] = False
        nms[:, :BORDER_MARGIN] = nms[:, -BORDER_MARGIN:] = False
        vs, us = np.nonzero(nms & corner)
        if len(vs) == 0:
            per_level.append((img, np.empty(0), np.empty(0), np.empty(0)))
            continue
        angles = _orientations(img, vs, us)
        per_level.append((img, vs, us, angles))
        s = scale**octave
        for i in range(len(vs)):
            cand.append((float(response[vs[i], us[i]]), octave,
                         us[i] * s, vs[i] * s, vs[i], us[i], angles[i]))

    cand.sort(key=lambda c: (-c[0], c[1], c[3], c[2]))
    cols, rows = grid
    cap = max(1, (2 * target) // (cols * rows))
    counts = np.zeros((rows, cols), dtype=np.int64)
    chosen = {lvl: [] for lvl in range(len(pyramid))}
    kept = []
    for c in cand:
        if len(kept) >= target:
            break
        resp, octave, u0, v0, v, u, angle = c
        gc = min(int(u0 / w0 * cols), cols - 1)
        gr = min(int(v0 / h0 * rows), rows - 1)
        if counts[gr, gc] >= cap:
            continue
        counts[gr, gc] += 1
        chosen[octave].append((v, u, angle))
        kept.append(c)

    # descriptors per level in one batch, then reassemble in kept order
    desc_by_key = {}
    for octave, items in chosen.items():
        if not items:
            continue
        img = cv2.blur(per_level[octave][0], (5, 5))
        vs = np.array([it[0] for it in items])
        us = np.array([it[1] for it in items])
        angles = np.array([it[2] for it in items])
        descs = _describe(img, vs, us, angles)
        for (v, u, _), d in zip(items, descs):
            desc_by_key[(octave, v, u)] = d

    kept.sort(key=lambda c: (c[1], -c[0], c[3], c[2]))
    keypoints, descriptors = [], []
    for resp, octave, u0, v0, v, u, angle in kept:
        keypoints.append(Keypoint(np.array([u0, v0]), octave, float(angle), resp))
        descriptors.append(desc_by_key[(octave, v, u)])
    desc = np.stack(descriptors) if descriptors else np.empty((0, DESCRIPTOR_BYTES), np.uint8)
    return FrameFeatures(keypoints, desc)


def hamming_distances(desc_a: np.ndarray, desc_b: np.ndarray) -> np.ndarray:
    """(Na, Nb) matrix of Hamming distances between packed descriptors."""
    a = np.asarray(desc_a, dtype=np.uint8)
    b = np.asarray(desc_b, dtype=np.uint8)
    return _POPCOUNT[a[:, None, :] ^ b[None, :, :]].sum(axis=2)


def match(desc_a: np.ndarray, desc_b: np.ndarray,
          max_hamming: int = 64, ratio: float = 0.8):
    """Mutual-best (cross-checked) matches under the Hamming distance.

    A pair (i, j) is accepted iff each is the other's best match, the best
    distance is <= max_hamming, and best <= ratio * second_best on side a.
    """
    if len(desc_a) == 0 or len(desc_b) == 0:
        return []
    d = hamming_distances(desc_a, desc_b)
    best_b_for_a = np.argmin(d, axis=1)
    best_a_for_b = np.argmin(d, axis=0)
    pairs = []
    for i, j in enumerate(best_b_for_a):
        if best_a_for_b[j] != i:
            continue
        best = d[i, j]
        if best > max_hamming:
            continue
        if d.shape[1] > 1:
            row = d[i].copy()
            row[j] = np.iinfo(row.dtype).max if row.dtype.kind in "iu" else np.inf
            second = row.min()
            if best > ratio * second:
                continue
        pairs.append((i, int(j)))
    return pairs


def lift_to_landmarks(keypoints, descriptors, depth: np.ndarray,
                      K: CameraIntrinsics, pose: Pose,
                      id_start: int = 0, max_depth: float = 10.0):
    """Back-project keypoints at their measured depth into world landmarks.

    pose is camera-to-world. Keypoints over invalid depth are dropped;
    returns (landmarks, dropped_count).
    """
    landmarks = []
    dropped = 0
    next_id = id_start
    for kp, desc in zip(keypoints, descriptors):
        u, v = kp.pixel
        ui, vi = int(round(u)), int(round(v))
        if not (0 <= vi < depth.shape[0] and 0 <= ui < depth.shape[1]):
            dropped += 1
            continue
        z = float(depth[vi, ui])
        if not np.isfinite(z) or z <= 0 or z > max_depth:
            dropped += 1
            continue
        cam = np.array([(u - K.cx) / K.fx * z, (v - K.cy) / K.fy * z, z])
        landmarks.append(Landmark(next_id, pose.transform(cam), np.array(desc)))
        next_id += 1
    return landmarks, dropped


def rgb_to_gray(rgb: np.ndarray) -> np.ndarray:
    """Float [0,1] RGB to [0,255] luminance used by the detector."""
    rgb = np.asarray(rgb, dtype=np.float32)
    return (rgb[..., 0] * 0.299 + rgb[..., 1] * 0.587 + rgb[..., 2] * 0.114) * 255.0
