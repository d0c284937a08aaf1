"""Geometric encoding of depth images: disparity, height above floor, and the
angle between the surface normal and gravity, each quantized to [0, 255].

Camera frame: x right, y down, z forward (so "camera down" is +y). Depth maps
store the forward z component in meters, 0 marking invalid pixels. Fixed
constants: depth clamp 0.1-20 m, height clamp 0-3 m above the 5th-percentile
reference, 5x5 plane-fit neighborhoods, 5 gravity refinement iterations,
fill value 0 for invalid pixels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

DEPTH_MIN = 0.1
DEPTH_MAX = 20.0
HEIGHT_MAX = 3.0
NORMAL_WINDOW = 5
GRAVITY_ITERS = 5
GRAVITY_CONE_DEG = 45.0
INVALID_FILL = 0


@dataclass
class DepthImage:
    """Metric depth in meters (0 = invalid) plus pinhole intrinsics in pixels."""

    depth: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.depth.ndim != 2:
            raise ValueError(f"depth must be 2-d, got shape {self.depth.shape}")
        if min(self.fx, self.fy) <= 0:
            raise ValueError("focal lengths must be positive")
        if (self.depth < 0).any():
            raise ValueError("depth values must be >= 0 (0 marks invalid)")

    @property
    def height(self):
        return self.depth.shape[0]

    @property
    def width(self):
        return self.depth.shape[1]


@dataclass
class HhaImage:
    """Quantized geometric channels, stacked (3, h, w) uint8: disparity, height, angle."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.shape[0] != 3 or self.data.dtype != np.uint8:
            raise ValueError("HhaImage wants (3, h, w) uint8")

    def to_unit_range(self):
        """Float (3, h, w) scaled to [0, 1] for the conv path."""
        return self.data.astype(np.float64) / 255.0


def default_intrinsics(height, width, fov_deg=60.0):
    """Square-pixel pinhole intrinsics from a horizontal field of view."""
    fx = 0.5 * width / np.tan(np.radians(fov_deg) / 2.0)
    return fx, fx, (width - 1) / 2.0, (height - 1) / 2.0


def backproject(d):
    """Per-pixel camera-frame 3D points: X=(u-cx)z/fx, Y=(v-cy)z/fy, Z=z.

    Returns (points (h,w,3), valid (h,w) bool); invalid pixels hold zeros.
    """
    h, w = d.depth.shape
    valid = d.depth > 0
    z = np.where(valid, d.depth, 0.0)
    u = np.arange(w)[None, :]
    v = np.arange(h)[:, None]
    points = np.empty((h, w, 3))
    points[..., 0] = (u - d.cx) * z / d.fx
    points[..., 1] = (v - d.cy) * z / d.fy
    points[..., 2] = z
    return points, valid


def _window_sums(img, k):
    return ndimage.correlate(img, np.ones((k, k)), mode="constant", cval=0.0)


def estimate_normals(points, valid, k=NORMAL_WINDOW):
    """Unit normals from least-squares plane fits over k x k valid neighborhoods.

    The normal is the smallest eigenvector of the local point covariance,
    flipped to face the camera (n . p < 0). Pixels with fewer than 3 valid
    neighbors are marked invalid.
    """
    h, w, _ = points.shape
    m = valid.astype(np.float64)
    p = points * m[..., None]

    n_cnt = _window_sums(m, k)
    sums = [_window_sums(p[..., i], k) for i in range(3)]
    sq = {}
    for i in range(3):
        for j in range(i, 3):
            sq[(i, j)] = _window_sums(p[..., i] * p[..., j], k)

    ok = n_cnt >= 3
    cnt = np.where(ok, n_cnt, 1.0)
    cov = np.empty((h, w, 3, 3))
    for i in range(3):
        for j in range(i, 3):
            c = sq[(i, j)] - sums[i] * sums[j] / cnt
            cov[..., i, j] = c
            cov[..., j, i] = c
    cov[~ok] = np.eye(3)

    _, vecs = np.linalg.eigh(cov)  # ascending eigenvalues
    normals = vecs[..., :, 0]

    toward = np.einsum("hwc,hwc->hw", normals, points)
    normals = np.where((toward > 0)[..., None], -normals, normals)
    normal_valid = ok & valid
    normals[~normal_valid] = 0.0
    return normals, normal_valid


def estimate_gravity(normals, normal_valid, iterations=GRAVITY_ITERS,
                     cone_deg=GRAVITY_CONE_DEG):
    """Iteratively refined unit gravity direction, starting from camera-down (0,1,0).

    Each iteration averages the normals within ``cone_deg`` of the estimate or
    its negation (sign-aligned), then renormalizes. With no aligned normals
    the estimate falls back to (0,1,0) with a diagnostic.
    """
    fallback = np.array([0.0, 1.0, 0.0])
    ns = normals[normal_valid]
    if ns.size == 0:
        log.warning("estimate_gravity: no valid normals; falling back to camera-down")
        return fallback
    g = fallback.copy()
    cos_cone = np.cos(np.radians(cone_deg))
    for _ in range(iterations):
        dots = ns @ g
        aligned = np.abs(dots) > cos_cone
        if not aligned.any():
            log.warning("estimate_gravity: no normals within the cone; falling back")
            return fallback
        mean = (ns[aligned] * np.sign(dots[aligned])[:, None]).sum(axis=0)
        norm = np.linalg.norm(mean)
        if norm == 0:
            log.warning("estimate_gravity: degenerate average; falling back")
            return fallback
        g = mean / norm
    return g


def _quantize(values, lo, hi):
    scaled = (np.clip(values, lo, hi) - lo) / (hi - lo) * 255.0
    return np.round(scaled).astype(np.uint8)


def encode_hha(d, k=NORMAL_WINDOW):
    """Encode a DepthImage into the three quantized geometric channels.

    disparity: 1/z mapped from [1/20, 1/0.1] onto [0, 255]
    height:    distance along -gravity above the 5th-percentile height, clamped to [0, 3] m
    angle:     angle(normal, -gravity) in degrees, [0, 180] onto [0, 255]
    """
    valid = d.depth > 0
    clamped = DepthImage(np.where(valid, d.depth.clip(DEPTH_MIN, DEPTH_MAX), 0.0),
                         d.fx, d.fy, d.cx, d.cy)
    points, valid = backproject(clamped)
    normals, normal_valid = estimate_normals(points, valid, k=k)
    gravity = estimate_gravity(normals, normal_valid)
    up = -gravity

    h, w = d.depth.shape
    out = np.zeros((3, h, w), dtype=np.uint8)
    if valid.any():
        disparity = np.zeros((h, w))
        disparity[valid] = 1.0 / clamped.depth[valid]
        out[0][valid] = _quantize(disparity, 1.0 / DEPTH_MAX, 1.0 / DEPTH_MIN)[valid]

        heights = points @ up
        reference = np.percentile(heights[valid], 5.0)
        out[1][valid] = _quantize(heights - reference, 0.0, HEIGHT_MAX)[valid]

        cos_angle = np.clip(normals @ up, -1.0, 1.0)
        angle_deg = np.degrees(np.arccos(cos_angle))
        angle_bytes = _quantize(angle_deg, 0.0, 180.0)
        out[2][valid & normal_valid] = angle_bytes[valid & normal_valid]
    return HhaImage(out)
