"""Pinhole camera types, projection, backprojection, and neighbor selection.

Conventions: world-to-camera pose (x_cam = R @ x_world + t), pixel coordinates
in pixels with the origin at the top-left image corner, camera looks down +z in
its own frame.  Projective depth s is the camera-frame z coordinate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Points with projective depth at or below this are behind the camera for
# every numerical purpose; keeps 1/s and DLT rows well-conditioned.
DEPTH_EPSILON = 1e-6

DEFAULT_NEIGHBOR_MAX_ANGLE_DEG = 60.0


class BehindCamera(Exception):
    """A point projected behind (or into the pinhole plane of) a camera."""

    def __init__(self, view_id: int, s: float):
        super().__init__(f"point is behind camera {view_id} (projective depth {s:.3e})")
        self.view_id = view_id
        self.s = s


class InsufficientViews(Exception):
    """Fewer usable views than an operation requires."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (math.isfinite(self.fx) and self.fx > 0):
            raise ValueError(f"intrinsics.fx must be positive and finite, got {self.fx}")
        if not (math.isfinite(self.fy) and self.fy > 0):
            raise ValueError(f"intrinsics.fy must be positive and finite, got {self.fy}")
        if not (isinstance(self.width, int) and self.width > 0):
            raise ValueError(f"intrinsics.width must be a positive integer, got {self.width}")
        if not (isinstance(self.height, int) and self.height > 0):
            raise ValueError(f"intrinsics.height must be a positive integer, got {self.height}")
        if not (0 <= self.cx < self.width):
            raise ValueError(f"intrinsics.cx must lie in [0, width), got {self.cx}")
        if not (0 <= self.cy < self.height):
            raise ValueError(f"intrinsics.cy must lie in [0, height), got {self.cy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def matrix_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera rigid transform: x_cam = R @ x_world + t."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64)
        if R.shape != (3, 3):
            raise ValueError(f"pose.R must be 3x3, got {R.shape}")
        if t.shape != (3,):
            raise ValueError(f"pose.t must be a 3-vector, got {t.shape}")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose contains non-finite entries")
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-10:
            raise ValueError("pose.R is not orthonormal within 1e-10")
        if np.linalg.det(R) < 0:
            raise ValueError("pose.R must have determinant +1 (no reflections)")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t


@dataclass(frozen=True)
class Observation:
    """A 2-D pixel observation with its projective depth."""

    u: float
    v: float
    s: float

    @property
    def pixel(self) -> np.ndarray:
        return np.array([self.u, self.v])


@dataclass(frozen=True)
class Ray:
    """World-space ray with unit direction."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64)
        d = np.asarray(self.direction, dtype=np.float64)
        if o.shape != (3,) or d.shape != (3,):
            raise ValueError("Ray origin and direction must be 3-vectors")
        n = np.linalg.norm(d)
        if not np.isfinite(n) or n == 0.0:
            raise ValueError("Ray direction must be nonzero and finite")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d / n)

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True, eq=False)
class CameraView:
    """A posed, calibrated camera with its cached 3x4 projection matrix."""

    view_id: int
    intrinsics: CameraIntrinsics
    pose: CameraPose
    P: np.ndarray = field(init=False)

    def __post_init__(self):
        P = self.intrinsics.matrix @ np.hstack([self.pose.R, self.pose.t[:, None]])
        object.__setattr__(self, "P", P)

    @property
    def center(self) -> np.ndarray:
        return self.pose.center

    @property
    def optical_axis(self) -> np.ndarray:
        """Unit world direction the camera looks along (+z of the camera frame)."""
        return self.pose.R[2, :].copy()


def project_point(view: CameraView, point: np.ndarray) -> Observation:
    """Project a world point; raises BehindCamera when s <= DEPTH_EPSILON."""
    point = np.asarray(point, dtype=np.float64)
    P = view.P
    a0 = P[0, 0] * point[0] + P[0, 1] * point[1] + P[0, 2] * point[2] + P[0, 3]
    a1 = P[1, 0] * point[0] + P[1, 1] * point[1] + P[1, 2] * point[2] + P[1, 3]
    s = P[2, 0] * point[0] + P[2, 1] * point[1] + P[2, 2] * point[2] + P[2, 3]
    if not s > DEPTH_EPSILON:
        raise BehindCamera(view.view_id, float(s))
    return Observation(u=float(a0 / s), v=float(a1 / s), s=float(s))


def project_points(view: CameraView, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized projection without exceptions.

    Returns (u, v, s) arrays; callers mask on ``s > DEPTH_EPSILON``.  Uses
    explicit per-coefficient arithmetic so results are bitwise identical no
    matter how points are batched.
    """
    pts = np.asarray(points, dtype=np.float64)
    P = view.P
    x, y, z = pts[..., 0], pts[..., 1], pts[..., 2]
    a0 = P[0, 0] * x + P[0, 1] * y + P[0, 2] * z + P[0, 3]
    a1 = P[1, 0] * x + P[1, 1] * y + P[1, 2] * z + P[1, 3]
    s = P[2, 0] * x + P[2, 1] * y + P[2, 2] * z + P[2, 3]
    safe = np.where(s > DEPTH_EPSILON, s, 1.0)
    u = np.where(s > DEPTH_EPSILON, a0 / safe, np.nan)
    v = np.where(s > DEPTH_EPSILON, a1 / safe, np.nan)
    return u, v, s


def backproject_pixel(view: CameraView, pixel, depth: float) -> np.ndarray:
    """World point at projective depth ``depth`` along the ray through ``pixel``.

    Args:
        pixel: (u, v) in pixels, inside the image bounds.
        depth: projective depth (camera-frame z), must exceed DEPTH_EPSILON.
    """
    u, v = float(pixel[0]), float(pixel[1])
    intr = view.intrinsics
    if not (0.0 <= u <= intr.width and 0.0 <= v <= intr.height):
        raise ValueError(
            f"pixel ({u:.2f}, {v:.2f}) outside image bounds "
            f"{intr.width}x{intr.height} of view {view.view_id}"
        )
    if not depth > DEPTH_EPSILON:
        raise ValueError(f"backproject depth must exceed {DEPTH_EPSILON}, got {depth}")
    return backproject_pixels(view, np.array([[u, v]]), np.array([depth]))[0]


def backproject_pixels(view: CameraView, pixels: np.ndarray, depths: np.ndarray) -> np.ndarray:
    """Vectorized, unchecked backprojection: (n, 2) pixels, (n,) depths -> (n, 3)."""
    pixels = np.asarray(pixels, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    intr = view.intrinsics
    xc = (pixels[..., 0] - intr.cx) / intr.fx * depths
    yc = (pixels[..., 1] - intr.cy) / intr.fy * depths
    cam = np.stack([xc, yc, depths], axis=-1)
    R, t = view.pose.R, view.pose.t
    return (cam - t) @ R  # (cam - t) @ R == R.T @ (cam - t) per row


def pixel_ray(view: CameraView, pixel) -> Ray:
    """World-space ray from the camera center through a pixel."""
    intr = view.intrinsics
    d_cam = np.array(
        [(float(pixel[0]) - intr.cx) / intr.fx, (float(pixel[1]) - intr.cy) / intr.fy, 1.0]
    )
    d_world = view.pose.R.T @ d_cam
    return Ray(origin=view.center, direction=d_world)


def select_neighbor_views(
    reference: CameraView,
    candidates: list[CameraView],
    k: int,
    max_angle_deg: float = DEFAULT_NEIGHBOR_MAX_ANGLE_DEG,
) -> list[CameraView]:
    """Deterministic k nearest neighbors of a reference view.

    Candidates whose optical axis deviates from the reference axis by
    ``max_angle_deg`` or more are excluded (a camera facing away shares no
    surface), the reference itself is excluded by id, and the survivors are
    sorted by camera-center distance with view id breaking ties.

    Raises:
        InsufficientViews: when fewer than k candidates survive the filter.
    """
    if k < 0:
        raise ValueError(f"neighbor count k must be non-negative, got {k}")
    axis_ref = reference.optical_axis
    c_ref = reference.center
    cos_min = math.cos(math.radians(max_angle_deg))
    eligible = []
    for cand in candidates:
        if cand.view_id == reference.view_id:
            continue
        cosang = float(np.dot(axis_ref, cand.optical_axis))
        if cosang <= cos_min:
            continue
        dist = float(np.linalg.norm(cand.center - c_ref))
        eligible.append((dist, cand.view_id, cand))
    if len(eligible) < k:
        raise InsufficientViews(
            f"view {reference.view_id}: {len(eligible)} eligible neighbors "
            f"within {max_angle_deg:.0f} degrees, need {k}"
        )
    eligible.sort(key=lambda e: (e[0], e[1]))
    return [e[2] for e in eligible[:k]]
