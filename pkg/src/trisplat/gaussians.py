"""Anisotropic 3-D Gaussian primitives and their ray-space form.

The renderer needs, per Gaussian and camera, the point of maximum density
along each viewing ray.  Two routes are implemented:

* an exact one that intersects a single world-space ray with the Gaussian
  (used as the ground truth in tests and for the affine-error bound), and
* the ray-space route: the Gaussian is pushed through the local affine
  approximation of the perspective map, after which every viewing ray is the
  vertical line through its pixel and the max-density depth is a dot product
  per pixel.

Ray space maps a camera-frame point (x, y, z) to
(fx*x/z + cx, fy*y/z + cy, ||(x, y, z)||): the first two coordinates are the
pixel, the third is Euclidean distance from the camera center, so along a
fixed ray the third coordinate equals the ray parameter t.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import DEPTH_EPSILON, BehindCamera, CameraView, Ray


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrix from a (w, x, y, z) quaternion (normalized here)."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise ValueError("quaternion must be nonzero and finite")
    w, x, y, z = q / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass(frozen=True, eq=False)
class GaussianPrimitive:
    """One anisotropic Gaussian: center, orientation, per-axis scales, opacity."""

    center: np.ndarray
    rotation: np.ndarray  # unit quaternion, (w, x, y, z)
    scales: np.ndarray  # standard deviations along the principal axes
    opacity: float

    def __post_init__(self):
        center = np.asarray(self.center, dtype=np.float64)
        rotation = np.asarray(self.rotation, dtype=np.float64)
        scales = np.asarray(self.scales, dtype=np.float64)
        if center.shape != (3,) or not np.all(np.isfinite(center)):
            raise ValueError("gaussian center must be a finite 3-vector")
        if rotation.shape != (4,):
            raise ValueError("gaussian rotation must be a (w, x, y, z) quaternion")
        if scales.shape != (3,) or not np.all(np.isfinite(scales)) or np.any(scales <= 0):
            raise ValueError(f"gaussian scales must be positive, got {scales}")
        if not (0.0 < self.opacity <= 1.0):
            raise ValueError(f"gaussian opacity must lie in (0, 1], got {self.opacity}")
        n = np.linalg.norm(rotation)
        if not np.isfinite(n) or n == 0.0:
            raise ValueError("gaussian rotation quaternion must be nonzero")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "rotation", rotation / n)
        object.__setattr__(self, "scales", scales)

    @property
    def covariance(self) -> np.ndarray:
        """World-space covariance R S S^T R^T (symmetric positive definite)."""
        R = quaternion_to_rotation(self.rotation)
        S2 = self.scales**2
        cov = (R * S2[None, :]) @ R.T
        return 0.5 * (cov + cov.T)


def ray_gaussian_intersection_exact(ray: Ray, gaussian: GaussianPrimitive) -> float:
    """Ray parameter of the maximum Gaussian density along a world-space ray.

    t* = v^T Sigma^-1 (x_c - o) / (v^T Sigma^-1 v); may be negative when the
    peak lies behind the ray origin.
    """
    cov = gaussian.covariance
    diff = gaussian.center - ray.origin
    w_diff = np.linalg.solve(cov, diff)
    w_dir = np.linalg.solve(cov, ray.direction)
    return float(np.dot(ray.direction, w_diff) / np.dot(ray.direction, w_dir))


@dataclass(frozen=True, eq=False)
class RaySpaceGaussian:
    """A Gaussian pushed into a camera's ray space by the local affine map.

    Attributes:
        cov: 3x3 ray-space covariance J W Sigma W^T J^T.
        center: ray-space center (pixel_u, pixel_v, distance to camera).
        q_hat: Sigma'^-1 e3 / (e3^T Sigma'^-1 e3); the per-pixel max-density
            distance is t* = q_hat . (center - (u, v, 0)).
        J: 3x3 Jacobian of the camera-to-ray-space map at the center.
        plane_normal: ray-space normal (q1, q2, 1) of the max-density plane.
        cos_theta_c: cosine between the center's viewing ray and the optical
            axis; converts ray distance to projective depth.
        z_center: camera-frame z of the center (blending depth and sort key).
    """

    cov: np.ndarray
    center: np.ndarray
    q_hat: np.ndarray
    J: np.ndarray
    plane_normal: np.ndarray
    cos_theta_c: float
    z_center: float
    normal_cam: np.ndarray = field(init=False)

    def __post_init__(self):
        n_cam = self.J.T @ self.plane_normal
        n_cam = n_cam / np.linalg.norm(n_cam)
        object.__setattr__(self, "normal_cam", n_cam)


def to_ray_space(view: CameraView, gaussian: GaussianPrimitive) -> RaySpaceGaussian:
    """Transform a world-space Gaussian into a camera's ray space.

    Raises:
        BehindCamera: when the Gaussian center is at or behind the pinhole.
    """
    R, t = view.pose.R, view.pose.t
    intr = view.intrinsics
    x_cam = R @ gaussian.center + t
    x, y, z = x_cam
    if not z > DEPTH_EPSILON:
        raise BehindCamera(view.view_id, float(z))
    r = float(np.linalg.norm(x_cam))
    J = np.array(
        [
            [intr.fx / z, 0.0, -intr.fx * x / (z * z)],
            [0.0, intr.fy / z, -intr.fy * y / (z * z)],
            [x / r, y / r, z / r],
        ]
    )
    cov_cam = R @ gaussian.covariance @ R.T
    cov_ray = J @ cov_cam @ J.T
    cov_ray = 0.5 * (cov_ray + cov_ray.T)
    center = np.array([intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy, r])
    w = np.linalg.solve(cov_ray, np.array([0.0, 0.0, 1.0]))
    q_hat = w / w[2]  # w[2] = e3^T Sigma'^-1 e3 > 0 for SPD cov_ray
    plane_normal = np.array([q_hat[0], q_hat[1], 1.0])
    return RaySpaceGaussian(
        cov=cov_ray,
        center=center,
        q_hat=q_hat,
        J=J,
        plane_normal=plane_normal,
        cos_theta_c=z / r,
        z_center=float(z),
    )


def ray_space_intersection(rsg: RaySpaceGaussian, pixel) -> float:
    """Max-density ray distance for the ray through ``pixel`` (affine route).

    The returned value is Euclidean distance from the camera center; multiply
    by ``cos_theta_c`` for projective depth.
    """
    du = rsg.center[0] - float(pixel[0])
    dv = rsg.center[1] - float(pixel[1])
    return float(rsg.q_hat[0] * du + rsg.q_hat[1] * dv + rsg.q_hat[2] * rsg.center[2])
