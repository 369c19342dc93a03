"""Desk-scale synthetic scenes for optimization and fusion experiments.

A scene is an analytic ground-truth surface (sphere, plane patch, or two
spheres), a ring of inward-looking cameras, and an optimizable surface: a
regular pixel grid per camera whose parameters are per-element depth offsets
along fixed backprojection rays.  Offsets start at ground truth plus
configurable Gaussian noise, optional gross outliers, and an optional smooth
per-view bias (a systematic error chain around the camera ring).

The module also provides analytic depth/normal rendering of the ground truth
(for fusion tests) and bilinear sampling of a view's current depth estimate,
including the ray-versus-depth-field intersection used to pin neighbor-view
observations during optimization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .camera import (
    DEPTH_EPSILON,
    CameraIntrinsics,
    CameraPose,
    CameraView,
)
from .raster import VALID_OPACITY, DepthNormalMap

SCENE_KINDS = ("sphere", "plane", "two-spheres")


# ---------------------------------------------------------------------------
# Ground truth surfaces
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GroundTruthSurface:
    """Analytic surface with ray casting, distances, and sampling.

    kind "sphere": centers[0], radii[0]; "plane": a square patch with
    ``point``/``normal``/``extent``; "two-spheres": union of two spheres.
    """

    kind: str
    centers: np.ndarray = field(default_factory=lambda: np.zeros((1, 3)))
    radii: np.ndarray = field(default_factory=lambda: np.ones(1))
    point: np.ndarray = field(default_factory=lambda: np.zeros(3))
    normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    extent: float = 1.0

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise ValueError(f"surface kind must be one of {SCENE_KINDS}, got {self.kind!r}")
        n = np.asarray(self.normal, dtype=np.float64)
        object.__setattr__(self, "normal", n / np.linalg.norm(n))
        object.__setattr__(self, "centers", np.atleast_2d(np.asarray(self.centers, np.float64)))
        object.__setattr__(self, "radii", np.atleast_1d(np.asarray(self.radii, np.float64)))
        object.__setattr__(self, "point", np.asarray(self.point, dtype=np.float64))

    # -- ray casting --------------------------------------------------------

    def _ray_sphere(self, o, d, c, R):
        oc = o - c[None, :]
        b = np.sum(oc * d, axis=1)
        q = np.sum(oc * oc, axis=1) - R * R
        disc = b * b - q
        ok = disc >= 0.0
        root = np.sqrt(np.where(ok, disc, 0.0))
        t1 = -b - root
        t2 = -b + root
        t = np.where(t1 > DEPTH_EPSILON, t1, t2)
        return np.where(ok & (t > DEPTH_EPSILON), t, np.nan)

    def ray_hits(self, origins: np.ndarray, directions: np.ndarray) -> np.ndarray:
        """First positive hit distance along unit directions; NaN on miss."""
        o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
        d = np.asarray(directions, dtype=np.float64)
        d = d / np.linalg.norm(d, axis=1, keepdims=True)
        if o.shape[0] == 1:
            o = np.broadcast_to(o, d.shape)
        if self.kind == "plane":
            denom = d @ self.normal
            num = (self.point[None, :] - o) @ self.normal
            t = np.where(np.abs(denom) > 1e-12, num / np.where(denom == 0.0, 1.0, denom), np.nan)
            hit = o + t[:, None] * d
            local = hit - self.point[None, :]
            inside = np.all(
                np.abs(local - np.outer(local @ self.normal, self.normal)) <= self.extent + 1e-12,
                axis=1,
            )
            return np.where((t > DEPTH_EPSILON) & inside, t, np.nan)
        t = self._ray_sphere(o, d, self.centers[0], float(self.radii[0]))
        for i in range(1, self.centers.shape[0]):
            ti = self._ray_sphere(o, d, self.centers[i], float(self.radii[i]))
            t = np.where(np.isnan(t) | (ti < t), ti, t)
        return t

    # -- distances ----------------------------------------------------------

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        """Signed distance; negative inside (spheres) / behind the normal (plane)."""
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if self.kind == "plane":
            return (p - self.point[None, :]) @ self.normal
        sd = np.linalg.norm(p - self.centers[0][None, :], axis=1) - self.radii[0]
        for i in range(1, self.centers.shape[0]):
            sdi = np.linalg.norm(p - self.centers[i][None, :], axis=1) - self.radii[i]
            sd = np.minimum(sd, sdi)
        return sd

    def distance(self, points: np.ndarray) -> np.ndarray:
        """Unsigned distance to the surface (patch edges ignored for planes)."""
        return np.abs(self.signed_distance(points))

    def surface_normal(self, points: np.ndarray) -> np.ndarray:
        """Outward unit normal at (or nearest to) each point."""
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if self.kind == "plane":
            return np.broadcast_to(self.normal, p.shape).copy()
        best = np.full(p.shape[0], np.inf)
        out = np.zeros_like(p)
        for i in range(self.centers.shape[0]):
            d = p - self.centers[i][None, :]
            r = np.linalg.norm(d, axis=1)
            miss = np.abs(r - self.radii[i])
            closer = miss < best
            best = np.where(closer, miss, best)
            n = d / np.maximum(r, 1e-300)[:, None]
            out = np.where(closer[:, None], n, out)
        return out

    def sample_points(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform area-weighted samples on the surface."""
        if self.kind == "plane":
            e1, e2 = _plane_tangents(self.normal)
            ab = rng.uniform(-self.extent, self.extent, size=(n, 2))
            return self.point[None, :] + ab[:, 0:1] * e1[None, :] + ab[:, 1:2] * e2[None, :]
        areas = 4.0 * math.pi * self.radii**2
        counts = rng.multinomial(n, areas / areas.sum())
        chunks = []
        for i, m in enumerate(counts):
            if m == 0:
                continue
            v = rng.standard_normal((int(m), 3))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            chunks.append(self.centers[i][None, :] + self.radii[i] * v)
        return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, 3))

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if self.kind == "plane":
            e1, e2 = _plane_tangents(self.normal)
            corners = [
                self.point + a * self.extent * e1 + b * self.extent * e2
                for a in (-1, 1)
                for b in (-1, 1)
            ]
            c = np.stack(corners)
            return c.min(axis=0), c.max(axis=0)
        lo = np.min(self.centers - self.radii[:, None], axis=0)
        hi = np.max(self.centers + self.radii[:, None], axis=0)
        return lo, hi

    @property
    def bbox_diagonal(self) -> float:
        lo, hi = self.bounds()
        return float(np.linalg.norm(hi - lo))


def _plane_tangents(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(n, a)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    return e1, e2


def sphere_surface(center=(0.0, 0.0, 0.0), radius: float = 1.0) -> GroundTruthSurface:
    return GroundTruthSurface(kind="sphere", centers=np.array([center]), radii=np.array([radius]))


def plane_surface(point=(0.0, 0.0, 0.0), normal=(0.0, 0.0, 1.0), extent=1.0) -> GroundTruthSurface:
    return GroundTruthSurface(
        kind="plane", point=np.asarray(point, np.float64), normal=np.asarray(normal, np.float64),
        extent=float(extent),
    )


def two_spheres_surface(
    centers=((-0.8, 0.0, 0.0), (0.8, 0.0, 0.0)), radii=(0.6, 0.6)
) -> GroundTruthSurface:
    return GroundTruthSurface(
        kind="two-spheres", centers=np.asarray(centers, np.float64),
        radii=np.asarray(radii, np.float64),
    )


# ---------------------------------------------------------------------------
# Camera layouts
# ---------------------------------------------------------------------------


def look_at_pose(eye, target, up_hint=(0.0, 0.0, 1.0)) -> CameraPose:
    """World-to-camera pose with +z looking from eye toward target."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up_hint, dtype=np.float64)
    right = np.cross(fwd, up)
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        up = np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, up)
        nr = np.linalg.norm(right)
    right /= nr
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=0)
    return CameraPose(R=R, t=-R @ eye)


def default_intrinsics(image_size: int = 128, focal: float | None = None) -> CameraIntrinsics:
    f = focal if focal is not None else 1.2 * image_size
    return CameraIntrinsics(
        fx=float(f), fy=float(f), cx=image_size / 2.0, cy=image_size / 2.0,
        width=image_size, height=image_size,
    )


def ring_views(
    n: int,
    radius: float,
    height: float,
    intrinsics: CameraIntrinsics,
    target=(0.0, 0.0, 0.0),
    start_id: int = 0,
    phase: float = 0.0,
) -> list[CameraView]:
    """n cameras on a horizontal circle, all looking at ``target``."""
    if n < 1:
        raise ValueError("ring needs at least one camera")
    views = []
    for i in range(n):
        ang = phase + 2.0 * math.pi * i / n
        eye = np.array([radius * math.cos(ang), radius * math.sin(ang), height])
        views.append(
            CameraView(view_id=start_id + i, intrinsics=intrinsics, pose=look_at_pose(eye, target))
        )
    return views


def double_ring_views(
    n: int, radius: float, height: float, intrinsics: CameraIntrinsics, target=(0.0, 0.0, 0.0)
) -> list[CameraView]:
    """Two staggered rings at +-height; covers both poles of a central object."""
    top = ring_views(n - n // 2, radius, height, intrinsics, target, start_id=0)
    bottom = ring_views(
        n // 2, radius, -height, intrinsics, target, start_id=n - n // 2,
        phase=math.pi / max(n // 2, 1),
    )
    return top + bottom


# ---------------------------------------------------------------------------
# Optimizable per-view depth grids
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class OptimizableSurface:
    """Per-view grids of depth parameters along fixed backprojection rays.

    The world point of element (view v, slot e) is

        X = camera_center[v] + (base_depth + offset) * ray_dir[v, e]

    where ray_dir = R^T K^{-1} (u, v, 1) so the parameter is projective depth.
    ``base_depths`` hold ground truth, so offsets are exactly the depth error.
    Elements whose construction ray missed the ground truth are invalid.

    A view's queryable depth field is ``base_lookup`` (the analytic true-depth
    field the grid was initialized from) plus bilinear interpolation of the
    offset grid: with all offsets zero the field is exactly the true surface,
    making zero noise an exact consensus fixed point rather than one polluted
    by interpolation error.  Without ``base_lookup`` the field falls back to
    bilinear interpolation of the total depths.
    """

    views: list[CameraView]
    pixels: np.ndarray  # (G, 2) pixel coordinates shared by all views
    grid_shape: tuple[int, int]  # (rows, cols), G = rows * cols, row-major
    base_depths: np.ndarray  # (V, G)
    offsets: np.ndarray  # (V, G) parameters
    valid: np.ndarray  # (V, G) bool
    ray_dirs: np.ndarray  # (V, G, 3) world, dX/d(depth)
    origins: np.ndarray  # (V, 3) camera centers
    dir_norms: np.ndarray  # (V, G)
    base_lookup: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None

    def copy(self) -> "OptimizableSurface":
        return OptimizableSurface(
            views=self.views,
            pixels=self.pixels,
            grid_shape=self.grid_shape,
            base_depths=self.base_depths.copy(),
            offsets=self.offsets.copy(),
            valid=self.valid.copy(),
            ray_dirs=self.ray_dirs,
            origins=self.origins,
            dir_norms=self.dir_norms,
            base_lookup=self.base_lookup,
        )

    @property
    def n_views(self) -> int:
        return len(self.views)

    def depths(self) -> np.ndarray:
        return self.base_depths + self.offsets

    def positions(self) -> np.ndarray:
        """(V, G, 3) current world points (NaN where invalid)."""
        d = self.depths()
        pos = self.origins[:, None, :] + d[:, :, None] * self.ray_dirs
        return np.where(self.valid[:, :, None], pos, np.nan)

    def flat_points(self) -> np.ndarray:
        """(M, 3) valid world points, view-major fixed order."""
        pos = self.positions()
        return pos[self.valid]

    def rmse(self) -> float:
        """Root-mean-square 3D distance from ground truth over valid elements."""
        err = self.offsets * self.dir_norms
        return float(np.sqrt(np.mean(err[self.valid] ** 2)))

    def sample_depth_multi(self, view_indices: np.ndarray, uv: np.ndarray) -> np.ndarray:
        """Depth-field lookup at pixels ``uv`` (M, 2) in views ``view_indices`` (M,).

        NaN outside the grid hull, where the base field has no surface, or (in
        the fallback mode) where any supporting grid cell is invalid.
        """
        rows, cols = self.grid_shape
        u0, v0 = self.pixels[0]
        u1, v1 = self.pixels[-1]
        du = (u1 - u0) / (cols - 1)
        dv = (v1 - v0) / (rows - 1)
        uv = np.asarray(uv, dtype=np.float64)
        vi = np.asarray(view_indices, dtype=np.int64)
        with np.errstate(invalid="ignore"):
            gx = (uv[:, 0] - u0) / du
            gy = (uv[:, 1] - v0) / dv
            inside = (gx >= 0.0) & (gx <= cols - 1) & (gy >= 0.0) & (gy <= rows - 1)
            gx = np.where(inside, gx, 0.0)
            gy = np.where(inside, gy, 0.0)
            ix = np.minimum(gx.astype(np.int64), cols - 2)
            iy = np.minimum(gy.astype(np.int64), rows - 2)
            fx = gx - ix
            fy = gy - iy
            ok = self.valid.reshape(-1, rows, cols)
            if self.base_lookup is not None:
                # Invalid cells hold no parameter; they contribute zero offset
                # and the base field alone decides surface presence.
                off = np.where(self.valid, self.offsets, 0.0).reshape(-1, rows, cols)
                interp = (
                    off[vi, iy, ix] * (1.0 - fx) * (1.0 - fy)
                    + off[vi, iy, ix + 1] * fx * (1.0 - fy)
                    + off[vi, iy + 1, ix] * (1.0 - fx) * fy
                    + off[vi, iy + 1, ix + 1] * fx * fy
                )
                base = self.base_lookup(vi, uv)
                return np.where(inside & np.isfinite(base), base + interp, np.nan)
            depth = self.depths().reshape(-1, rows, cols)
            all_ok = ok[vi, iy, ix] & ok[vi, iy, ix + 1] & ok[vi, iy + 1, ix] & ok[vi, iy + 1, ix + 1]
            val = (
                depth[vi, iy, ix] * (1.0 - fx) * (1.0 - fy)
                + depth[vi, iy, ix + 1] * fx * (1.0 - fy)
                + depth[vi, iy + 1, ix] * (1.0 - fx) * fy
                + depth[vi, iy + 1, ix + 1] * fx * fy
            )
            return np.where(inside & all_ok, val, np.nan)

    def sample_depth(self, view_index: int, uv: np.ndarray) -> np.ndarray:
        """Single-view convenience wrapper over sample_depth_multi."""
        uv = np.asarray(uv, dtype=np.float64)
        vi = np.full(uv.shape[0], int(view_index), dtype=np.int64)
        return self.sample_depth_multi(vi, uv)


def intersect_neighbor_fields(
    surface: OptimizableSurface,
    ref_index: int,
    nbr_indices,
    *,
    iterations: int = 10,
    tolerance: float = 1e-4,
) -> tuple[np.ndarray, np.ndarray]:
    """Pin the reference view's rays against neighbors' current depth fields.

    For each element of ``ref_index`` and each neighbor j, walks along the
    element's world ray to the depth where j's interpolated depth field agrees
    with the point's projective depth in j.  The projective depth is affine in
    the ray parameter, so the first step is a Newton step that ignores the
    field term; later steps use a secant slope so the iteration converges far
    below ``tolerance`` wherever the field is smooth.  Returns the
    neighbor-view pixels (k, G, 2) of the intersection points and a (k, G)
    validity mask; lookups that left the neighbor grid, fell behind the
    camera, or did not settle within ``tolerance`` are invalid.
    """
    nbr = np.asarray(nbr_indices, dtype=np.int64)
    k = nbr.shape[0]
    o = surface.origins[ref_index]
    g = surface.ray_dirs[ref_index]  # (G, 3)
    G = g.shape[0]
    t0 = np.where(surface.valid[ref_index], surface.depths()[ref_index], np.nan)
    t = np.broadcast_to(t0, (k, G)).copy()
    P = np.stack([surface.views[int(j)].P for j in nbr], axis=0)  # (k, 3, 4)
    # Projective depth in each neighbor along a reference ray is affine in t.
    c_lin = (
        P[:, 2, 0, None] * g[None, :, 0]
        + P[:, 2, 1, None] * g[None, :, 1]
        + P[:, 2, 2, None] * g[None, :, 2]
    )
    s0 = P[:, 2, 0] * o[0] + P[:, 2, 1] * o[1] + P[:, 2, 2] * o[2] + P[:, 2, 3]
    c_safe = np.where(c_lin == 0.0, 1.0, c_lin)
    vi_flat = np.repeat(nbr, G)
    u = np.full((k, G), np.nan)
    v = np.full((k, G), np.nan)
    gap = np.full((k, G), np.nan)
    t_prev = np.full((k, G), np.nan)
    gap_prev = np.full((k, G), np.nan)
    settle = 1e-11  # iterate far past the acceptance tolerance when possible
    with np.errstate(invalid="ignore"):
        for it in range(iterations):
            X = o[None, None, :] + t[:, :, None] * g[None, :, :]  # (k, G, 3)
            a0 = (
                P[:, 0, 0, None] * X[:, :, 0]
                + P[:, 0, 1, None] * X[:, :, 1]
                + P[:, 0, 2, None] * X[:, :, 2]
                + P[:, 0, 3, None]
            )
            a1 = (
                P[:, 1, 0, None] * X[:, :, 0]
                + P[:, 1, 1, None] * X[:, :, 1]
                + P[:, 1, 2, None] * X[:, :, 2]
                + P[:, 1, 3, None]
            )
            s = s0[:, None] + c_lin * t
            front = s > DEPTH_EPSILON
            s_safe = np.where(front, s, 1.0)
            u = np.where(front, a0 / s_safe, np.nan)
            v = np.where(front, a1 / s_safe, np.nan)
            d_hat = surface.sample_depth_multi(
                vi_flat, np.stack([u.ravel(), v.ravel()], axis=1)
            ).reshape(k, G)
            gap = d_hat - s
            moving = np.isfinite(gap) & (np.abs(gap) > settle)
            if not moving.any() or it == iterations - 1:
                break
            newton = gap / c_safe
            if it == 0:
                step = newton
            else:
                dt_ = t - t_prev
                slope = (gap - gap_prev) / np.where(dt_ == 0.0, 1.0, dt_)
                secant = -gap / np.where(slope == 0.0, 1.0, slope)
                good = (
                    np.isfinite(secant)
                    & (np.abs(slope) > 1e-14)
                    & (np.abs(secant) <= 4.0 * np.abs(newton) + 1e-6)
                )
                step = np.where(good, secant, newton)
            t_prev = t
            gap_prev = gap
            t_new = t + np.where(moving & np.isfinite(step), step, 0.0)
            t = np.where(t_new > DEPTH_EPSILON, t_new, t)
    ok = np.isfinite(gap) & (np.abs(gap) <= tolerance) & np.isfinite(u) & np.isfinite(v)
    pixels = np.stack([np.where(ok, u, np.nan), np.where(ok, v, np.nan)], axis=2)
    return pixels, ok


def intersect_depth_field(
    surface: OptimizableSurface,
    ref_index: int,
    nbr_index: int,
    *,
    iterations: int = 10,
    tolerance: float = 1e-4,
) -> tuple[np.ndarray, np.ndarray]:
    """Single-neighbor convenience wrapper over intersect_neighbor_fields."""
    pixels, ok = intersect_neighbor_fields(
        surface, ref_index, [nbr_index], iterations=iterations, tolerance=tolerance
    )
    return pixels[0], ok[0]


# ---------------------------------------------------------------------------
# Scene assembly
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    surface: OptimizableSurface
    ground_truth: GroundTruthSurface
    views: list[CameraView]
    kind: str
    noise: float
    seed: int

    @property
    def bbox_diagonal(self) -> float:
        return self.ground_truth.bbox_diagonal


_LAYOUTS = {
    "sphere": dict(radius=3.0, height=2.5),
    "two-spheres": dict(radius=3.4, height=2.5),
    "plane": dict(radius=2.5, height=2.5),
}


def make_synthetic_scene(
    kind: str,
    n_views: int,
    noise: float,
    seed: int,
    *,
    grid: int = 10,
    image_size: int = 128,
    focal: float | None = None,
    margin: float = 0.33,
    outlier_fraction: float = 0.0,
    outlier_scale: float = 0.0,
    view_bias: float = 0.0,
    layout: str = "ring",
) -> SyntheticScene:
    """Build a camera ring around an analytic surface with noisy depth grids.

    Initial depths are ground truth plus N(0, noise^2) offsets; a fraction of
    elements may be replaced by gross outliers (offset +-outlier_scale), and
    ``view_bias`` adds a smooth systematic per-view depth shift (sinusoidal
    around the ring), the setup where pairwise consistency drifts.
    """
    if kind not in SCENE_KINDS:
        raise ValueError(f"scene kind must be one of {SCENE_KINDS}, got {kind!r}")
    if n_views < 2:
        raise ValueError(f"need at least 2 views, got {n_views}")
    if grid < 2:
        raise ValueError(f"grid must be at least 2 per side, got {grid}")
    if noise < 0.0:
        raise ValueError(f"noise must be nonnegative, got {noise}")
    if not 0.0 <= outlier_fraction < 1.0:
        raise ValueError(f"outlier_fraction must be in [0, 1), got {outlier_fraction}")

    gt = {
        "sphere": sphere_surface,
        "plane": plane_surface,
        "two-spheres": two_spheres_surface,
    }[kind]()
    intr = default_intrinsics(image_size, focal)
    lay = _LAYOUTS[kind]
    if layout == "ring":
        views = ring_views(n_views, lay["radius"], lay["height"], intr)
    elif layout == "double-ring":
        views = double_ring_views(n_views, lay["radius"], lay["height"], intr)
    else:
        raise ValueError(f"layout must be 'ring' or 'double-ring', got {layout!r}")

    W, H = intr.width, intr.height
    us = np.linspace(margin * W, (1.0 - margin) * W, grid)
    vs = np.linspace(margin * H, (1.0 - margin) * H, grid)
    uu, vv = np.meshgrid(us, vs)
    pixels = np.stack([uu.ravel(), vv.ravel()], axis=1)  # (G, 2)
    G = pixels.shape[0]
    V = len(views)

    origins = np.stack([v.center for v in views], axis=0)
    ray_dirs = np.empty((V, G, 3))
    base = np.full((V, G), np.nan)
    valid = np.zeros((V, G), dtype=bool)
    for i, view in enumerate(views):
        K_inv = view.intrinsics.matrix_inv
        h = np.stack([pixels[:, 0], pixels[:, 1], np.ones(G)], axis=1)
        dirs = (K_inv @ h.T).T @ view.pose.R  # R^T k, row form
        ray_dirs[i] = dirs
        norms = np.linalg.norm(dirs, axis=1)
        t_euclid = gt.ray_hits(origins[i][None, :], dirs / norms[:, None])
        depth = t_euclid / norms  # projective depth along unnormalized dir
        hit = np.isfinite(depth) & (depth > DEPTH_EPSILON)
        base[i] = np.where(hit, depth, np.nan)
        valid[i] = hit

    rng = np.random.default_rng(seed)
    offsets = noise * rng.standard_normal((V, G))
    if view_bias != 0.0:
        phases = 2.0 * math.pi * np.arange(V) / V
        offsets += view_bias * np.sin(phases)[:, None]
    if outlier_fraction > 0.0 and outlier_scale != 0.0:
        flat_idx = np.flatnonzero(valid.ravel())
        n_out = int(round(outlier_fraction * flat_idx.size))
        if n_out > 0:
            chosen = rng.choice(flat_idx, size=n_out, replace=False)
            signs = rng.choice(np.array([-1.0, 1.0]), size=n_out)
            flat = offsets.ravel()
            flat[chosen] = outlier_scale * signs
            offsets = flat.reshape(V, G)
    offsets = np.where(valid, offsets, 0.0)

    R_all = np.stack([v.pose.R for v in views], axis=0)
    K_inv = intr.matrix_inv

    def base_lookup(view_indices: np.ndarray, uv: np.ndarray) -> np.ndarray:
        # True-surface projective depth at arbitrary pixels of the given views.
        vi = np.asarray(view_indices, dtype=np.int64)
        uv = np.asarray(uv, dtype=np.float64)
        bad = ~(np.isfinite(uv[:, 0]) & np.isfinite(uv[:, 1]))
        k0 = K_inv[0, 0] * np.where(bad, 0.0, uv[:, 0]) + K_inv[0, 2]
        k1 = K_inv[1, 1] * np.where(bad, 0.0, uv[:, 1]) + K_inv[1, 2]
        R = R_all[vi]
        dirs = np.stack(
            [
                R[:, 0, 0] * k0 + R[:, 1, 0] * k1 + R[:, 2, 0],
                R[:, 0, 1] * k0 + R[:, 1, 1] * k1 + R[:, 2, 1],
                R[:, 0, 2] * k0 + R[:, 1, 2] * k1 + R[:, 2, 2],
            ],
            axis=1,
        )
        norms = np.sqrt(dirs[:, 0] ** 2 + dirs[:, 1] ** 2 + dirs[:, 2] ** 2)
        t = gt.ray_hits(origins[vi], dirs / norms[:, None])
        return np.where(bad, np.nan, t / norms)

    surface = OptimizableSurface(
        views=views,
        pixels=pixels,
        grid_shape=(grid, grid),
        base_depths=base,
        offsets=offsets,
        valid=valid,
        ray_dirs=ray_dirs,
        origins=origins,
        dir_norms=np.linalg.norm(ray_dirs, axis=2),
        base_lookup=base_lookup,
    )
    return SyntheticScene(
        surface=surface, ground_truth=gt, views=views, kind=kind, noise=noise, seed=seed
    )


# ---------------------------------------------------------------------------
# Analytic rendering of ground truth (reference depth maps for fusion tests)
# ---------------------------------------------------------------------------


def analytic_depth_map(view: CameraView, gt: GroundTruthSurface) -> DepthNormalMap:
    """Ray-cast ground truth into a depth/normal map for one camera."""
    W, H = view.intrinsics.width, view.intrinsics.height
    px = np.arange(W) + 0.5
    py = np.arange(H) + 0.5
    uu, vv = np.meshgrid(px, py)
    h = np.stack([uu.ravel(), vv.ravel(), np.ones(W * H)], axis=1)
    dirs = (view.intrinsics.matrix_inv @ h.T).T @ view.pose.R
    norms = np.linalg.norm(dirs, axis=1)
    unit = dirs / norms[:, None]
    t = gt.ray_hits(view.center[None, :], unit)
    hit = np.isfinite(t)
    depth = np.where(hit, t / norms, np.nan).reshape(H, W)
    X = view.center[None, :] + np.where(hit, t, 0.0)[:, None] * unit
    n_world = gt.surface_normal(X)
    n_cam = n_world @ view.pose.R.T
    flip = np.sum(n_cam * (unit @ view.pose.R.T), axis=1) > 0.0
    n_cam = np.where(flip[:, None], -n_cam, n_cam)
    normal = np.where(hit[:, None], n_cam, np.nan).reshape(H, W, 3)
    alpha = hit.reshape(H, W).astype(np.float64)
    return DepthNormalMap(
        depth=depth,
        normal=normal,
        alpha=alpha,
        valid=alpha >= VALID_OPACITY,
        mode="intersection",
        view_id=view.view_id,
    )
