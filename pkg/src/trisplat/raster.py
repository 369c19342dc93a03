"""Software rasterizer producing consistent per-pixel depth and normal maps.

Gaussians are composited front-to-back in order of center view-space z.  Two
depth modes exist:

* ``blended``: each Gaussian contributes its center depth (the classic
  alpha-blended depth estimate, which smears depth across the footprint), and
* ``intersection``: each Gaussian contributes the depth of the max-density
  point along the pixel's ray, computed in closed form from the ray-space
  Gaussian, which keeps depths on the primitive's supporting plane.

Accumulated depth and normals are normalized by accumulated opacity so a
single opaque splat reports its own depth rather than an opacity-faded copy;
the accumulated-opacity channel itself keeps the raw telescoping product.
Pixel (ix, iy) is sampled at continuous image coordinates (ix + 0.5, iy + 0.5).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import CameraView
from .gaussians import BehindCamera, GaussianPrimitive, to_ray_space

# Compositing constants: transmittance early-stop, per-splat opacity floor,
# and the accumulated opacity a pixel needs before its depth is trusted.
TRANSMITTANCE_STOP = 1e-4
OPACITY_FLOOR = 1.0 / 255.0
VALID_OPACITY = 0.5

# Footprint cutoff in 2-D standard deviations; exp(-0.5 * 3.4^2) is already
# below the opacity floor for any opacity <= 1.
_FOOTPRINT_SIGMAS = 3.4

RENDER_MODES = ("intersection", "blended")


@dataclass(frozen=True, eq=False)
class DepthNormalMap:
    """Per-pixel rendering output for one camera.

    depth: (H, W) projective depth; NaN where nothing accumulated.
    normal: (H, W, 3) unit camera-frame normals, front-facing (n . ray < 0);
        NaN where nothing accumulated.
    alpha: (H, W) accumulated opacity, 1 - prod(1 - alpha_i).
    valid: (H, W) bool, alpha >= VALID_OPACITY.
    """

    depth: np.ndarray
    normal: np.ndarray
    alpha: np.ndarray
    valid: np.ndarray
    mode: str
    view_id: int


def render_depth_normal(
    view: CameraView,
    gaussians: list[GaussianPrimitive],
    mode: str = "intersection",
) -> DepthNormalMap:
    """Rasterize depth/normal maps for one view.

    Args:
        view: the camera; its intrinsics fix the output resolution.
        gaussians: scene primitives (any behind the camera are skipped).
        mode: "intersection" or "blended".
    """
    if mode not in RENDER_MODES:
        raise ValueError(f"render mode must be one of {RENDER_MODES}, got {mode!r}")
    W, H = view.intrinsics.width, view.intrinsics.height
    T = np.ones((H, W))
    depth_acc = np.zeros((H, W))
    normal_acc = np.zeros((H, W, 3))

    splats = []
    for g in gaussians:
        try:
            splats.append((to_ray_space(view, g), g.opacity))
        except BehindCamera:
            continue
    splats.sort(key=lambda e: e[0].z_center)

    intr = view.intrinsics
    for rsg, opacity in splats:
        if not np.any(T > TRANSMITTANCE_STOP):
            break
        cov2 = rsg.cov[:2, :2]
        det = cov2[0, 0] * cov2[1, 1] - cov2[0, 1] * cov2[1, 0]
        if det <= 0.0:
            continue
        sigma_max = np.sqrt(
            0.5 * (cov2[0, 0] + cov2[1, 1])
            + np.sqrt(max(0.25 * (cov2[0, 0] - cov2[1, 1]) ** 2 + cov2[0, 1] ** 2, 0.0))
        )
        radius = _FOOTPRINT_SIGMAS * sigma_max
        uc, vc = rsg.center[0], rsg.center[1]
        x0 = max(int(np.floor(uc - radius - 0.5)), 0)
        x1 = min(int(np.ceil(uc + radius - 0.5)) + 1, W)
        y0 = max(int(np.floor(vc - radius - 0.5)), 0)
        y1 = min(int(np.ceil(vc + radius - 0.5)) + 1, H)
        if x0 >= x1 or y0 >= y1:
            continue

        px = np.arange(x0, x1) + 0.5
        py = np.arange(y0, y1) + 0.5
        du = uc - px[None, :]  # center minus pixel, matching q_hat's convention
        dv = vc - py[:, None]
        inv00 = cov2[1, 1] / det
        inv11 = cov2[0, 0] / det
        inv01 = -cov2[0, 1] / det
        m2 = inv00 * du * du + 2.0 * inv01 * du * dv + inv11 * dv * dv
        alpha_i = opacity * np.exp(-0.5 * m2)

        T_blk = T[y0:y1, x0:x1]
        live = (alpha_i >= OPACITY_FLOOR) & (T_blk > TRANSMITTANCE_STOP)
        if not np.any(live):
            continue
        w = np.where(live, T_blk * alpha_i, 0.0)

        if mode == "blended":
            d = rsg.z_center
            depth_acc[y0:y1, x0:x1] += w * d
        else:
            t_star = rsg.q_hat[0] * du + rsg.q_hat[1] * dv + rsg.q_hat[2] * rsg.center[2]
            # Per-pixel angle: t_star is Euclidean ray distance; projecting
            # onto the principal axis with the center's angle would bend the
            # reconstructed points off the primitive's plane at the footprint
            # rim, so the conversion uses each pixel's own ray angle.
            xdir = (px[None, :] - intr.cx) / intr.fx
            ydir = (py[:, None] - intr.cy) / intr.fy
            cos_pixel = 1.0 / np.sqrt(1.0 + xdir * xdir + ydir * ydir)
            depth_acc[y0:y1, x0:x1] += w * (t_star * cos_pixel)

        n_cam = rsg.normal_cam
        center_dir = np.array([(uc - intr.cx) / intr.fx, (vc - intr.cy) / intr.fy, 1.0])
        if np.dot(n_cam, center_dir) > 0.0:
            n_cam = -n_cam
        normal_acc[y0:y1, x0:x1, :] += w[:, :, None] * n_cam[None, None, :]

        T[y0:y1, x0:x1] = np.where(live, T_blk * (1.0 - alpha_i), T_blk)

    alpha = 1.0 - T
    valid = alpha >= VALID_OPACITY
    covered = alpha > 0.0
    safe_alpha = np.where(covered, alpha, 1.0)
    depth = np.where(covered, depth_acc / safe_alpha, np.nan)
    nrm = np.linalg.norm(normal_acc, axis=2)
    safe_nrm = np.where(nrm > 0.0, nrm, 1.0)
    normal = np.where(
        (covered & (nrm > 0.0))[:, :, None], normal_acc / safe_nrm[:, :, None], np.nan
    )
    return DepthNormalMap(
        depth=depth, normal=normal, alpha=alpha, valid=valid, mode=mode, view_id=view.view_id
    )


# ---------------------------------------------------------------------------
# Map export: flat little-endian float32 with a (width, height, channels)
# uint32 header, plus 8-bit PGM previews for eyeballing.
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<III")


def save_map_binary(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.ndim == 2:
        h, w, c = arr.shape[0], arr.shape[1], 1
    elif arr.ndim == 3:
        h, w, c = arr.shape
    else:
        raise ValueError(f"map arrays must be (H, W) or (H, W, C), got {arr.shape}")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(w, h, c))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_map_binary(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    w, h, c = _HEADER.unpack_from(raw, 0)
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).astype(np.float64)
    if data.size != w * h * c:
        raise ValueError(f"{path}: payload size does not match header {w}x{h}x{c}")
    arr = data.reshape(h, w, c)
    return arr[:, :, 0] if c == 1 else arr


def save_pgm(path, array: np.ndarray) -> None:
    """8-bit binary PGM preview; non-finite pixels map to 0, data to 1..255."""
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("PGM preview expects a 2-D array")
    finite = np.isfinite(arr)
    out = np.zeros(arr.shape, dtype=np.uint8)
    if np.any(finite):
        lo = float(arr[finite].min())
        hi = float(arr[finite].max())
        span = hi - lo if hi > lo else 1.0
        scaled = (arr - lo) / span * 254.0 + 1.0
        out[finite] = np.clip(scaled[finite], 1, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        f.write(out.tobytes())
