"""Multi-view linear triangulation via the direct linear transform.

Each contributing view adds two homogeneous constraint rows built from its
3x4 projection matrix P and an observed pixel (u', v'):

    u' * P[2, :] - P[0, :]
    v' * P[2, :] - P[1, :]

Rows are normalized to unit Euclidean length (so no view dominates through
matrix scale) and then multiplied by an optional per-view weight.  The
consensus point is the right singular vector of the stacked rows with the
smallest singular value, dehomogenized.

Observations default to projections of the query point itself, in which case
the system is exactly consistent; callers may pin any view to a fixed pixel
instead (that is how rendered depth from other views enters the system).

The batch path is elementwise throughout and accumulates normal matrices in a
fixed row order, so results are bitwise identical for any batch size, batch
composition, or worker-thread count.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .camera import (
    BehindCamera,
    CameraView,
    InsufficientViews,
    Observation,
    project_point,
)
from .linalg import DEFAULT_GAP_EPSILON, batch_min_right_singular_vectors

# |v_3| at or below this (for a unit homogeneous solution) marks a point at
# infinity; dehomogenization would be meaningless.
HOMOGENEITY_EPSILON = 1e-8

# Worker-thread count for batch triangulation; threads only partition the
# batch, they never change results.
THREADS_ENV_VAR = "TRIAGS_THREADS"

_ROW_NORM_FLOOR = 1e-300


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV_VAR, "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"{THREADS_ENV_VAR} must be a positive integer, got {raw!r}") from exc
    if n < 1:
        raise ValueError(f"{THREADS_ENV_VAR} must be a positive integer, got {n}")
    return n


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SurfacePoint:
    """A candidate surface point anchored to the pixel that produced it.

    Invariant (checked where the reference view is available): projecting
    ``position`` into the reference view reproduces ``pixel`` within 1e-9.
    """

    position: np.ndarray  # (3,) world
    reference_id: int
    pixel: tuple[float, float]  # (u_r, v_r) in the reference image
    depth: float  # projective depth that produced position

    def __post_init__(self):
        p = np.asarray(self.position, dtype=np.float64)
        if p.shape != (3,) or not np.all(np.isfinite(p)):
            raise ValueError("SurfacePoint.position must be a finite 3-vector")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "pixel", (float(self.pixel[0]), float(self.pixel[1])))


def surface_point_from_depth(view: CameraView, pixel, depth: float) -> SurfacePoint:
    """Build a SurfacePoint by backprojecting a pixel at a projective depth."""
    from .camera import backproject_pixel

    pos = backproject_pixel(view, pixel, depth)
    return SurfacePoint(
        position=pos, reference_id=view.view_id, pixel=(pixel[0], pixel[1]), depth=float(depth)
    )


@dataclass(frozen=True, eq=False)
class DltSystem:
    """Stacked DLT constraint rows for one point.

    ``A`` has two unit-normalized rows per contributing view, in the order of
    ``view_ids``.  Views whose projection fell behind the camera are recorded
    in ``dropped_view_ids`` rather than erroring.
    """

    A: np.ndarray  # (2k, 4)
    view_ids: list[int]
    observations: list[Observation]
    dropped_view_ids: list[int] = field(default_factory=list)


@dataclass(frozen=True, eq=False)
class ConsensusPoint:
    """Least-squares intersection of the observation rays.

    ``degenerate`` flags an ill-determined solution direction (near-closed
    spectral gap) or a point at infinity; it is a quality signal callers use
    to skip the point, not an error.  ``residual`` is the algebraic residual
    of the unit homogeneous solution, identical to ``sigma_min``.
    """

    point: np.ndarray  # (3,), NaN when at_infinity
    homogeneous: np.ndarray  # (4,), unit norm
    residual: float
    sigma_min: float
    spectral_gap: float
    sigma_max: float
    degenerate: bool
    at_infinity: bool
    view_ids: tuple[int, ...] = ()
    error: str | None = None


def _failed_point(msg: str) -> ConsensusPoint:
    return ConsensusPoint(
        point=np.full(3, np.nan),
        homogeneous=np.full(4, np.nan),
        residual=math.nan,
        sigma_min=math.nan,
        spectral_gap=math.nan,
        sigma_max=math.nan,
        degenerate=True,
        at_infinity=False,
        view_ids=(),
        error=msg,
    )


# ---------------------------------------------------------------------------
# Row assembly
# ---------------------------------------------------------------------------


def normalized_dlt_rows(
    projections: np.ndarray, pixels: np.ndarray, weights: np.ndarray | None = None
) -> np.ndarray:
    """Build unit-normalized, weighted DLT rows (batched).

    Args:
        projections: (B, N, 3, 4) or (N, 3, 4) projection matrices.
        pixels: (B, N, 2) pixel observations.
        weights: optional (B, N) nonnegative row weights (applied after
            normalization; weight 0 removes a view without reshaping).

    Returns:
        (B, 2N, 4) rows; view i occupies rows 2i (u-row) and 2i+1 (v-row).
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 3 or pixels.shape[2] != 2:
        raise ValueError(f"pixels must be (B, N, 2), got {pixels.shape}")
    B, N = pixels.shape[0], pixels.shape[1]
    P = np.asarray(projections, dtype=np.float64)
    if P.ndim == 3:
        P = np.broadcast_to(P[None], (B,) + P.shape)
    if P.shape != (B, N, 3, 4):
        raise ValueError(f"projections must be (B, N, 3, 4) or (N, 3, 4), got {P.shape}")

    u = pixels[:, :, 0:1]  # (B, N, 1)
    v = pixels[:, :, 1:2]
    row_u = u * P[:, :, 2, :] - P[:, :, 0, :]  # (B, N, 4)
    row_v = v * P[:, :, 2, :] - P[:, :, 1, :]

    rows = np.empty((B, 2 * N, 4))
    rows[:, 0::2, :] = row_u
    rows[:, 1::2, :] = row_v

    sq = rows * rows
    norm = np.sqrt(sq[:, :, 0] + sq[:, :, 1] + sq[:, :, 2] + sq[:, :, 3])
    rows = rows / np.maximum(norm, _ROW_NORM_FLOOR)[:, :, None]

    if weights is not None:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (B, N):
            raise ValueError(f"weights must be (B, N)={B, N}, got {w.shape}")
        if not np.all(np.isfinite(w)) or np.any(w < 0.0):
            raise ValueError("weights must be finite and nonnegative")
        rows = rows * np.repeat(w, 2, axis=1)[:, :, None]
    return rows


def assemble_dlt(
    point: SurfacePoint,
    views: list[CameraView],
    observations: dict[int, tuple[float, float]] | None = None,
) -> DltSystem:
    """Stack the two-row constraints of every view that sees the point.

    Each view's observed pixel defaults to the projection of the point
    itself; entries in ``observations`` (view id -> pixel) pin that view to a
    fixed pixel instead.  Views where the projection lands behind the camera
    are dropped and recorded.

    Raises:
        InsufficientViews: fewer than 2 views survive.
    """
    obs_map = observations or {}
    kept_views: list[CameraView] = []
    kept_obs: list[Observation] = []
    dropped: list[int] = []
    for view in views:
        pinned = obs_map.get(view.view_id)
        try:
            proj = project_point(view, point.position)
        except BehindCamera:
            dropped.append(view.view_id)
            continue
        if pinned is None:
            kept_obs.append(proj)
        else:
            kept_obs.append(Observation(u=float(pinned[0]), v=float(pinned[1]), s=proj.s))
        kept_views.append(view)
    if len(kept_views) < 2:
        raise InsufficientViews(
            f"DLT assembly needs at least 2 views in front of the point, kept {len(kept_views)}"
        )
    P = np.stack([v.P for v in kept_views], axis=0)
    uv = np.array([[o.u, o.v] for o in kept_obs])
    rows = normalized_dlt_rows(P[None], uv[None])[0]
    return DltSystem(
        A=rows,
        view_ids=[v.view_id for v in kept_views],
        observations=kept_obs,
        dropped_view_ids=dropped,
    )


# ---------------------------------------------------------------------------
# Solvers
# ---------------------------------------------------------------------------


def _solve_chunk(rows: np.ndarray, gap_epsilon: float, homogeneity_epsilon: float):
    v, sigma_min, gap, sigma_max, degen = batch_min_right_singular_vectors(
        rows, gap_epsilon=gap_epsilon
    )
    at_inf = np.abs(v[:, 3]) <= homogeneity_epsilon
    denom = np.where(at_inf, 1.0, v[:, 3])
    points = v[:, :3] / denom[:, None]
    points = np.where(at_inf[:, None], np.nan, points)
    return points, v, sigma_min, gap, sigma_max, degen, at_inf


@dataclass(frozen=True, eq=False)
class BatchTriangulation:
    """Array-level batched DLT solutions (one slot per input system)."""

    points: np.ndarray
    homogeneous: np.ndarray
    sigma_min: np.ndarray
    spectral_gap: np.ndarray
    sigma_max: np.ndarray
    degenerate: np.ndarray
    at_infinity: np.ndarray


def triangulate_pixel_batch(
    projections: np.ndarray,
    pixels: np.ndarray,
    weights: np.ndarray | None = None,
    *,
    gap_epsilon: float = DEFAULT_GAP_EPSILON,
    homogeneity_epsilon: float = HOMOGENEITY_EPSILON,
) -> BatchTriangulation:
    """Triangulate B points given raw per-view pixels, each with N views.

    Worker threads come from the TRIAGS_THREADS environment variable
    (default 1); they partition the batch and cannot affect any output bit.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 3 or pixels.shape[2] != 2:
        raise ValueError(f"pixels must be (B, N, 2), got {pixels.shape}")
    B, N = pixels.shape[0], pixels.shape[1]
    if N < 2:
        raise InsufficientViews(f"triangulation needs at least 2 views, got {N}")
    rows = normalized_dlt_rows(projections, pixels, weights)
    if not np.all(np.isfinite(rows)):
        raise ValueError("non-finite DLT rows; check projections and pixels")

    workers = thread_count()
    if workers == 1 or B < 2 * workers:
        parts = [_solve_chunk(rows, gap_epsilon, homogeneity_epsilon)]
    else:
        bounds = [(i * B) // workers for i in range(workers + 1)]
        chunks = [rows[a:b] for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(
                pool.map(lambda c: _solve_chunk(c, gap_epsilon, homogeneity_epsilon), chunks)
            )
    cat = [np.concatenate([p[i] for p in parts], axis=0) for i in range(7)]
    return BatchTriangulation(
        points=cat[0],
        homogeneous=cat[1],
        sigma_min=cat[2],
        spectral_gap=cat[3],
        sigma_max=cat[4],
        degenerate=cat[5],
        at_infinity=cat[6],
    )


def solve_consensus(
    system: DltSystem,
    *,
    gap_epsilon: float = DEFAULT_GAP_EPSILON,
    homogeneity_epsilon: float = HOMOGENEITY_EPSILON,
) -> ConsensusPoint:
    """Solve one assembled DLT system for its consensus point."""
    rows = np.asarray(system.A, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != 4 or rows.shape[0] < 4:
        raise ValueError(f"DltSystem.A must be (2k, 4) with k >= 2, got {rows.shape}")
    pts, v, s_min, gap, s_max, degen, at_inf = _solve_chunk(
        rows[None], gap_epsilon, homogeneity_epsilon
    )
    return ConsensusPoint(
        point=pts[0],
        homogeneous=v[0],
        residual=float(s_min[0]),
        sigma_min=float(s_min[0]),
        spectral_gap=float(gap[0]),
        sigma_max=float(s_max[0]),
        degenerate=bool(degen[0] or at_inf[0]),
        at_infinity=bool(at_inf[0]),
        view_ids=tuple(system.view_ids),
    )


def triangulate(
    views,
    observations,
    weights=None,
    *,
    gap_epsilon: float = DEFAULT_GAP_EPSILON,
    homogeneity_epsilon: float = HOMOGENEITY_EPSILON,
) -> ConsensusPoint:
    """Triangulate one point from explicit per-view pixel observations."""
    if len(views) != len(observations):
        raise ValueError("views and observations must have equal length")
    if len(views) < 2:
        raise InsufficientViews(f"triangulation needs at least 2 views, got {len(views)}")
    P = np.stack([v.P for v in views], axis=0)
    uv = np.empty((len(observations), 2))
    for i, obs in enumerate(observations):
        if hasattr(obs, "u"):
            uv[i, 0], uv[i, 1] = obs.u, obs.v
        else:
            uv[i, 0], uv[i, 1] = obs[0], obs[1]
    w = None if weights is None else np.asarray(weights, dtype=np.float64)[None, :]
    b = triangulate_pixel_batch(
        P[None], uv[None], w, gap_epsilon=gap_epsilon, homogeneity_epsilon=homogeneity_epsilon
    )
    return ConsensusPoint(
        point=b.points[0],
        homogeneous=b.homogeneous[0],
        residual=float(b.sigma_min[0]),
        sigma_min=float(b.sigma_min[0]),
        spectral_gap=float(b.spectral_gap[0]),
        sigma_max=float(b.sigma_max[0]),
        degenerate=bool(b.degenerate[0] or b.at_infinity[0]),
        at_infinity=bool(b.at_infinity[0]),
        view_ids=tuple(v.view_id for v in views),
    )


def batch_triangulate(
    points: list[SurfacePoint],
    views: list[CameraView],
    *,
    observations: list[dict[int, tuple[float, float]] | None] | None = None,
    batch_size: int = 64,
    gap_epsilon: float = DEFAULT_GAP_EPSILON,
    homogeneity_epsilon: float = HOMOGENEITY_EPSILON,
) -> list[ConsensusPoint]:
    """Solve many points against a shared view list.

    Per-point failures (e.g. behind every camera) fill their slot with an
    error-carrying result instead of aborting the batch.  Output order matches
    input order and is bitwise independent of ``batch_size``.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    systems: list[DltSystem | None] = []
    errors: dict[int, str] = {}
    for i, pt in enumerate(points):
        obs = observations[i] if observations is not None else None
        try:
            systems.append(assemble_dlt(pt, views, obs))
        except InsufficientViews as exc:
            systems.append(None)
            errors[i] = str(exc)

    results: list[ConsensusPoint | None] = [None] * len(points)
    # Group by row count so each group stacks into one rectangular batch;
    # per-point arithmetic is identical regardless of grouping.
    by_rows: dict[int, list[int]] = {}
    for i, sys_i in enumerate(systems):
        if sys_i is None:
            results[i] = _failed_point(errors[i])
        else:
            by_rows.setdefault(sys_i.A.shape[0], []).append(i)

    for _, idxs in sorted(by_rows.items()):
        for start in range(0, len(idxs), batch_size):
            part = idxs[start : start + batch_size]
            rows = np.stack([systems[i].A for i in part], axis=0)
            pts, v, s_min, gap, s_max, degen, at_inf = _solve_chunk(
                rows, gap_epsilon, homogeneity_epsilon
            )
            for j, i in enumerate(part):
                results[i] = ConsensusPoint(
                    point=pts[j],
                    homogeneous=v[j],
                    residual=float(s_min[j]),
                    sigma_min=float(s_min[j]),
                    spectral_gap=float(gap[j]),
                    sigma_max=float(s_max[j]),
                    degenerate=bool(degen[j] or at_inf[j]),
                    at_infinity=bool(at_inf[j]),
                    view_ids=tuple(systems[i].view_ids),
                )
    return results  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# Derivative-free oracle, fully independent of the Jacobi eigensolver
# ---------------------------------------------------------------------------


def _nm_unit_sphere(func, dim: int, restarts: int, iterations: int, seed: int):
    """Multi-start Nelder-Mead over unit directions, all restarts in lockstep.

    ``func`` maps (R, dim) row vectors to (R,) values and must be scale
    invariant (it normalizes rows internally); returns the best direction and
    value across restarts.
    """
    rng = np.random.default_rng(seed)
    base = rng.standard_normal((restarts, dim))
    base[: min(dim, restarts)] = np.eye(dim)[: min(dim, restarts)]
    base /= np.linalg.norm(base, axis=1, keepdims=True)
    # Initial simplexes: base point plus small perturbations along each axis.
    simplex = np.repeat(base[:, None, :], dim + 1, axis=1)
    for d in range(dim):
        simplex[:, d + 1, d] += 0.25
    vals = np.stack([func(simplex[:, j, :]) for j in range(dim + 1)], axis=1)

    alpha, gamma, rho, shrink = 1.0, 2.0, 0.5, 0.5
    R = restarts
    ar = np.arange(R)
    for _ in range(iterations):
        order = np.argsort(vals, axis=1, kind="stable")
        vals = np.take_along_axis(vals, order, axis=1)
        simplex = simplex[ar[:, None], order, :]
        if float(np.max(vals[:, -1] - vals[:, 0])) < 1e-15:
            break
        centroid = np.mean(simplex[:, :-1, :], axis=1)
        worst = simplex[:, -1, :]
        refl = centroid + alpha * (centroid - worst)
        f_refl = func(refl)

        better_than_best = f_refl < vals[:, 0]
        exp = centroid + gamma * (refl - centroid)
        f_exp = np.where(better_than_best, func(exp), np.inf)
        use_exp = better_than_best & (f_exp < f_refl)

        accept_refl = (~better_than_best) & (f_refl < vals[:, -2])
        # Contraction: outside if reflection beats the worst, else inside.
        outside = f_refl < vals[:, -1]
        con = np.where(
            outside[:, None], centroid + rho * (refl - centroid), centroid - rho * (refl - centroid)
        )
        f_con = func(con)
        f_cmp = np.where(outside, f_refl, vals[:, -1])
        accept_con = (~better_than_best) & (~accept_refl) & (f_con <= f_cmp)

        new_worst = np.where(
            use_exp[:, None],
            exp,
            np.where(
                (better_than_best & ~use_exp)[:, None] | accept_refl[:, None],
                refl,
                np.where(accept_con[:, None], con, worst),
            ),
        )
        new_f = np.where(
            use_exp,
            f_exp,
            np.where(
                (better_than_best & ~use_exp) | accept_refl,
                f_refl,
                np.where(accept_con, f_con, vals[:, -1]),
            ),
        )
        do_shrink = ~(use_exp | (better_than_best & ~use_exp) | accept_refl | accept_con)
        simplex[:, -1, :] = new_worst
        vals[:, -1] = new_f
        if np.any(do_shrink):
            best = simplex[:, 0:1, :]
            shrunk = best + shrink * (simplex[:, 1:, :] - best)
            mask = do_shrink[:, None, None]
            simplex[:, 1:, :] = np.where(mask, shrunk, simplex[:, 1:, :])
            for j in range(1, dim + 1):
                vj = func(simplex[:, j, :])
                vals[:, j] = np.where(do_shrink, vj, vals[:, j])

    order = np.argsort(vals, axis=1, kind="stable")
    vals = np.take_along_axis(vals, order, axis=1)
    simplex = simplex[ar[:, None], order, :]
    k = int(np.argmin(vals[:, 0]))
    x = simplex[k, 0, :]
    return x / np.linalg.norm(x), float(vals[k, 0])


def triangulate_oracle(
    system: DltSystem,
    *,
    restarts: int = 64,
    iterations: int = 600,
    seed: int = 0,
    gap_epsilon: float = DEFAULT_GAP_EPSILON,
    homogeneity_epsilon: float = HOMOGENEITY_EPSILON,
) -> ConsensusPoint:
    """Derivative-free reference solver for a DLT system.

    Minimizes ||A x|| over unit 4-vectors with multi-start Nelder-Mead, then
    estimates the second singular value the same way on the orthogonal
    complement of the minimizer.  Shares no code with the Jacobi eigensolver,
    so agreement between the two is evidence, not tautology.
    """
    A = np.asarray(system.A, dtype=np.float64)

    def f4(Y: np.ndarray) -> np.ndarray:
        X = Y / np.maximum(np.linalg.norm(Y, axis=1, keepdims=True), 1e-300)
        return np.linalg.norm(X @ A.T, axis=1)

    v1, s1 = _nm_unit_sphere(f4, 4, restarts, iterations, seed)

    # Orthonormal basis Q of the complement of v1; sigma_2 = min ||A Q y||.
    M = np.eye(4) - np.outer(v1, v1)
    q, _ = np.linalg.qr(M)
    # Columns of q span R^4; drop the one most aligned with v1.
    align = np.abs(q.T @ v1)
    keep = np.argsort(align, kind="stable")[:3]
    Q = q[:, np.sort(keep)]
    AQ = A @ Q

    def f3(Y: np.ndarray) -> np.ndarray:
        X = Y / np.maximum(np.linalg.norm(Y, axis=1, keepdims=True), 1e-300)
        return np.linalg.norm(X @ AQ.T, axis=1)

    _, s2 = _nm_unit_sphere(f3, 3, restarts, iterations, seed + 1)

    sigma_max = float(np.linalg.norm(A, ord=2))
    significant = np.nonzero(np.abs(v1) > 1e-12)[0]
    if significant.size and v1[significant[-1]] < 0:
        v1 = -v1
    at_inf = abs(v1[3]) <= homogeneity_epsilon
    point = np.full(3, np.nan) if at_inf else v1[:3] / v1[3]
    gap = max(s2 - s1, 0.0)
    return ConsensusPoint(
        point=point,
        homogeneous=v1,
        residual=s1,
        sigma_min=s1,
        spectral_gap=gap,
        sigma_max=sigma_max,
        degenerate=bool(gap <= gap_epsilon * sigma_max or at_inf),
        at_infinity=bool(at_inf),
        view_ids=tuple(system.view_ids),
    )


def reprojection_residuals(views, point: np.ndarray, observations) -> np.ndarray:
    """Per-view Euclidean pixel residuals of a world point, for diagnostics."""
    out = np.empty(len(views))
    X = np.asarray(point, dtype=np.float64)
    for i, (view, obs) in enumerate(zip(views, observations)):
        proj = project_point(view, X)
        ou, ov = (obs.u, obs.v) if hasattr(obs, "u") else (obs[0], obs[1])
        out[i] = math.hypot(proj.u - ou, proj.v - ov)
    return out
