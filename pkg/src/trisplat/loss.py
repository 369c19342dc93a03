"""Consistency loss between rendered surface points and their re-triangulation.

For each surface point X_r the engine projects it into its contributing
views, assembles the DLT system, solves for the consensus point X*, and
penalizes the geometric residual ||X_r - X*||.  Views may be pinned to fixed
("frozen") pixel observations; those rows are constants of the optimization,
which is how depth estimates rendered from other views enter the system.
Unpinned ("live") views re-project X_r itself, so their rows move with it.

The robust penalty is the Geman-McClure function r^2 / (r^2 + sigma^2): small
residuals behave like a scaled L2 loss, large ones saturate below 1 so a few
gross outliers cannot dominate.  sigma follows an exponential annealing
schedule after a warm-up phase.

Gradients with respect to X_r flow through two paths: the residual term
directly, and (optionally) the dependence of X* on X_r via the live
projections, the stacked rows, and the minimal eigenvector of A^T A.  The
eigenvector path uses implicit differentiation,

    dv = (lambda_min I - M)^+ (dM) v,

evaluated with the already-computed spectral factorization of M.  Points with
a degenerate spectrum or a solution at infinity contribute exactly zero loss
and gradient.  All reductions are fixed-order, so results are deterministic
and independent of how the batch is sliced.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .camera import DEPTH_EPSILON, CameraView
from .linalg import DEFAULT_GAP_EPSILON, accumulate_normal_matrices, jacobi_eigh4
from .triangulate import HOMOGENEITY_EPSILON, SurfacePoint

_PINV_EPS = 1e-12

LOSS_KINDS = ("geman_mcclure", "l2")


class EmptyBatch(Exception):
    """Every point in the batch was degenerate or unconstrained."""


@dataclass(frozen=True)
class RobustLossConfig:
    """Annealing schedule for the robust scale sigma.

    sigma stays at ``sigma0`` for ``warmup_iterations``, then decays
    exponentially to ``sigma_end`` at ``total_iterations``.
    """

    sigma0: float
    sigma_end: float
    total_iterations: int
    warmup_iterations: int

    def __post_init__(self):
        if not (self.sigma0 > 0.0 and math.isfinite(self.sigma0)):
            raise ValueError(f"sigma0 must be positive and finite, got {self.sigma0}")
        if not (self.sigma_end > 0.0 and math.isfinite(self.sigma_end)):
            raise ValueError(f"sigma_end must be positive and finite, got {self.sigma_end}")
        if self.sigma_end > self.sigma0:
            raise ValueError("sigma_end must not exceed sigma0")
        if self.total_iterations <= 0:
            raise ValueError("total_iterations must be positive")
        if not 0 <= self.warmup_iterations < self.total_iterations:
            raise ValueError("warmup_iterations must satisfy 0 <= warmup < total")


def sigma_schedule(config: RobustLossConfig, iteration: int) -> float:
    """Exponential decay from sigma0 to sigma_end after the warm-up."""
    if iteration < 0:
        raise ValueError(f"iteration must be nonnegative, got {iteration}")
    if iteration <= config.warmup_iterations:
        return config.sigma0
    if iteration >= config.total_iterations:
        return config.sigma_end
    frac = (iteration - config.warmup_iterations) / (
        config.total_iterations - config.warmup_iterations
    )
    return config.sigma0 * (config.sigma_end / config.sigma0) ** frac


def geman_mcclure(r_sq, sigma: float):
    """Robust penalty r^2 / (r^2 + sigma^2); in [0, 1), increasing in r^2."""
    r_sq = np.asarray(r_sq, dtype=np.float64)
    if np.any(r_sq < 0.0):
        raise ValueError("squared residuals must be nonnegative")
    if not sigma > 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    out = r_sq / (r_sq + sigma * sigma)
    return float(out) if out.ndim == 0 else out


def geman_mcclure_weight(r_sq, sigma: float):
    """d(geman_mcclure)/d(r^2) = sigma^2 / (r^2 + sigma^2)^2."""
    r_sq = np.asarray(r_sq, dtype=np.float64)
    denom = r_sq + sigma * sigma
    out = (sigma * sigma) / (denom * denom)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class LossAndGradient:
    """Aggregate loss with per-point diagnostics.

    ``loss`` sums per-point values over valid points; ``mean_loss`` divides by
    the valid count (what the optimizer steps on, so the scale does not depend
    on resolution).  Invalid points carry zero gradient and NaN residual.
    """

    loss: float
    mean_loss: float
    gradients: np.ndarray  # (B, 3), zero where invalid
    residuals: np.ndarray  # (B,) ||X_r - X*||, NaN where invalid
    per_point_loss: np.ndarray  # (B,), zero where invalid
    consensus: np.ndarray  # (B, 3) X*, NaN where invalid
    valid: np.ndarray  # (B,) bool
    n_valid: int
    sigma_min: np.ndarray  # (B,)
    spectral_gap: np.ndarray  # (B,)


def consensus_loss_batch(
    projections: np.ndarray,
    points: np.ndarray,
    sigma: float,
    *,
    frozen_pixels: np.ndarray | None = None,
    view_mask: np.ndarray | None = None,
    kind: str = "geman_mcclure",
    differentiate_consensus: bool = True,
    gap_epsilon: float = DEFAULT_GAP_EPSILON,
    homogeneity_epsilon: float = HOMOGENEITY_EPSILON,
) -> LossAndGradient:
    """Evaluate the consensus loss and its gradient for a batch of points.

    Args:
        projections: (N, 3, 4) shared or (B, N, 3, 4) per-point projection
            matrices.
        points: (B, 3) current surface points X_r.
        sigma: robust scale (ignored for kind="l2").
        frozen_pixels: optional (B, N, 2); finite entries pin that view to a
            fixed pixel, NaN entries mean the view re-projects X_r (live).
        view_mask: optional (B, N) bool; False removes that view from that
            point's system entirely (e.g. a failed depth lookup).
        kind: "geman_mcclure" or "l2".
        differentiate_consensus: include the dX*/dX_r path (live views only;
            frozen rows are constants by definition).

    Raises:
        EmptyBatch: no point had >= 2 usable views and a non-degenerate solve.
    """
    if kind not in LOSS_KINDS:
        raise ValueError(f"kind must be one of {LOSS_KINDS}, got {kind!r}")
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != 3:
        raise ValueError(f"points must be (B, 3), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("points contain non-finite entries")
    B = X.shape[0]
    P = np.asarray(projections, dtype=np.float64)
    if P.ndim == 3:
        P = np.broadcast_to(P[None], (B,) + P.shape)
    if P.ndim != 4 or P.shape[0] != B or P.shape[2:] != (3, 4):
        raise ValueError(f"projections must be (N, 3, 4) or (B, N, 3, 4), got {P.shape}")
    N = P.shape[1]
    if kind == "geman_mcclure" and not sigma > 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")

    if frozen_pixels is None:
        pinned = np.zeros((B, N), dtype=bool)
        pin_uv = np.zeros((B, N, 2))
    else:
        fp = np.asarray(frozen_pixels, dtype=np.float64)
        if fp.shape != (B, N, 2):
            raise ValueError(f"frozen_pixels must be (B, N, 2), got {fp.shape}")
        pinned = np.isfinite(fp[:, :, 0]) & np.isfinite(fp[:, :, 1])
        pin_uv = np.where(pinned[:, :, None], np.nan_to_num(fp, nan=0.0), 0.0)

    x, y, z = X[:, 0:1], X[:, 1:2], X[:, 2:3]
    a0 = P[:, :, 0, 0] * x + P[:, :, 0, 1] * y + P[:, :, 0, 2] * z + P[:, :, 0, 3]
    a1 = P[:, :, 1, 0] * x + P[:, :, 1, 1] * y + P[:, :, 1, 2] * z + P[:, :, 1, 3]
    s = P[:, :, 2, 0] * x + P[:, :, 2, 1] * y + P[:, :, 2, 2] * z + P[:, :, 2, 3]
    in_front = s > DEPTH_EPSILON
    s_safe = np.where(in_front, s, 1.0)
    u_live = np.where(in_front, a0 / s_safe, 0.0)
    v_live = np.where(in_front, a1 / s_safe, 0.0)

    # A view contributes if pinned (the pixel is data) or live and in front,
    # and not masked out by the caller.
    use = pinned | in_front
    if view_mask is not None:
        vm = np.asarray(view_mask, dtype=bool)
        if vm.shape != (B, N):
            raise ValueError(f"view_mask must be (B, N)={B, N}, got {vm.shape}")
        use = use & vm
    w = use.astype(np.float64)
    u_obs = np.where(pinned, pin_uv[:, :, 0], u_live)
    v_obs = np.where(pinned, pin_uv[:, :, 1], v_live)

    # Unit-normalized, weighted rows; view i occupies rows 2i and 2i+1.
    row_u_raw = u_obs[:, :, None] * P[:, :, 2, :] - P[:, :, 0, :]
    row_v_raw = v_obs[:, :, None] * P[:, :, 2, :] - P[:, :, 1, :]
    raw = np.empty((B, 2 * N, 4))
    raw[:, 0::2, :] = row_u_raw
    raw[:, 1::2, :] = row_v_raw
    sq = raw * raw
    norms = np.sqrt(sq[:, :, 0] + sq[:, :, 1] + sq[:, :, 2] + sq[:, :, 3])
    norms = np.maximum(norms, 1e-300)
    unit = raw / norms[:, :, None]
    w2 = np.repeat(w, 2, axis=1)
    rows = unit * w2[:, :, None]

    M = accumulate_normal_matrices(rows)
    vals, V = jacobi_eigh4(M)
    v = V[:, :, 0]
    lam0 = vals[:, 0]
    sigmas = np.sqrt(np.maximum(vals, 0.0))
    sigma_min = sigmas[:, 0]
    gap = sigmas[:, 1] - sigmas[:, 0]
    sigma_max = sigmas[:, 3]
    degenerate = gap <= gap_epsilon * sigma_max
    at_inf = np.abs(v[:, 3]) <= homogeneity_epsilon
    n_views = np.sum(w, axis=1)
    valid = (n_views >= 2.0) & ~degenerate & ~at_inf

    v3 = np.where(at_inf, 1.0, v[:, 3])
    Xstar = v[:, :3] / v3[:, None]
    rho = X - Xstar
    r_sq = rho[:, 0] ** 2 + rho[:, 1] ** 2 + rho[:, 2] ** 2

    if kind == "geman_mcclure":
        per_loss = r_sq / (r_sq + sigma * sigma)
        w_r = (sigma * sigma) / (r_sq + sigma * sigma) ** 2
    else:
        per_loss = r_sq
        w_r = np.ones_like(r_sq)
    per_loss = np.where(valid, per_loss, 0.0)
    w_r = np.where(valid, w_r, 0.0)

    grads = 2.0 * w_r[:, None] * rho
    if differentiate_consensus:
        # Implicit differentiation of the minimal eigenvector, one forward
        # pass per world coordinate.  Only live rows carry tangents.
        live_w = np.where(pinned, 0.0, w)
        d = lam0[:, None] - vals
        eps = _PINV_EPS * np.maximum(1.0, np.maximum(np.abs(lam0), np.abs(vals[:, 3])))
        g_scale = np.where(np.abs(d) > eps[:, None], 1.0 / np.where(d == 0.0, 1.0, d), 0.0)
        for m in range(3):
            ds = P[:, :, 2, m]
            du = np.where(in_front, (P[:, :, 0, m] - u_live * ds) / s_safe, 0.0) * live_w
            dv_pix = np.where(in_front, (P[:, :, 1, m] - v_live * ds) / s_safe, 0.0) * live_w
            draw = np.empty((B, 2 * N, 4))
            draw[:, 0::2, :] = du[:, :, None] * P[:, :, 2, :]
            draw[:, 1::2, :] = dv_pix[:, :, None] * P[:, :, 2, :]
            # Tangent of row normalization and weighting.
            dot = (
                unit[:, :, 0] * draw[:, :, 0]
                + unit[:, :, 1] * draw[:, :, 1]
                + unit[:, :, 2] * draw[:, :, 2]
                + unit[:, :, 3] * draw[:, :, 3]
            )
            drows = (draw - unit * dot[:, :, None]) / norms[:, :, None] * w2[:, :, None]
            dM = np.zeros((B, 4, 4))
            for j in range(2 * N):
                r_j = rows[:, j, :]
                dr_j = drows[:, j, :]
                dM += dr_j[:, :, None] * r_j[:, None, :] + r_j[:, :, None] * dr_j[:, None, :]
            yv = np.zeros((B, 4))
            for i in range(4):
                yv[:, i] = (
                    dM[:, i, 0] * v[:, 0]
                    + dM[:, i, 1] * v[:, 1]
                    + dM[:, i, 2] * v[:, 2]
                    + dM[:, i, 3] * v[:, 3]
                )
            ty = np.zeros((B, 4))
            for i in range(4):
                ty[:, i] = (
                    V[:, 0, i] * yv[:, 0]
                    + V[:, 1, i] * yv[:, 1]
                    + V[:, 2, i] * yv[:, 2]
                    + V[:, 3, i] * yv[:, 3]
                )
            ty = ty * g_scale
            dv = np.zeros((B, 4))
            for i in range(4):
                dv[:, i] = (
                    V[:, i, 0] * ty[:, 0]
                    + V[:, i, 1] * ty[:, 1]
                    + V[:, i, 2] * ty[:, 2]
                    + V[:, i, 3] * ty[:, 3]
                )
            dXstar = (dv[:, :3] - Xstar * dv[:, 3:4]) / v3[:, None]
            rho_dot = (
                rho[:, 0] * dXstar[:, 0] + rho[:, 1] * dXstar[:, 1] + rho[:, 2] * dXstar[:, 2]
            )
            grads[:, m] -= 2.0 * w_r * rho_dot

    grads = np.where(valid[:, None], grads, 0.0)
    residuals = np.where(valid, np.sqrt(r_sq), np.nan)
    consensus = np.where(valid[:, None], Xstar, np.nan)
    n_valid = int(np.sum(valid))
    if n_valid == 0:
        raise EmptyBatch("no point in the batch produced a usable consensus solve")
    total = float(np.sum(per_loss))
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError("non-finite gradient; this is a bug, please report")
    return LossAndGradient(
        loss=total,
        mean_loss=total / n_valid,
        gradients=grads,
        residuals=residuals,
        per_point_loss=per_loss,
        consensus=consensus,
        valid=valid,
        n_valid=n_valid,
        sigma_min=sigma_min,
        spectral_gap=gap,
    )


def _points_to_arrays(points: list[SurfacePoint], views: list[CameraView], observations):
    P = np.stack([v.P for v in views], axis=0)
    X = np.stack([p.position for p in points], axis=0)
    frozen = np.full((len(points), len(views), 2), np.nan)
    if observations is not None:
        if len(observations) != len(points):
            raise ValueError("observations list must match points list")
        id_to_col = {v.view_id: i for i, v in enumerate(views)}
        for b, obs in enumerate(observations):
            if not obs:
                continue
            for vid, uv in obs.items():
                frozen[b, id_to_col[vid], 0] = uv[0]
                frozen[b, id_to_col[vid], 1] = uv[1]
    return P, X, frozen


def tggc_loss_and_grad(
    points: list[SurfacePoint],
    views: list[CameraView],
    sigma: float,
    differentiate_consensus: bool = True,
    observations: list[dict[int, tuple[float, float]] | None] | None = None,
    *,
    gap_epsilon: float = DEFAULT_GAP_EPSILON,
    homogeneity_epsilon: float = HOMOGENEITY_EPSILON,
) -> LossAndGradient:
    """Robust consensus loss for a list of surface points against shared views.

    ``observations[b]`` optionally maps view id -> frozen pixel for point b;
    views without an entry re-project the point itself.
    """
    if not points:
        raise EmptyBatch("empty point list")
    P, X, frozen = _points_to_arrays(points, views, observations)
    return consensus_loss_batch(
        P,
        X,
        sigma,
        frozen_pixels=frozen,
        kind="geman_mcclure",
        differentiate_consensus=differentiate_consensus,
        gap_epsilon=gap_epsilon,
        homogeneity_epsilon=homogeneity_epsilon,
    )


def l2_loss_and_grad(
    points: list[SurfacePoint],
    views: list[CameraView],
    differentiate_consensus: bool = True,
    observations: list[dict[int, tuple[float, float]] | None] | None = None,
    *,
    gap_epsilon: float = DEFAULT_GAP_EPSILON,
    homogeneity_epsilon: float = HOMOGENEITY_EPSILON,
) -> LossAndGradient:
    """Unrobust variant: per-point loss ||X_r - X*||^2, gradient unbounded."""
    if not points:
        raise EmptyBatch("empty point list")
    P, X, frozen = _points_to_arrays(points, views, observations)
    return consensus_loss_batch(
        P,
        X,
        1.0,
        frozen_pixels=frozen,
        kind="l2",
        differentiate_consensus=differentiate_consensus,
        gap_epsilon=gap_epsilon,
        homogeneity_epsilon=homogeneity_epsilon,
    )


# ---------------------------------------------------------------------------
# Finite-difference validation harness
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FiniteDiffReport:
    max_rel_error: float
    rows: list[tuple[int, int, float, float, float]]  # (point, coord, analytic, numeric, rel)


def finite_diff_check(loss_fn, points0: np.ndarray, step: float) -> FiniteDiffReport:
    """Compare analytic gradients against central finite differences.

    Args:
        loss_fn: maps an (B, 3) array to (scalar loss, (B, 3) gradient).
        points0: (B, 3) evaluation point.
        step: central-difference step; must lie in [1e-7, 1e-3].
    """
    if not 1e-7 <= step <= 1e-3:
        raise ValueError(f"finite-difference step must lie in [1e-7, 1e-3], got {step}")
    X0 = np.array(points0, dtype=np.float64)
    if X0.ndim != 2 or X0.shape[1] != 3:
        raise ValueError(f"points must be (B, 3), got {X0.shape}")
    _, grads = loss_fn(X0)
    grads = np.asarray(grads, dtype=np.float64)
    scale = max(1.0, float(np.max(np.abs(grads))) if grads.size else 1.0)
    rows = []
    worst = 0.0
    for b in range(X0.shape[0]):
        for c in range(3):
            Xp = X0.copy()
            Xm = X0.copy()
            Xp[b, c] += step
            Xm[b, c] -= step
            lp, _ = loss_fn(Xp)
            lm, _ = loss_fn(Xm)
            numeric = (lp - lm) / (2.0 * step)
            analytic = float(grads[b, c])
            denom = max(abs(analytic), abs(numeric), 1e-10 * scale)
            rel = abs(analytic - numeric) / denom
            rows.append((b, c, analytic, float(numeric), float(rel)))
            worst = max(worst, rel)
    return FiniteDiffReport(max_rel_error=worst, rows=rows)


def write_gradcheck_csv(path, report: FiniteDiffReport) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["point", "coordinate", "analytic", "numeric", "relative_error"])
        for row in report.rows:
            writer.writerow([row[0], row[1], repr(row[2]), repr(row[3]), repr(row[4])])
