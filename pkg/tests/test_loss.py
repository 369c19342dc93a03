"""Robust consensus loss: penalty shape, annealing, gradients.

The gradient oracle is central finite differences of the loss value (the
numeric derivative sees every dependency path, so it validates the implicit
SVD differentiation rather than restating it).  Penalty and schedule values
are closed-form.
"""

import numpy as np
import pytest

from trisplat.camera import project_point
from trisplat.loss import (
    EmptyBatch,
    FiniteDiffReport,
    LossAndGradient,
    RobustLossConfig,
    finite_diff_check,
    geman_mcclure,
    geman_mcclure_weight,
    l2_loss_and_grad,
    sigma_schedule,
    tggc_loss_and_grad,
    write_gradcheck_csv,
)
from trisplat.triangulate import SurfacePoint

from conftest import random_view


def rig(rng, n_views, distance=4.0):
    return [random_view(rng, view_id=i, distance=distance) for i in range(n_views)]


def make_point(X):
    return SurfacePoint(position=np.asarray(X, float), reference_id=0, pixel=(0.0, 0.0), depth=1.0)


def noisy_scene(rng, views, n_points, pixel_noise=0.3, offset=0.02, frozen_from=2):
    """Points near the origin; views >= frozen_from are pinned to noisy pixels
    of the true location, earlier views stay live (re-project X_r)."""
    points, observations = [], []
    for _ in range(n_points):
        X_true = rng.normal(scale=0.4, size=3)
        obs = {}
        for v in views[frozen_from:]:
            o = project_point(v, X_true)
            obs[v.view_id] = (
                o.u + pixel_noise * rng.standard_normal(),
                o.v + pixel_noise * rng.standard_normal(),
            )
        points.append(make_point(X_true + offset * rng.standard_normal(3)))
        observations.append(obs)
    return points, observations


class TestGemanMcclure:
    def test_zero_residual(self):
        assert geman_mcclure(0.0, 0.3) == 0.0

    def test_residual_equal_sigma(self):
        sigma = 0.7
        assert abs(geman_mcclure(sigma * sigma, sigma) - 0.5) < 1e-15

    def test_saturation_at_100_sigma(self):
        sigma = 0.02
        r = 100.0 * sigma
        val = geman_mcclure(r * r, sigma)
        assert abs(val - 10000.0 / 10001.0) < 1e-12
        assert 0.9998 <= val < 1.0

    def test_monotone_and_bounded(self):
        r_sq = np.linspace(0.0, 50.0, 400)
        vals = geman_mcclure(r_sq, 0.5)
        assert np.all(np.diff(vals) > 0)
        assert np.all((vals >= 0.0) & (vals < 1.0))

    def test_weight_is_derivative(self):
        # d/d(r^2) by central differences.
        sigma, r_sq, h = 0.4, 0.9, 1e-6
        numeric = (geman_mcclure(r_sq + h, sigma) - geman_mcclure(r_sq - h, sigma)) / (2 * h)
        assert abs(numeric - geman_mcclure_weight(r_sq, sigma)) < 1e-9

    def test_input_validation(self):
        with pytest.raises(ValueError):
            geman_mcclure(-1.0, 0.5)
        with pytest.raises(ValueError):
            geman_mcclure(1.0, 0.0)


class TestSigmaSchedule:
    CFG = RobustLossConfig(sigma0=0.08, sigma_end=0.002, total_iterations=200, warmup_iterations=40)

    def test_boundaries(self):
        assert sigma_schedule(self.CFG, 0) == self.CFG.sigma0
        assert sigma_schedule(self.CFG, 40) == self.CFG.sigma0
        assert sigma_schedule(self.CFG, 200) == self.CFG.sigma_end
        assert sigma_schedule(self.CFG, 10_000) == self.CFG.sigma_end

    def test_geometric_midpoint(self):
        mid = sigma_schedule(self.CFG, 120)  # halfway through the decay span
        assert abs(mid - np.sqrt(self.CFG.sigma0 * self.CFG.sigma_end)) < 1e-15

    def test_monotone_after_warmup(self):
        vals = [sigma_schedule(self.CFG, t) for t in range(40, 201)]
        assert all(b <= a for a, b in zip(vals, vals[1:]))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            RobustLossConfig(sigma0=0.01, sigma_end=0.02, total_iterations=10, warmup_iterations=0)
        with pytest.raises(ValueError):
            RobustLossConfig(sigma0=0.1, sigma_end=0.01, total_iterations=10, warmup_iterations=10)
        with pytest.raises(ValueError):
            RobustLossConfig(sigma0=-0.1, sigma_end=0.01, total_iterations=10, warmup_iterations=0)
        with pytest.raises(ValueError):
            sigma_schedule(self.CFG, -1)


class TestTggcLoss:
    def test_noise_free_zero_loss_zero_gradient(self, rng):
        views = rig(rng, 5)
        points = [make_point(rng.normal(scale=0.3, size=3)) for _ in range(6)]
        # All views live: every ray passes through X_r exactly.
        out = tggc_loss_and_grad(points, views, sigma=0.05)
        assert out.loss < 1e-18
        assert np.all(np.abs(out.gradients) < 1e-9)
        assert out.n_valid == 6

    def test_per_point_loss_below_one(self, rng):
        views = rig(rng, 6)
        points, obs = noisy_scene(rng, views, 12, pixel_noise=2.0, offset=0.3)
        out = tggc_loss_and_grad(points, views, sigma=0.01, observations=obs)
        assert np.all(out.per_point_loss[out.valid] < 1.0)
        assert out.loss <= out.n_valid
        assert abs(out.mean_loss - out.loss / out.n_valid) < 1e-15

    def test_gradient_matches_finite_differences_full_path(self, rng):
        views = rig(rng, 6)
        points, obs = noisy_scene(rng, views, 20)
        sigma = 0.05

        def loss_fn(X):
            pts = [make_point(x) for x in X]
            out = tggc_loss_and_grad(pts, views, sigma, observations=obs)
            return out.loss, out.gradients

        X0 = np.stack([p.position for p in points])
        report = finite_diff_check(loss_fn, X0, step=1e-5)
        assert report.max_rel_error < 1e-5

    def test_gradient_matches_finite_differences_frozen_only(self, rng):
        # With every row pinned, X* is a constant and the
        # differentiate_consensus=False gradient is the exact derivative.
        views = rig(rng, 6)
        points, obs = noisy_scene(rng, views, 20, frozen_from=0)
        sigma = 0.05

        def loss_fn(X):
            pts = [make_point(x) for x in X]
            out = tggc_loss_and_grad(
                pts, views, sigma, differentiate_consensus=False, observations=obs
            )
            return out.loss, out.gradients

        X0 = np.stack([p.position for p in points])
        report = finite_diff_check(loss_fn, X0, step=1e-5)
        assert report.max_rel_error < 1e-5

    def test_gradient_saturates_for_gross_outliers(self, rng):
        views = rig(rng, 6)
        target = np.array([0.1, -0.05, 0.2])
        obs = {}
        for v in views:
            o = project_point(v, target)
            obs[v.view_id] = (o.u, o.v)
        sigma = 0.02
        direction = np.array([1.0, 0.5, -0.25])
        direction /= np.linalg.norm(direction)

        def grad_norm(r):
            pts = [make_point(target + r * direction)]
            out = tggc_loss_and_grad(pts, views, sigma, observations=[obs])
            return float(np.linalg.norm(out.gradients[0]))

        peak = grad_norm(sigma / np.sqrt(3.0))  # argmax of 2 r sigma^2/(r^2+sigma^2)^2
        far = grad_norm(100.0 * sigma)
        farther = grad_norm(1000.0 * sigma)
        assert far < 1e-3 * peak
        assert farther < far

    def test_matches_l2_in_small_residual_limit(self, rng):
        views = rig(rng, 5)
        target = np.array([-0.2, 0.1, 0.05])
        obs = {v.view_id: (project_point(v, target).u, project_point(v, target).v) for v in views}
        r = 1e-3
        pts = [make_point(target + np.array([r, 0.0, 0.0]))]
        sigma = 1.0  # r/sigma = 1e-3
        gm = tggc_loss_and_grad(pts, views, sigma, observations=[obs])
        l2 = l2_loss_and_grad(pts, views, observations=[obs])
        # sigma^2 * GM =~ r^2 with relative error (r/sigma)^2.
        assert abs(sigma**2 * gm.loss - l2.loss) / l2.loss < 2e-6
        rel = np.linalg.norm(sigma**2 * gm.gradients - l2.gradients) / np.linalg.norm(l2.gradients)
        assert rel < 2e-6

    def test_empty_and_all_degenerate_batches(self, rng):
        views = rig(rng, 4)
        with pytest.raises(EmptyBatch):
            tggc_loss_and_grad([], views, sigma=0.1)

    def test_no_nan_near_degeneracy(self, rng):
        # Nearly-collinear rig: the solve is close to rank deficient; points
        # must come back either valid with finite numbers or flagged, never
        # NaN/Inf in loss or gradients.
        base = random_view(rng, view_id=0)
        from trisplat.camera import CameraPose, CameraView

        eps_pose = CameraPose(R=base.pose.R, t=base.pose.t + np.array([1e-7, 0.0, 0.0]))
        views = [base, CameraView(1, base.intrinsics, eps_pose)]
        pts = [make_point(rng.normal(scale=0.2, size=3)) for _ in range(8)]
        try:
            out = tggc_loss_and_grad(pts, views, sigma=0.05)
        except EmptyBatch:
            return
        assert np.isfinite(out.loss)
        assert np.all(np.isfinite(out.gradients))
        assert np.all(np.isfinite(out.per_point_loss))


class TestL2Loss:
    def test_zero_residual(self, rng):
        views = rig(rng, 4)
        pts = [make_point(np.array([0.1, 0.0, -0.1]))]
        out = l2_loss_and_grad(pts, views)
        assert out.loss < 1e-18

    def test_quadratic_scaling(self, rng):
        views = rig(rng, 5)
        target = np.array([0.05, 0.15, -0.1])
        obs = {v.view_id: (project_point(v, target).u, project_point(v, target).v) for v in views}
        d = np.array([0.01, -0.02, 0.015])
        one = l2_loss_and_grad([make_point(target + d)], views, observations=[obs])
        two = l2_loss_and_grad([make_point(target + 2 * d)], views, observations=[obs])
        assert abs(two.loss - 4.0 * one.loss) < 1e-12 * max(one.loss, 1e-30)
        assert np.allclose(two.gradients, 2.0 * one.gradients, rtol=1e-10)

    def test_gradient_matches_finite_differences(self, rng):
        views = rig(rng, 6)
        points, obs = noisy_scene(rng, views, 10)

        def loss_fn(X):
            pts = [make_point(x) for x in X]
            out = l2_loss_and_grad(pts, views, observations=obs)
            return out.loss, out.gradients

        X0 = np.stack([p.position for p in points])
        report = finite_diff_check(loss_fn, X0, step=1e-5)
        assert report.max_rel_error < 1e-6


class TestFiniteDiffHarness:
    def test_quadratic_is_exact(self):
        A = np.array([[2.0, 0.5, -1.0], [0.5, 3.0, 0.2], [-1.0, 0.2, 1.5]])

        def loss_fn(X):
            vals = np.einsum("bi,ij,bj->b", X, A, X)
            grads = 2.0 * X @ A
            return float(vals.sum()), grads

        X0 = np.array([[0.3, -0.2, 0.7], [1.1, 0.4, -0.5]])
        report = finite_diff_check(loss_fn, X0, step=1e-4)
        assert report.max_rel_error < 1e-9

    def test_step_window_enforced(self):
        def loss_fn(X):
            return float((X**2).sum()), 2.0 * X

        X0 = np.zeros((1, 3))
        with pytest.raises(ValueError):
            finite_diff_check(loss_fn, X0, step=1e-1)
        with pytest.raises(ValueError):
            finite_diff_check(loss_fn, X0, step=1e-8)

    def test_csv_export(self, tmp_path):
        report = FiniteDiffReport(
            max_rel_error=1.5e-7, rows=[(0, 0, 1.0, 1.0000001, 1e-7), (0, 1, -2.0, -2.0, 0.0)]
        )
        path = tmp_path / "gc.csv"
        write_gradcheck_csv(path, report)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "point,coordinate,analytic,numeric,relative_error"
        assert len(lines) == 3
        assert lines[1].startswith("0,0,1.0,")
