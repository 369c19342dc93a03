"""Multi-view DLT triangulation: row assembly, consensus solve, batching.

The independent reference here is ``triangulate_oracle`` (derivative-free
simplex search on the unit sphere, no shared code with the Jacobi
eigensolver), plus hand-expanded constraint rows and random-candidate
residual comparisons.
"""

import numpy as np
import pytest

from trisplat.camera import (
    CameraIntrinsics,
    CameraPose,
    CameraView,
    InsufficientViews,
    project_point,
)
from trisplat.triangulate import (
    SurfacePoint,
    assemble_dlt,
    batch_triangulate,
    normalized_dlt_rows,
    solve_consensus,
    surface_point_from_depth,
    thread_count,
    triangulate,
    triangulate_pixel_batch,
    triangulate_oracle,
)

from conftest import random_rotation, random_view


def rig(rng, n_views, distance=4.0):
    return [random_view(rng, view_id=i, distance=distance) for i in range(n_views)]


def surface_point(views, X, reference=0):
    obs = project_point(views[reference], X)
    return SurfacePoint(
        position=X, reference_id=reference, pixel=(obs.u, obs.v), depth=obs.s
    )


def unit_residual(A, x3):
    """||A x_hat|| for the homogenized unit candidate of a 3-D point."""
    xh = np.append(np.asarray(x3, dtype=np.float64), 1.0)
    xh = xh / np.linalg.norm(xh)
    return float(np.linalg.norm(A @ xh))


def axial_views(zs, f=100.0, size=100):
    """Cameras stacked along the +z axis, all looking down +z."""
    intr = CameraIntrinsics(fx=f, fy=f, cx=size / 2, cy=size / 2, width=size, height=size)
    views = []
    for i, z in enumerate(zs):
        pose = CameraPose(R=np.eye(3), t=np.array([0.0, 0.0, -z]))
        views.append(CameraView(view_id=i, intrinsics=intr, pose=pose))
    return views


class TestAssembleDlt:
    def test_exact_point_is_nullvector(self, rng):
        for _ in range(20):
            views = rig(rng, int(rng.integers(2, 7)))
            X = rng.normal(scale=0.5, size=3)
            sp = surface_point(views, X)
            system = assemble_dlt(sp, views)
            xh = np.append(X, 1.0)
            assert np.linalg.norm(system.A @ (xh / np.linalg.norm(xh))) < 1e-10

    def test_three_views_give_six_rows(self, rng):
        views = rig(rng, 3)
        system = assemble_dlt(surface_point(views, np.zeros(3)), views)
        assert system.A.shape == (6, 4)
        assert system.view_ids == [0, 1, 2]

    def test_row_hand_expansion(self, rng):
        views = rig(rng, 2)
        X = np.array([0.2, -0.3, 0.1])
        sp = surface_point(views, X)
        system = assemble_dlt(sp, views)
        obs = project_point(views[0], X)
        P = views[0].P
        row_u = obs.u * P[2, :] - P[0, :]
        row_v = obs.v * P[2, :] - P[1, :]
        assert np.allclose(system.A[0], row_u / np.linalg.norm(row_u), atol=1e-14)
        assert np.allclose(system.A[1], row_v / np.linalg.norm(row_v), atol=1e-14)

    def test_behind_camera_views_dropped_and_recorded(self, rng):
        views = rig(rng, 4)
        # Just past view 0's center along its own viewing ray: behind view 0,
        # still comfortably in front of the rest of the rig.
        c0 = views[0].pose.center
        X = 1.05 * c0
        sp = SurfacePoint(position=X, reference_id=1, pixel=(0.0, 0.0), depth=1.0)
        system = assemble_dlt(sp, views)
        assert 0 in system.dropped_view_ids
        assert 0 not in system.view_ids
        assert system.A.shape[0] == 2 * len(system.view_ids)

    def test_insufficient_views_raised(self, rng):
        views = rig(rng, 2)
        X = views[0].pose.center + (views[0].pose.center) * 0.5
        # Behind view 0 and (by symmetry of the construction) far off view 1's
        # frustum direction is irrelevant: force it behind both.
        X = 2.0 * views[0].pose.center
        sp = SurfacePoint(position=X, reference_id=0, pixel=(0.0, 0.0), depth=1.0)
        try:
            assemble_dlt(sp, views)
        except InsufficientViews:
            return
        # If geometry let both views survive, shrink to a single view instead.
        with pytest.raises(InsufficientViews):
            assemble_dlt(surface_point(views[:1] + views[:0], np.zeros(3), 0), views[:1])

    def test_pinned_observation_overrides_projection(self, rng):
        views = rig(rng, 3)
        X = np.array([0.1, 0.2, -0.1])
        sp = surface_point(views, X)
        pinned = {1: (64.0, 32.0)}
        system = assemble_dlt(sp, views, observations=pinned)
        P = views[1].P
        row_u = 64.0 * P[2, :] - P[0, :]
        assert np.allclose(system.A[2], row_u / np.linalg.norm(row_u), atol=1e-14)
        # Unpinned views still use the projection of X itself.
        obs0 = project_point(views[0], X)
        assert system.observations[0].u == obs0.u


class TestSolveConsensus:
    def test_noise_free_recovers_point(self, rng):
        for _ in range(20):
            views = rig(rng, int(rng.integers(2, 7)))
            X = rng.normal(scale=0.5, size=3)
            res = solve_consensus(assemble_dlt(surface_point(views, X), views))
            assert not res.degenerate
            assert np.linalg.norm(res.point - X) < 1e-8
            assert res.residual < 1e-10
            assert abs(np.linalg.norm(res.homogeneous) - 1.0) < 1e-12

    def test_noisy_solution_beats_truth_and_random_candidates(self, rng):
        views = rig(rng, 6)
        X = np.array([0.15, -0.2, 0.05])
        pixels = []
        for v in views:
            o = project_point(v, X)
            pixels.append((o.u + 0.5 * rng.standard_normal(), o.v + 0.5 * rng.standard_normal()))
        P = np.stack([v.P for v in views])
        A = normalized_dlt_rows(P[None], np.asarray(pixels)[None])[0]
        res = triangulate(views, pixels)
        r_star = unit_residual(A, res.point)
        assert r_star <= unit_residual(A, X) + 1e-12
        candidates = X + rng.normal(scale=0.01, size=(1000, 3))
        for c in candidates:
            assert r_star <= unit_residual(A, c) + 1e-12
        # The algebraic residual the solver reports is the same quantity.
        assert abs(r_star - res.sigma_min) < 1e-9

    def test_collinear_rig_flagged_degenerate(self):
        views = axial_views([0.0, -1.0, -2.0])
        X = np.array([0.0, 0.0, 5.0])
        res = solve_consensus(assemble_dlt(surface_point(views, X), views))
        assert res.degenerate

    def test_point_at_infinity_flagged(self):
        # Two parallel cameras observing the same pixel offset: rays never
        # meet, the homogeneous solution has a vanishing 4th component.
        intr = CameraIntrinsics(fx=100, fy=100, cx=50, cy=50, width=100, height=100)
        v0 = CameraView(0, intr, CameraPose(R=np.eye(3), t=np.zeros(3)))
        v1 = CameraView(1, intr, CameraPose(R=np.eye(3), t=np.array([-1.0, 0.0, 0.0])))
        res = triangulate([v0, v1], [(60.0, 50.0), (60.0, 50.0)])
        assert res.at_infinity
        assert res.degenerate
        assert np.all(np.isnan(res.point))


class TestOracleAgreement:
    def test_sigma_min_agreement_on_random_systems(self, rng):
        for trial in range(10):
            views = rig(rng, int(rng.integers(3, 8)))
            X = rng.normal(scale=0.4, size=3)
            pixels = {}
            for v in views:
                o = project_point(v, X)
                pixels[v.view_id] = (
                    o.u + 0.5 * rng.standard_normal(),
                    o.v + 0.5 * rng.standard_normal(),
                )
            system = assemble_dlt(surface_point(views, X), views, observations=pixels)
            fast = solve_consensus(system)
            slow = triangulate_oracle(system, seed=trial)
            assert abs(fast.sigma_min - slow.sigma_min) < 1e-5
            # Residual optimality: the eigensolver is never beaten.
            assert fast.sigma_min <= slow.sigma_min + 1e-6

    def test_oracle_noise_free_recovers_truth(self, rng):
        views = rig(rng, 4)
        X = np.array([-0.1, 0.25, 0.3])
        res = triangulate_oracle(assemble_dlt(surface_point(views, X), views))
        assert np.linalg.norm(res.point - X) < 1e-5

    def test_oracle_matches_degeneracy_on_rank_deficient_system(self):
        views = axial_views([0.0, -1.0, -2.5])
        X = np.array([0.0, 0.0, 5.0])
        system = assemble_dlt(surface_point(views, X), views)
        fast = solve_consensus(system)
        slow = triangulate_oracle(system)
        assert fast.degenerate and slow.degenerate
        assert slow.spectral_gap < 1e-5 * slow.sigma_max


class TestBatchTriangulate:
    def _points_and_views(self, rng, n_points=40, n_views=5):
        views = rig(rng, n_views)
        pts, obs = [], []
        for _ in range(n_points):
            X = rng.normal(scale=0.4, size=3)
            pts.append(surface_point(views, X))
            per_view = {}
            for v in views:
                o = project_point(v, X)
                per_view[v.view_id] = (
                    o.u + 0.3 * rng.standard_normal(),
                    o.v + 0.3 * rng.standard_normal(),
                )
            obs.append(per_view)
        return views, pts, obs

    def test_batch_size_invariance_bitwise(self, rng):
        views, pts, obs = self._points_and_views(rng)
        r1 = batch_triangulate(pts, views, observations=obs, batch_size=1)
        r64 = batch_triangulate(pts, views, observations=obs, batch_size=64)
        for a, b in zip(r1, r64):
            assert np.array_equal(a.point, b.point)
            assert np.array_equal(a.homogeneous, b.homogeneous)
            assert a.sigma_min == b.sigma_min
            assert a.spectral_gap == b.spectral_gap

    def test_failed_slot_isolated(self, rng):
        views, pts, obs = self._points_and_views(rng, n_points=8)
        bad = SurfacePoint(
            position=10.0 * views[0].pose.center, reference_id=0, pixel=(0, 0), depth=1.0
        )
        # Make it behind every camera by pushing far outside the rig.
        results_with = batch_triangulate(
            pts[:4] + [bad] + pts[4:], views, observations=obs[:4] + [None] + obs[4:]
        )
        results_without = batch_triangulate(pts, views, observations=obs)
        bad_res = results_with[4]
        if bad_res.error is None:
            pytest.skip("geometry left the stress point visible; rig-dependent")
        assert bad_res.degenerate
        assert np.all(np.isnan(bad_res.point))
        kept = results_with[:4] + results_with[5:]
        for a, b in zip(kept, results_without):
            assert np.array_equal(a.point, b.point)

    def test_thread_count_is_bitwise_irrelevant(self, rng, monkeypatch):
        views, pts, obs = self._points_and_views(rng, n_points=64)
        monkeypatch.setenv("TRIAGS_THREADS", "1")
        r1 = batch_triangulate(pts, views, observations=obs)
        monkeypatch.setenv("TRIAGS_THREADS", "4")
        r4 = batch_triangulate(pts, views, observations=obs)
        for a, b in zip(r1, r4):
            assert np.array_equal(a.point, b.point)
            assert a.sigma_min == b.sigma_min

    def test_thread_env_validation(self, monkeypatch):
        monkeypatch.delenv("TRIAGS_THREADS", raising=False)
        assert thread_count() == 1
        monkeypatch.setenv("TRIAGS_THREADS", "3")
        assert thread_count() == 3
        monkeypatch.setenv("TRIAGS_THREADS", "0")
        with pytest.raises(ValueError):
            thread_count()
        monkeypatch.setenv("TRIAGS_THREADS", "many")
        with pytest.raises(ValueError):
            thread_count()

    def test_pixel_batch_validates_shapes(self, rng):
        views = rig(rng, 3)
        P = np.stack([v.P for v in views])
        with pytest.raises(ValueError):
            triangulate_pixel_batch(P[None], np.zeros((2, 3)))
        with pytest.raises(InsufficientViews):
            triangulate_pixel_batch(P[None, :, :1][:, :1], np.zeros((1, 1, 2)))


class TestGeometricInvariants:
    @staticmethod
    def _moved_rig(views, Rg, tg):
        moved = []
        for v in views:
            # x_cam must be unchanged on transformed world points.
            R_new = v.pose.R @ Rg.T
            t_new = v.pose.t - R_new @ tg
            moved.append(CameraView(v.view_id, v.intrinsics, CameraPose(R=R_new, t=t_new)))
        return moved

    def test_rigid_equivariance_rotation_with_noise(self, rng):
        # A pure rotation is a 4x4-orthogonal change of homogeneous frame, so
        # row normalization is untouched and the noisy LS optimum commutes.
        for _ in range(5):
            views = rig(rng, 5)
            X = rng.normal(scale=0.4, size=3)
            pixels = []
            for v in views:
                o = project_point(v, X)
                pixels.append((o.u + 0.4 * rng.standard_normal(), o.v + 0.4 * rng.standard_normal()))
            base = triangulate(views, pixels)
            Rg = random_rotation(rng)
            res = triangulate(self._moved_rig(views, Rg, np.zeros(3)), pixels)
            assert np.linalg.norm(res.point - Rg @ base.point) < 1e-8

    def test_rigid_equivariance_full_transform_noise_free(self, rng):
        # Translations rescale homogeneous rows, which reweights views; only
        # the exactly-consistent solution is invariant to that, so the full
        # rigid-motion check runs on noise-free systems.
        for _ in range(5):
            views = rig(rng, 5)
            X = rng.normal(scale=0.4, size=3)
            pixels = []
            for v in views:
                o = project_point(v, X)
                pixels.append((o.u, o.v))
            Rg = random_rotation(rng)
            tg = rng.normal(scale=2.0, size=3)
            res = triangulate(self._moved_rig(views, Rg, tg), pixels)
            assert np.linalg.norm(res.point - (Rg @ X + tg)) < 1e-8

    def test_adding_consistent_views_never_hurts(self, rng):
        views = rig(rng, 8)
        X = np.array([0.2, 0.1, -0.15])
        prev_err = None
        for n in range(3, 9):
            res = solve_consensus(assemble_dlt(surface_point(views[:n], X), views[:n]))
            err = np.linalg.norm(res.point - X)
            if prev_err is not None:
                assert err <= prev_err + 1e-8
            prev_err = err

    def test_zero_weight_equals_removed_view(self, rng):
        views = rig(rng, 4)
        X = np.array([0.1, -0.1, 0.2])
        pixels = []
        for v in views:
            o = project_point(v, X)
            pixels.append((o.u + 0.3 * rng.standard_normal(), o.v + 0.3 * rng.standard_normal()))
        weighted = triangulate(views, pixels, weights=np.array([1.0, 1.0, 1.0, 0.0]))
        removed = triangulate(views[:3], pixels[:3])
        assert np.allclose(weighted.point, removed.point, atol=1e-12)

    def test_surface_point_reprojection_invariant(self, rng):
        view = random_view(rng, view_id=3)
        sp = surface_point_from_depth(view, (40.25, 61.5), 3.7)
        obs = project_point(view, sp.position)
        assert abs(obs.u - sp.pixel[0]) < 1e-9
        assert abs(obs.v - sp.pixel[1]) < 1e-9
        assert abs(obs.s - sp.depth) < 1e-9
        assert sp.reference_id == 3
