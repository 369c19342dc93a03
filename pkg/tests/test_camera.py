"""Pinhole projection, backprojection, and neighbor selection tests.

The backprojection oracle marches the pixel ray o + t*v built from K and R by
hand and solves for the parameter that reaches the requested camera depth,
sharing no code with backproject_pixel.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trisplat.camera import (
    BehindCamera,
    CameraIntrinsics,
    CameraPose,
    CameraView,
    InsufficientViews,
    backproject_pixel,
    pixel_ray,
    project_point,
    select_neighbor_views,
)
from trisplat.scenes import look_at_pose

from conftest import identity_view, random_rotation, random_view


def raymarch_backproject(view, pixel, depth):
    """Oracle: hand-built pixel ray marched to the requested camera depth."""
    K = np.array(
        [
            [view.intrinsics.fx, 0.0, view.intrinsics.cx],
            [0.0, view.intrinsics.fy, view.intrinsics.cy],
            [0.0, 0.0, 1.0],
        ]
    )
    R, t = view.pose.R, view.pose.t
    center = -R.T @ t
    dir_cam = np.linalg.solve(K, np.array([pixel[0], pixel[1], 1.0]))
    dir_world = R.T @ dir_cam
    v = dir_world / np.linalg.norm(dir_world)
    # camera-frame z of o + s*v equals depth
    s = (depth - (R @ center + t)[2]) / (R @ v)[2]
    return center + s * v


class TestProjectionMatrix:
    def test_identity_pose_unit_K(self):
        intr = CameraIntrinsics(fx=1.0, fy=1.0, cx=0.0, cy=0.0, width=10, height=10)
        view = CameraView(view_id=0, intrinsics=intr, pose=CameraPose(np.eye(3), np.zeros(3)))
        np.testing.assert_allclose(view.P, np.hstack([np.eye(3), np.zeros((3, 1))]), atol=0)

    def test_camera_center_zero_depth(self, rng):
        view = random_view(rng)
        c = view.pose.center
        Pc = view.P @ np.append(c, 1.0)
        assert abs(Pc[2]) < 1e-12

    def test_hand_expanded_entries(self, rng):
        # P = K[R|t]: row 0 = fx*R[0,:] + cx*R[2,:], symbolically expanded.
        R = random_rotation(rng)
        t = rng.standard_normal(3)
        intr = CameraIntrinsics(fx=100.0, fy=80.0, cx=50.0, cy=40.0, width=100, height=100)
        view = CameraView(view_id=0, intrinsics=intr, pose=CameraPose(R, t))
        assert view.P[0, 0] == pytest.approx(100.0 * R[0, 0] + 50.0 * R[2, 0], abs=1e-12)
        np.testing.assert_allclose(view.P[0, :3], 100.0 * R[0, :] + 50.0 * R[2, :], atol=1e-12)
        np.testing.assert_allclose(view.P[1, :3], 80.0 * R[1, :] + 40.0 * R[2, :], atol=1e-12)
        np.testing.assert_allclose(view.P[2, :3], R[2, :], atol=0)
        np.testing.assert_allclose(
            view.P[:, 3], np.array([100.0 * t[0] + 50.0 * t[2], 80.0 * t[1] + 40.0 * t[2], t[2]])
        )

    def test_identity_pose_entry(self):
        intr = CameraIntrinsics(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=100, height=100)
        view = CameraView(view_id=0, intrinsics=intr, pose=CameraPose(np.eye(3), np.zeros(3)))
        assert view.P[0, 0] == 100.0


class TestProjectPoint:
    def test_optical_axis(self):
        intr = CameraIntrinsics(fx=1.0, fy=1.0, cx=0.0, cy=0.0, width=10, height=10)
        view = CameraView(view_id=0, intrinsics=intr, pose=CameraPose(np.eye(3), np.zeros(3)))
        obs = project_point(view, np.array([0.0, 0.0, 1.0]))
        assert (obs.u, obs.v, obs.s) == (0.0, 0.0, 1.0)

    def test_pinhole_formula(self):
        view = identity_view(f=100.0, size=100)
        obs = project_point(view, np.array([1.0, 2.0, 2.0]))
        assert obs.u == pytest.approx(100.0 * 1.0 / 2.0 + 50.0)
        assert obs.v == pytest.approx(100.0 * 2.0 / 2.0 + 50.0)
        assert obs.s == pytest.approx(2.0)

    def test_behind_camera(self):
        view = identity_view()
        with pytest.raises(BehindCamera):
            project_point(view, np.array([0.0, 0.0, -1.0]))

    def test_eq4_residual(self, rng):
        for _ in range(50):
            view = random_view(rng, view_id=0)
            X = rng.standard_normal(3) * 0.5
            obs = project_point(view, X)
            lhs = obs.s * np.array([obs.u, obs.v, 1.0])
            rhs = view.P @ np.append(X, 1.0)
            assert np.linalg.norm(lhs - rhs) < 1e-12


class TestBackproject:
    def test_round_trip(self, rng):
        for _ in range(30):
            view = random_view(rng)
            pixel = rng.uniform(0, 128, size=2)
            depth = float(rng.uniform(0.1, 100.0))
            X = backproject_pixel(view, pixel, depth)
            obs = project_point(view, X)
            assert abs(obs.u - pixel[0]) < 1e-9
            assert abs(obs.v - pixel[1]) < 1e-9
            assert abs(obs.s - depth) < 1e-9

    def test_principal_point_identity_pose(self):
        view = identity_view(f=100.0, size=100)
        X = backproject_pixel(view, (50.0, 50.0), 5.0)
        np.testing.assert_allclose(X, [0.0, 0.0, 5.0], atol=1e-12)

    def test_raymarch_oracle(self, rng):
        for _ in range(20):
            view = random_view(rng)
            pixel = rng.uniform(10, 118, size=2)
            depth = float(rng.uniform(0.5, 10.0))
            X = backproject_pixel(view, pixel, depth)
            expected = raymarch_backproject(view, pixel, depth)
            np.testing.assert_allclose(X, expected, atol=1e-9)

    def test_nonpositive_depth_rejected(self):
        view = identity_view()
        with pytest.raises(ValueError):
            backproject_pixel(view, (50.0, 50.0), 0.0)
        with pytest.raises(ValueError):
            backproject_pixel(view, (50.0, 50.0), -1.0)

    @settings(deadline=None, max_examples=50)
    @given(
        st.integers(0, 10**9),
        st.floats(0.0, 128.0),
        st.floats(0.0, 128.0),
        st.floats(0.1, 100.0),
    )
    def test_round_trip_property(self, seed, u, v, depth):
        view = random_view(np.random.default_rng(seed))
        X = backproject_pixel(view, (u, v), depth)
        obs = project_point(view, X)
        assert abs(obs.u - u) < 1e-9 and abs(obs.v - v) < 1e-9 and abs(obs.s - depth) < 1e-9

    def test_pixel_ray_unit_direction(self, rng):
        view = random_view(rng)
        ray = pixel_ray(view, (30.0, 70.0))
        assert abs(np.linalg.norm(ray.direction) - 1.0) < 1e-12
        np.testing.assert_allclose(ray.origin, view.pose.center, atol=1e-12)


class TestPoseValidation:
    def test_non_orthonormal_rejected(self):
        R = np.eye(3)
        R[0, 1] = 1e-3
        with pytest.raises(ValueError):
            CameraPose(R, np.zeros(3))

    def test_reflection_rejected(self):
        R = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError):
            CameraPose(R, np.zeros(3))

    def test_intrinsics_validation(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=-1.0, fy=1.0, cx=0.0, cy=0.0, width=4, height=4)
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=1.0, fy=1.0, cx=10.0, cy=0.0, width=4, height=4)


def arc_views(n, view_ids=None):
    """Cameras on a small arc, all looking at the origin."""
    views = []
    intr = CameraIntrinsics(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=100, height=100)
    for i in range(n):
        angle = 0.25 * i
        eye = 4.0 * np.array([np.sin(angle), -np.cos(angle), 0.2])
        pose = look_at_pose(eye, np.zeros(3))
        vid = view_ids[i] if view_ids else i
        views.append(CameraView(view_id=vid, intrinsics=intr, pose=pose))
    return views


class TestSelectNeighborViews:
    def test_nearest_on_arc(self):
        views = arc_views(3)
        picked = [v.view_id for v in select_neighbor_views(views[0], views, 1)]
        assert picked == [1]
        picked = [v.view_id for v in select_neighbor_views(views[2], views, 1)]
        assert picked == [1]

    def test_opposite_facing_excluded(self):
        views = arc_views(2)
        # A camera right next to view 0 but looking away from the target.
        eye = views[0].pose.center + np.array([0.05, 0.0, 0.0])
        away = look_at_pose(eye, eye + (eye - np.zeros(3)))
        intr = views[0].intrinsics
        back = CameraView(view_id=99, intrinsics=intr, pose=away)
        picked = [v.view_id for v in select_neighbor_views(views[0], views + [back], 1)]
        assert picked == [1]

    def test_insufficient_views(self):
        views = arc_views(3)
        with pytest.raises(InsufficientViews):
            select_neighbor_views(views[0], views, 5)

    def test_deterministic(self):
        views = arc_views(6)
        a = [v.view_id for v in select_neighbor_views(views[2], views, 3)]
        b = [v.view_id for v in select_neighbor_views(views[2], views, 3)]
        assert a == b

    def test_distance_then_id_tiebreak(self):
        views = arc_views(3, view_ids=[5, 9, 1])
        # Equidistant flanks of the middle camera: smaller id wins first slot.
        picked = [v.view_id for v in select_neighbor_views(views[1], views, 2)]
        assert picked == [1, 5]
