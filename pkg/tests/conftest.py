"""Shared camera rigs and geometry helpers for the test suite."""

import numpy as np
import pytest

from trisplat.camera import CameraIntrinsics, CameraPose, CameraView
from trisplat.scenes import default_intrinsics, look_at_pose, ring_views


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform-ish random rotation via QR with positive diagonal."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 2] = -q[:, 2]
    return q


def identity_view(view_id: int = 0, f: float = 100.0, size: int = 100) -> CameraView:
    intr = CameraIntrinsics(fx=f, fy=f, cx=size / 2, cy=size / 2, width=size, height=size)
    pose = CameraPose(R=np.eye(3), t=np.zeros(3))
    return CameraView(view_id=view_id, intrinsics=intr, pose=pose)


def ring_rig(n_views: int = 8, radius: float = 3.0, height: float = 2.0,
             image_size: int = 128):
    """Cameras on a ring looking at the origin."""
    return ring_views(n_views, radius, height, default_intrinsics(image_size))


def random_view(rng: np.random.Generator, view_id: int = 0,
                distance: float = 4.0) -> CameraView:
    """Camera at a random position looking roughly at the origin."""
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    eye = distance * direction
    pose = look_at_pose(eye, np.zeros(3))
    intr = default_intrinsics(128)
    return CameraView(view_id=view_id, intrinsics=intr, pose=pose)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
