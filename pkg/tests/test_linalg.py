"""Eigensolver and minimal-singular-vector tests.

Oracles used here, all independent of the Jacobi code under test:
characteristic-polynomial roots via Faddeev-LeVerrier traces + np.roots,
a 1000-direction random comparison for minimality, and the four Penrose
conditions checked by direct matrix arithmetic.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trisplat.camera import project_point
from trisplat.linalg import (
    batch_min_right_singular_vectors,
    jacobi_eigh4,
    min_right_singular_vector,
    pinv_shifted,
    symmetric_eigen_4x4,
)
from trisplat.triangulate import SurfacePoint, assemble_dlt

from conftest import random_view


def charpoly_eigenvalues_4x4(M: np.ndarray) -> np.ndarray:
    """Eigenvalues as roots of det(M - x I), coefficients via the
    Faddeev-LeVerrier trace recursion. Shares no code with the solver."""
    n = 4
    coeffs = np.zeros(n + 1)
    coeffs[0] = 1.0
    Mk = np.eye(n)
    for k in range(1, n + 1):
        Mk = M @ Mk
        ck = -np.trace(Mk) / k
        coeffs[k] = ck
        Mk = Mk + ck * np.eye(n)
    # det(xI - M) = x^4 + c1 x^3 + c2 x^2 + c3 x + c4
    roots = np.roots(coeffs)
    return np.sort(roots.real)


def random_symmetric(rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    B = rng.standard_normal((4, 4)) * scale
    return (B + B.T) / 2.0


class TestSymmetricEigen:
    def test_identity(self):
        eig = symmetric_eigen_4x4(np.eye(4))
        np.testing.assert_allclose(eig.eigenvalues, np.ones(4), atol=1e-14)

    def test_diagonal_min_pair(self):
        eig = symmetric_eigen_4x4(np.diag([4.0, 3.0, 2.0, 1.0]))
        np.testing.assert_allclose(eig.eigenvalues, [1.0, 2.0, 3.0, 4.0], atol=1e-13)
        e4 = np.zeros(4)
        e4[3] = 1.0
        v0 = eig.eigenvectors[:, 0]
        assert min(np.linalg.norm(v0 - e4), np.linalg.norm(v0 + e4)) < 1e-12

    def test_matches_charpoly_oracle(self, rng):
        for _ in range(50):
            A = rng.standard_normal((10, 4))
            M = A.T @ A
            eig = symmetric_eigen_4x4(M)
            expected = charpoly_eigenvalues_4x4(M)
            scale = max(1.0, np.abs(expected).max())
            np.testing.assert_allclose(eig.eigenvalues, expected, atol=1e-8 * scale)

    def test_ascending_and_orthonormal(self, rng):
        for _ in range(20):
            M = random_symmetric(rng, scale=3.0)
            eig = symmetric_eigen_4x4(M)
            assert np.all(np.diff(eig.eigenvalues) >= -1e-12)
            V = eig.eigenvectors
            np.testing.assert_allclose(V.T @ V, np.eye(4), atol=1e-10)

    def test_eigen_residual(self, rng):
        M = random_symmetric(rng)
        eig = symmetric_eigen_4x4(M)
        scale = max(1.0, np.abs(eig.eigenvalues).max())
        for i in range(4):
            res = M @ eig.eigenvectors[:, i] - eig.eigenvalues[i] * eig.eigenvectors[:, i]
            assert np.linalg.norm(res) < 1e-8 * scale

    @settings(deadline=None, max_examples=40)
    @given(st.integers(0, 10**9))
    def test_reconstruction(self, seed):
        g = np.random.default_rng(seed)
        M = random_symmetric(g, scale=2.0)
        eig = symmetric_eigen_4x4(M)
        rebuilt = eig.eigenvectors @ np.diag(eig.eigenvalues) @ eig.eigenvectors.T
        denom = max(np.linalg.norm(M), 1e-30)
        assert np.linalg.norm(rebuilt - M) / denom < 1e-10

    def test_batch_matches_single(self, rng):
        mats = np.stack([random_symmetric(rng) for _ in range(7)])
        vals, vecs = jacobi_eigh4(mats)
        for i in range(7):
            single = symmetric_eigen_4x4(mats[i])
            np.testing.assert_array_equal(vals[i], single.eigenvalues)
            np.testing.assert_array_equal(vecs[i], single.eigenvectors)

    def test_non_finite_rejected(self):
        M = np.eye(4)
        M[1, 2] = M[2, 1] = np.nan
        with pytest.raises(ValueError):
            symmetric_eigen_4x4(M)

    def test_asymmetric_rejected(self):
        M = np.eye(4)
        M[0, 1] = 1e-3
        with pytest.raises(ValueError):
            symmetric_eigen_4x4(M)


class TestMinRightSingularVector:
    def test_explicit_null_space(self, rng):
        A = rng.standard_normal((8, 4))
        A[:, 3] = 0.0
        res = min_right_singular_vector(A)
        e4 = np.zeros(4)
        e4[3] = 1.0
        np.testing.assert_allclose(np.abs(res.vector), e4, atol=1e-10)
        assert res.sigma_min < 1e-12

    def test_exact_dlt_nullvector(self):
        # A built from exact projections annihilates the homogeneous point.
        views = [random_view(np.random.default_rng(100 + i), view_id=i) for i in range(4)]
        X = np.array([0.2, -0.1, 0.3])
        sp = SurfacePoint(position=X, reference_id=0, pixel=(0.0, 0.0), depth=1.0)
        system = assemble_dlt(sp, views)
        res = min_right_singular_vector(system.A)
        assert res.sigma_min < 1e-10
        Xh = np.append(X, 1.0)
        Xh /= np.linalg.norm(Xh)
        if np.dot(Xh, res.vector) < 0:
            Xh = -Xh
        np.testing.assert_allclose(res.vector, Xh, atol=1e-8)

    def test_beats_random_directions(self, rng):
        A = rng.standard_normal((10, 4))
        res = min_right_singular_vector(A)
        np.testing.assert_allclose(np.linalg.norm(A @ res.vector), res.sigma_min, atol=1e-12)
        u = rng.standard_normal((1000, 4))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        competitors = np.linalg.norm(u @ A.T, axis=1)
        assert np.all(res.sigma_min <= competitors + 1e-12)

    def test_sign_convention(self, rng):
        for _ in range(20):
            A = rng.standard_normal((6, 4))
            res = min_right_singular_vector(A)
            nonzero = np.nonzero(np.abs(res.vector) > 1e-12)[0]
            assert res.vector[nonzero[-1]] > 0

    @settings(deadline=None, max_examples=30)
    @given(st.integers(0, 10**9), st.floats(0.1, 100.0))
    def test_row_scaling_invariance(self, seed, scale):
        g = np.random.default_rng(seed)
        A = g.standard_normal((8, 4))
        r1 = min_right_singular_vector(A)
        r2 = min_right_singular_vector(scale * A)
        np.testing.assert_allclose(r1.vector, r2.vector, atol=1e-9)
        np.testing.assert_allclose(r2.sigma_min, scale * r1.sigma_min, rtol=1e-9)

    def test_sigma_min_is_sqrt_min_eigenvalue(self, rng):
        A = rng.standard_normal((12, 4))
        res = min_right_singular_vector(A)
        eig = symmetric_eigen_4x4(A.T @ A)
        assert abs(res.sigma_min - np.sqrt(max(eig.eigenvalues[0], 0.0))) < 1e-10

    def test_degenerate_gap_flag(self, rng):
        # Rank-2 row space: two smallest singular values both ~0, gap ~0.
        base = rng.standard_normal((2, 4))
        A = np.vstack([base, base * 1.5, base @ np.diag([1, 1, 1, 1])])
        res = min_right_singular_vector(A)
        assert res.degenerate

    def test_batch_helper_matches(self, rng):
        rows = rng.standard_normal((5, 8, 4))
        v, smin, gap, smax, degen = batch_min_right_singular_vectors(rows)
        for i in range(5):
            single = min_right_singular_vector(rows[i])
            np.testing.assert_array_equal(v[i], single.vector)
            assert smin[i] == single.sigma_min

    def test_too_few_rows_rejected(self, rng):
        with pytest.raises(ValueError):
            min_right_singular_vector(rng.standard_normal((3, 4)))

    def test_non_finite_rejected(self, rng):
        A = rng.standard_normal((6, 4))
        A[2, 1] = np.inf
        with pytest.raises(ValueError):
            min_right_singular_vector(A)


class TestPinvShifted:
    def test_diagonal_case(self):
        # pinv(lam*I - M) with M = diag(1,2,3,4), lam = 1: the shifted matrix
        # is diag(0,-1,-2,-3), so the pseudo-inverse carries the minus signs.
        M = np.diag([1.0, 2.0, 3.0, 4.0])
        P = pinv_shifted(M, 1.0)
        np.testing.assert_allclose(P, np.diag([0.0, -1.0, -0.5, -1.0 / 3.0]), atol=1e-12)

    def test_projector_property(self, rng):
        M = random_symmetric(rng)
        eig = symmetric_eigen_4x4(M)
        lam = eig.eigenvalues[0]
        P = pinv_shifted(M, lam)
        S = lam * np.eye(4) - M
        PS = P @ S
        # acts as identity on the orthogonal complement of the lam-eigenspace
        for i in range(1, 4):
            if abs(eig.eigenvalues[i] - lam) > 1e-6:
                np.testing.assert_allclose(
                    PS @ eig.eigenvectors[:, i], eig.eigenvectors[:, i], atol=1e-8
                )
        np.testing.assert_allclose(PS @ eig.eigenvectors[:, 0], np.zeros(4), atol=1e-8)

    def test_penrose_conditions(self, rng):
        for _ in range(20):
            M = random_symmetric(rng, scale=2.0)
            lam = float(rng.standard_normal())
            S = lam * np.eye(4) - M
            P = pinv_shifted(M, lam)
            np.testing.assert_allclose(S @ P @ S, S, atol=1e-8)
            np.testing.assert_allclose(P @ S @ P, P, atol=1e-8)
            np.testing.assert_allclose((S @ P).T, S @ P, atol=1e-8)
            np.testing.assert_allclose((P @ S).T, P @ S, atol=1e-8)
