"""Fixed-size linear algebra for stacked 2k x 4 homogeneous constraint systems.

The triangulation pipeline reduces every solve to the symmetric 4x4 matrix
M = A^T A, so this module implements a batched cyclic Jacobi eigensolver for
that size instead of deferring to a general dense library.  Jacobi is
unconditionally stable at 4x4, needs no pivoting heuristics, and -- because
every rotation is an elementwise operation over the batch -- produces results
that are bitwise independent of how points are chunked into batches.

All functions operate on float64 arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Cyclic sweep order over the six off-diagonal planes of a 4x4 matrix.
_JACOBI_PAIRS = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))

JACOBI_MAX_SWEEPS = 50
# Off-diagonal Frobenius target, relative to the input Frobenius norm for
# matrices with norm above one (an absolute 1e-14 is unreachable in float64
# once ||M|| >> 1; quadratic convergence makes the relative form equivalent).
JACOBI_OFF_TOL = 1e-14

# Relative spectral-gap threshold below which the minimal singular vector is
# numerically ill-defined (gap measured against the largest singular value).
DEFAULT_GAP_EPSILON = 1e-9

# Singular values below this (relative to sigma_max) are indistinguishable
# from zero when computed through A^T A: eigenvalues carry ~eps*lambda_max of
# noise, so sigma carries ~sqrt(eps)*sigma_max.  If the SECOND singular value
# is under the floor the null space is two-dimensional numerically and the
# minimal vector is unidentifiable even when the computed gap looks large.
_RANK_FLOOR = 1e-7

# Components closer to the shift than this (scaled) are zeroed in pinv_shifted.
_PINV_EPS = 1e-12


def _batch_identity(n: int) -> np.ndarray:
    eye = np.zeros((n, 4, 4))
    eye[:, range(4), range(4)] = 1.0
    return eye


def jacobi_eigh4(mats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a batch of symmetric 4x4 matrices.

    Args:
        mats: (n, 4, 4) symmetric matrices.

    Returns:
        (eigenvalues, eigenvectors): shapes (n, 4) and (n, 4, 4), eigenvalues
        ascending, eigenvectors as columns, each column's last non-negligible
        component made positive.

    Per-matrix arithmetic depends only on that matrix's entries: a matrix is
    rotated in a sweep iff its own off-diagonal norm was above its own
    tolerance at the start of the sweep, so batching never changes results.
    """
    A = np.array(mats, dtype=np.float64)
    if A.ndim != 3 or A.shape[1:] != (4, 4):
        raise ValueError(f"jacobi_eigh4 expects (n, 4, 4) input, got {A.shape}")
    n = A.shape[0]
    V = _batch_identity(n)
    if n == 0:
        return np.zeros((0, 4)), V

    norm = np.sqrt(np.sum(A * A, axis=(1, 2)))
    tol = JACOBI_OFF_TOL * np.maximum(1.0, norm)

    rows, cols = np.triu_indices(4, k=1)
    for _ in range(JACOBI_MAX_SWEEPS):
        off = np.sqrt(2.0 * np.sum(A[:, rows, cols] ** 2, axis=1))
        active = off > tol
        if not np.any(active):
            break
        for p, q in _JACOBI_PAIRS:
            apq = A[:, p, q]
            rotate = active & (apq != 0.0)
            apq_safe = np.where(rotate, apq, 1.0)
            tau = (A[:, q, q] - A[:, p, p]) / (2.0 * apq_safe)
            t = np.sign(tau) / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
            # sign(0) is 0; pick the positive root in that symmetric case.
            t = np.where(tau == 0.0, 1.0, t)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            c = np.where(rotate, c, 1.0)
            s = np.where(rotate, s, 0.0)

            col_p = A[:, :, p].copy()
            col_q = A[:, :, q].copy()
            A[:, :, p] = c[:, None] * col_p - s[:, None] * col_q
            A[:, :, q] = s[:, None] * col_p + c[:, None] * col_q
            row_p = A[:, p, :].copy()
            row_q = A[:, q, :].copy()
            A[:, p, :] = c[:, None] * row_p - s[:, None] * row_q
            A[:, q, :] = s[:, None] * row_p + c[:, None] * row_q
            # The (p, q) entry is zero by construction; pin it to kill roundoff.
            A[:, p, q] = np.where(rotate, 0.0, A[:, p, q])
            A[:, q, p] = A[:, p, q]

            vcol_p = V[:, :, p].copy()
            vcol_q = V[:, :, q].copy()
            V[:, :, p] = c[:, None] * vcol_p - s[:, None] * vcol_q
            V[:, :, q] = s[:, None] * vcol_p + c[:, None] * vcol_q

    vals = A[:, range(4), range(4)]
    order = np.argsort(vals, axis=1, kind="stable")
    vals = np.take_along_axis(vals, order, axis=1)
    V = np.take_along_axis(V, order[:, None, :], axis=2)

    # Sign convention: last component with magnitude above 1e-12 made positive.
    significant = np.abs(V) > 1e-12
    last = 3 - np.argmax(significant[:, ::-1, :], axis=1)
    picked = np.take_along_axis(V, last[:, None, :], axis=1)[:, 0, :]
    flip = np.where(picked < 0.0, -1.0, 1.0)
    V = V * flip[:, None, :]
    return vals, V


@dataclass(frozen=True)
class SymEigen4:
    """Spectral factorization M = V diag(w) V^T of a symmetric 4x4 matrix."""

    eigenvalues: np.ndarray  # (4,), ascending
    eigenvectors: np.ndarray  # (4, 4), orthonormal columns


def symmetric_eigen_4x4(M: np.ndarray, symmetry_tol: float = 1e-12) -> SymEigen4:
    """Cyclic-Jacobi eigendecomposition of one symmetric 4x4 matrix.

    Raises:
        ValueError: if M is not 4x4, has non-finite entries, or is asymmetric
            beyond ``symmetry_tol`` (relative to max(1, ||M||)).
    """
    M = np.asarray(M, dtype=np.float64)
    if M.shape != (4, 4):
        raise ValueError(f"symmetric_eigen_4x4 expects a 4x4 matrix, got {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError("symmetric_eigen_4x4: input contains non-finite entries")
    scale = max(1.0, float(np.max(np.abs(M))))
    if float(np.max(np.abs(M - M.T))) > symmetry_tol * scale:
        raise ValueError("symmetric_eigen_4x4: input is not symmetric within tolerance")
    vals, vecs = jacobi_eigh4(M[None])
    return SymEigen4(eigenvalues=vals[0], eigenvectors=vecs[0])


def accumulate_normal_matrices(rows: np.ndarray) -> np.ndarray:
    """Form M = A^T A for a batch of row-stacked systems.

    Args:
        rows: (n, m, 4) batch of m-row systems.

    Returns:
        (n, 4, 4) normal matrices, accumulated row by row in index order so the
        arithmetic is identical for any batching of the same systems.
    """
    n, m, _ = rows.shape
    M = np.zeros((n, 4, 4))
    for j in range(m):
        r = rows[:, j, :]
        M += r[:, :, None] * r[:, None, :]
    return M


def batch_min_right_singular_vectors(
    rows: np.ndarray, gap_epsilon: float = DEFAULT_GAP_EPSILON
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Minimal right singular vectors for a batch of (m, 4) systems.

    Returns:
        (v, sigma_min, spectral_gap, sigma_max, degenerate) with shapes
        (n, 4), (n,), (n,), (n,), (n,) bool.
    """
    M = accumulate_normal_matrices(rows)
    vals, vecs = jacobi_eigh4(M)
    v = vecs[:, :, 0]
    sigmas = np.sqrt(np.maximum(vals, 0.0))
    # sigma_min reported as ||A v|| rather than sqrt(lambda_min): the two agree
    # to roundoff but the residual form is what downstream tolerances quote.
    Av = np.zeros(rows.shape[:2])
    for j in range(4):
        Av += rows[:, :, j] * v[:, None, j]
    sigma_min = np.sqrt(np.sum(Av * Av, axis=1))
    spectral_gap = sigmas[:, 1] - sigmas[:, 0]
    sigma_max = sigmas[:, 3]
    degenerate = (spectral_gap <= gap_epsilon * sigma_max) | (
        sigmas[:, 1] <= _RANK_FLOOR * sigma_max
    )
    return v, sigma_min, spectral_gap, sigma_max, degenerate


@dataclass(frozen=True)
class MinSingularResult:
    """Minimal right singular vector of a stacked constraint matrix.

    ``degenerate`` signals that the spectral gap fell below ``gap_epsilon``
    relative to the largest singular value; callers decide how to react.
    """

    vector: np.ndarray  # (4,), unit norm, last nonzero component positive
    sigma_min: float  # ||A v||
    spectral_gap: float  # sigma_2 - sigma_1
    sigma_max: float
    degenerate: bool


def min_right_singular_vector(
    A: np.ndarray, gap_epsilon: float = DEFAULT_GAP_EPSILON
) -> MinSingularResult:
    """Right singular vector of A for the smallest singular value.

    Args:
        A: (m, 4) matrix with m >= 4 and finite entries.
        gap_epsilon: relative spectral-gap threshold for the degeneracy signal.

    Raises:
        ValueError: on bad shape or non-finite entries.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[1] != 4:
        raise ValueError(f"min_right_singular_vector expects (m, 4) input, got {A.shape}")
    if A.shape[0] < 4:
        raise ValueError(
            f"min_right_singular_vector needs at least 4 rows, got {A.shape[0]}"
        )
    if not np.all(np.isfinite(A)):
        raise ValueError("min_right_singular_vector: input contains non-finite entries")
    v, sigma_min, gap, sigma_max, degen = batch_min_right_singular_vectors(
        A[None], gap_epsilon
    )
    return MinSingularResult(
        vector=v[0],
        sigma_min=float(sigma_min[0]),
        spectral_gap=float(gap[0]),
        sigma_max=float(sigma_max[0]),
        degenerate=bool(degen[0]),
    )


def pinv_shifted(M: np.ndarray, lam: float) -> np.ndarray:
    """Moore-Penrose pseudo-inverse of (lam * I - M) for symmetric M.

    Spectral components with |lam - lambda_i| below a scaled epsilon are
    zeroed, which is exactly what the implicit differentiation of an
    eigenvector through its own eigenvalue requires.
    """
    eig = symmetric_eigen_4x4(M)
    d = lam - eig.eigenvalues
    eps = _PINV_EPS * max(1.0, abs(lam), float(np.max(np.abs(eig.eigenvalues))))
    inv = np.where(np.abs(d) > eps, 1.0 / np.where(d == 0.0, 1.0, d), 0.0)
    V = eig.eigenvectors
    return (V * inv[None, :]) @ V.T
