"""Symmetric and positive semi-definite matrix utilities.

Everything here is a pure function of numpy arrays. The Loewner order
A <= B means B - A is positive semi-definite; comparisons report the
signed smallest eigenvalue of the difference so that borderline cases
come with a margin instead of a bare boolean.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.linalg.lapack import dgejsv

from .errors import InputContractError

SYM_TOL = 1e-12
PSD_TOL = 1e-10


def symmetrize(A):
    """Return (A + A^T) / 2."""
    A = np.asarray(A, dtype=float)
    return 0.5 * (A + A.T)


def asymmetry(A):
    """Relative Frobenius asymmetry ||A - A^T|| / ||A|| (0 for A = 0)."""
    A = np.asarray(A, dtype=float)
    nrm = np.linalg.norm(A)
    if nrm == 0.0:
        return 0.0
    return np.linalg.norm(A - A.T) / nrm


def _square(A, name="A"):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InputContractError(f"{name} must be square, got shape {A.shape}")
    return A


def check_symmetric(A, tol=SYM_TOL, name="A"):
    """Validate symmetry to a relative Frobenius tolerance and return A."""
    A = _square(A, name)
    if asymmetry(A) > tol:
        raise InputContractError(
            f"{name} is not symmetric (relative asymmetry {asymmetry(A):.3e})")
    return A


def is_covariance(A, sym_tol=SYM_TOL, psd_tol=PSD_TOL):
    """Check the covariance invariants: symmetric and numerically PSD.

    The PSD test allows a smallest eigenvalue down to
    ``-psd_tol * max(largest eigenvalue, 1)``.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        return False
    if not np.all(np.isfinite(A)) or asymmetry(A) > sym_tol:
        return False
    w = np.linalg.eigvalsh(symmetrize(A))
    return bool(w[0] >= -psd_tol * max(w[-1], 1.0))


@dataclass(frozen=True)
class EigenDecomposition:
    """Eigenvalues sorted descending with matching orthonormal columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self):
        V = self.eigenvectors
        return (V * self.eigenvalues) @ V.T


def sym_eig(A, tol=SYM_TOL):
    """Eigendecomposition of a symmetric matrix, largest eigenvalue first.

    Parameters
    ----------
    A : (n, n) array_like
        Symmetric to within ``tol`` relative Frobenius norm.

    Returns
    -------
    EigenDecomposition
    """
    A = check_symmetric(A, tol)
    w, V = np.linalg.eigh(symmetrize(A))
    return EigenDecomposition(w[::-1].copy(), V[:, ::-1].copy())


def eigvals_desc(A):
    """Eigenvalues of the symmetric part of A, sorted descending."""
    return np.linalg.eigvalsh(symmetrize(A))[::-1]


def loewner_margin(A, B):
    """Smallest eigenvalue of B - A; non-negative iff A <= B."""
    A = _square(A, "A")
    B = _square(B, "B")
    if A.shape != B.shape:
        raise InputContractError(f"shape mismatch {A.shape} vs {B.shape}")
    return float(np.linalg.eigvalsh(symmetrize(B - A))[0])


def loewner_leq(A, B, tol=0.0):
    """True iff the smallest eigenvalue of B - A is at least -tol."""
    return loewner_margin(A, B) >= -tol


def relative_loewner_margin(A, B):
    """Loewner margin of A <= B scaled by max(||A||_2, ||B||_2, 1)."""
    scale = max(np.linalg.norm(A, 2), np.linalg.norm(B, 2), 1.0)
    return loewner_margin(A, B) / scale


def numerical_rank(A, threshold=1e-10):
    """Number of eigenvalues strictly above ``threshold``."""
    if threshold <= 0:
        raise InputContractError("threshold must be positive")
    return int(np.sum(eigvals_desc(A) > threshold))


def random_factor(n, rank, seed):
    """n x rank matrix of independent standard normal entries."""
    if not 1 <= rank <= n:
        raise InputContractError(f"rank must lie in [1, {n}], got {rank}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.standard_normal((n, rank))


def random_spd(n, rank, seed):
    """Random PSD matrix X X^T with X an n x rank standard normal matrix."""
    X = random_factor(n, rank, seed)
    return symmetrize(X @ X.T)


def psd_factor(P, rtol=None):
    """Return X with P = X X^T, dropping negligible eigenvalues.

    Eigenvalues at or below ``rtol * max(largest, tiny)`` are treated as
    roundoff and removed, so the column count of X is the numerical rank.
    The default ``rtol`` is ``n * eps``.
    """
    P = _square(P, "P")
    n = P.shape[0]
    if rtol is None:
        rtol = n * np.finfo(float).eps
    w, V = np.linalg.eigh(symmetrize(P))
    top = w[-1]
    if top <= 0:
        return np.zeros((n, 0))
    keep = w > rtol * top
    return V[:, keep][:, ::-1] * np.sqrt(w[keep][::-1])


def qr_pos(A):
    """Thin QR with a non-negative diagonal in R (unique for full rank)."""
    Q, R = np.linalg.qr(A)
    s = np.sign(np.diag(R))
    s[s == 0] = 1.0
    return Q * s, R * s[:, None]


def graded_singular_values(T):
    """Singular values of a square matrix to high relative accuracy.

    Uses the preconditioned one-sided Jacobi SVD, which keeps tiny
    singular values of graded triangular factors relatively accurate
    where the standard bidiagonal SVD returns roundoff.
    """
    T = np.asarray(T, dtype=float)
    if T.size == 0:
        return np.zeros(0)
    out = dgejsv(np.asfortranarray(T), joba=0, jobu=3, jobv=3, jobr=0, jobt=0, jobp=0)
    sva, work, info = out[0], out[3], out[-1]
    if info != 0:
        return np.linalg.svd(T, compute_uv=False)
    return np.sort(sva * (work[0] / work[1]))[::-1]


def rel_frobenius(A, B, floor=1e-300):
    """||A - B||_F / max(||B||_F, floor)."""
    return float(np.linalg.norm(np.asarray(A) - np.asarray(B)) / max(np.linalg.norm(B), floor))


def shift_lemma_residual(A, B):
    """||A (I + BA)^{-1} - (I + AB)^{-1} A||_F for A (n, m), B (m, n)."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    n, m = A.shape
    left = np.linalg.solve((np.eye(m) + B @ A).T, A.T).T
    right = np.linalg.solve(np.eye(n) + A @ B, A)
    return float(np.linalg.norm(left - right))


def principal_angles(A, B):
    """Principal angles (radians) between the column spaces of A and B."""
    return sla.subspace_angles(np.asarray(A, dtype=float), np.asarray(B, dtype=float))


def max_quadratic_on_subspace(A, basis):
    """Largest value of h^T A h over unit h in span(basis)."""
    Qb, _ = np.linalg.qr(basis)
    return float(eigvals_desc(Qb.T @ A @ Qb)[0])
