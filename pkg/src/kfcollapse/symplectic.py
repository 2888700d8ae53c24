"""Symplectic representation of the Riccati recurrence and the Stein route.

With Omega = H^T R^{-1} H, one cycle of the Riccati map is the linear
fractional action of

    Z = [[M + Q M^{-T} Omega, Q M^{-T}],
         [M^{-T} Omega,       M^{-T}    ]]

on W = (X; Y), with P = X Y^{-1}. Z satisfies Z^{-1} = -J Z^T J for
J = [[0, I], [-I, 0]]. These routines serve as an independent oracle for
the Riccati and closed-form propagators in :mod:`kfcollapse.kf`.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import ConditioningError, InputContractError, NumericalError
from .kf import step_precision
from .linalg import qr_pos, symmetrize

EPS_LADDER = (1e-2, 1e-4, 1e-6)


def J_matrix(n):
    """The 2n x 2n symplectic form [[0, I], [-I, 0]]."""
    I = np.eye(n)
    Z = np.zeros((n, n))
    return np.block([[Z, I], [-I, Z]])


@dataclass(frozen=True)
class SymplecticBlock:
    """Z split into n x n blocks [[A, B], [C, D]]."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def Z(self):
        return np.block([[self.A, self.B], [self.C, self.D]])


def build_block(M, Omega, Q=None):
    """Symplectic block of one cycle.

    Parameters
    ----------
    M : (n, n) ndarray
        Invertible propagator.
    Omega : (n, n) ndarray
        Observation precision.
    Q : (n, n) ndarray, optional
        Model noise; ``None`` gives the perfect-model block with B = 0.
    """
    M = np.asarray(M, dtype=float)
    n = M.shape[0]
    try:
        Mit = sla.solve(M.T, np.eye(n))
    except (np.linalg.LinAlgError, sla.LinAlgError) as exc:
        raise InputContractError("M is singular") from exc
    if not np.all(np.isfinite(Mit)):
        raise InputContractError("M is singular")
    C = Mit @ Omega
    if Q is None or not np.any(Q):
        return SymplecticBlock(M.copy(), np.zeros((n, n)), C, Mit)
    QMit = Q @ Mit
    return SymplecticBlock(M + QMit @ Omega, QMit, C, Mit)


def blocks_from_sequence(seq, K=None):
    """Symplectic blocks for the first K steps of a model sequence."""
    K = len(seq) if K is None else K
    return [build_block(s.M, step_precision(s), s.Q) for s in seq[:K]]


def symplectic_defect(Z):
    """||Z^{-1} + J Z^T J||_F / ||Z||_F."""
    Z = np.asarray(Z, dtype=float)
    J = J_matrix(Z.shape[0] // 2)
    return float(np.linalg.norm(np.linalg.inv(Z) + J @ Z.T @ J) / np.linalg.norm(Z))


def symplectic_form_defect(Z):
    """||Z^T J Z - J||_F / ||Z||_F^2, an inverse-free check for long products."""
    Z = np.asarray(Z, dtype=float)
    J = J_matrix(Z.shape[0] // 2)
    return float(np.linalg.norm(Z.T @ J @ Z - J) / np.linalg.norm(Z) ** 2)


def block_product(blocks):
    """Z^{(k)} = Z_{k-1} ... Z_0 as a dense 2n x 2n matrix."""
    n = blocks[0].n
    Zk = np.eye(2 * n)
    for b in blocks:
        Zk = b.Z @ Zk
    return Zk


@dataclass(frozen=True)
class RatioState:
    """Pair (X, Y) representing P = X Y^{-1}."""

    X: np.ndarray
    Y: np.ndarray

    @classmethod
    def from_covariance(cls, P0):
        P0 = symmetrize(P0)
        return cls(P0.copy(), np.eye(P0.shape[0]))

    def covariance(self, step=None, cond_limit=1e14):
        """P = X Y^{-1}, symmetrized."""
        c = np.linalg.cond(self.Y)
        if not np.isfinite(c) or c > cond_limit:
            raise ConditioningError(f"Y is numerically singular (cond {c:.3e})", step)
        return symmetrize(np.linalg.solve(self.Y.T, self.X.T).T)

    def right_multiply(self, G):
        """(X G, Y G): same ratio."""
        return RatioState(self.X @ G, self.Y @ G)


def _lagrangian_frame(P0, rtol):
    # W0 G with G the eigenvectors of P0, null directions first: X has
    # exact zero columns on the null space and Y = G is orthonormal.
    P0 = symmetrize(P0)
    w, V = np.linalg.eigh(P0)
    top = max(w[-1], 0.0)
    null = w <= rtol * top if top > 0 else np.ones_like(w, dtype=bool)
    order = np.concatenate([np.flatnonzero(null), np.flatnonzero(~null)])
    V = V[:, order]
    w = np.where(null, 0.0, w)[order]
    return RatioState(V * w, V)


def propagate_ratio(W0, blocks, recondition_every=1, mode="identity", rank_rtol=None):
    """Covariance trace from the linear recurrence W_{k+1} = Z_k W_k.

    Parameters
    ----------
    W0 : RatioState or (n, n) ndarray
        Seed state, or a covariance P0 seeded as (P0, I).
    blocks : sequence of SymplecticBlock
    recondition_every : int
        Period of the ratio-preserving renormalization.
    mode : {'identity', 'orthogonal'}
        'identity' right-multiplies by Y^{-1}, resetting Y to I.
        'orthogonal' right-multiplies by the inverse triangular QR factor
        of Y, so Y stays orthonormal and never has to be inverted. When
        seeded from a covariance it first rotates W0 into the eigenbasis
        of P0 so that X carries exact zero columns on the null space of
        P0; for a perfect model those columns stay exactly zero.
    rank_rtol : float, optional
        Relative eigenvalue cut for the null space of P0 in orthogonal mode
        (default n * eps).

    Returns
    -------
    list of ndarray
        P_0, ..., P_K.
    """
    if recondition_every < 1:
        raise InputContractError("recondition_every must be >= 1")
    if mode not in ("identity", "orthogonal"):
        raise InputContractError(f"unknown mode {mode!r}")
    if isinstance(W0, RatioState):
        state = W0
        P_first = state.covariance(0)
    else:
        P_first = symmetrize(W0)
        n = P_first.shape[0]
        if mode == "orthogonal":
            rtol = n * np.finfo(float).eps if rank_rtol is None else rank_rtol
            state = _lagrangian_frame(P_first, rtol)
        else:
            state = RatioState.from_covariance(P_first)
    X, Y = state.X, state.Y
    out = [P_first]
    for k, b in enumerate(blocks):
        X, Y = b.A @ X + b.B @ Y, b.C @ X + b.D @ Y
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise NumericalError("symplectic state became non-finite", k + 1)
        if (k + 1) % recondition_every == 0:
            if mode == "identity":
                c = np.linalg.cond(Y)
                if not np.isfinite(c) or c > 1e14:
                    raise ConditioningError(f"Y is numerically singular (cond {c:.3e})", k + 1)
                X = np.linalg.solve(Y.T, X.T).T
                Y = np.eye(Y.shape[0])
                out.append(symmetrize(X))
                continue
            Qy, Ry = qr_pos(Y)
            if np.min(np.abs(np.diag(Ry))) <= 1e-14 * np.max(np.abs(np.diag(Ry))):
                raise ConditioningError("Y is numerically singular", k + 1)
            X = sla.solve_triangular(Ry, X.T, trans="T").T
            Y = Qy
            out.append(symmetrize(X @ Y.T))
            continue
        out.append(RatioState(X, Y).covariance(k + 1))
    return out


def propagate_sequence(P0, seq, K=None, mode="orthogonal", recondition_every=1):
    """Convenience wrapper: symplectic covariance trace for a model sequence."""
    return propagate_ratio(P0, blocks_from_sequence(seq, K), recondition_every, mode)


# ---------------------------------------------------------------------------
# autonomous Stein route
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SteinResult:
    """Solution of Psi = M^T Psi M + Omega.

    Attributes
    ----------
    psi : ndarray
        Solution (real part of the limit when regularized).
    residual : float
        ||Psi - M^T Psi M - Omega||_F / max(||Omega||_F, 1e-300).
    regularized : bool
        True when the epsilon continuation was used.
    """

    psi: np.ndarray
    residual: float
    regularized: bool = False


def _stein_operator(M):
    n = M.shape[0]
    return np.eye(n * n) - np.kron(M.T, M.T)


def stein_residual(psi, M, Omega):
    r = psi - M.T @ psi @ M - Omega
    return float(np.linalg.norm(r) / max(np.linalg.norm(Omega), 1e-300))


def _stein_eps(M, Omega, eps):
    n = M.shape[0]
    A = np.exp(1j * eps) * np.eye(n * n) - np.kron(M.T, M.T).astype(complex)
    return np.linalg.solve(A, Omega.astype(complex).ravel()).reshape(n, n)


def stein_admissible(M, cond_limit=1e12):
    """True when I - M^T (x) M^T is safely invertible."""
    return bool(np.linalg.cond(_stein_operator(np.asarray(M, dtype=float))) < cond_limit)


def _richardson(vals, eps):
    # vals[i] ~ L + a eps[i]; extrapolate pairwise and return the estimates
    est = []
    for (v1, e1), (v2, e2) in zip(zip(vals, eps), zip(vals[1:], eps[1:])):
        est.append(v2 + (v2 - v1) * e2 / (e1 - e2))
    return est


def stein_solve(M, Omega, ladder=EPS_LADDER, tol=1e-4):
    """Solve the discrete Lyapunov (Stein) equation as an n^2 linear system.

    If 1 is (numerically) an eigenvalue of M^T (x) M^T, the regularized
    system (e^{i eps} I - M^T (x) M^T) vec Psi = vec Omega is solved on a
    ladder of eps values and the limit eps -> 0 is extrapolated.
    """
    M = np.asarray(M, dtype=float)
    Omega = symmetrize(Omega)
    n = M.shape[0]
    if stein_admissible(M):
        psi = np.linalg.solve(_stein_operator(M), Omega.ravel()).reshape(n, n)
        psi = symmetrize(psi)
        return SteinResult(psi, stein_residual(psi, M, Omega), False)
    vals = [_stein_eps(M, Omega, e) for e in ladder]
    est = _richardson(vals, ladder)
    scale = max(np.linalg.norm(est[-1]), 1e-300)
    drift = np.linalg.norm(est[-1] - est[-2]) / scale
    if not np.all(np.isfinite(est[-1])) or drift > tol:
        raise NumericalError(f"regularized Stein solve has no limit (drift {drift:.3e})")
    psi = symmetrize(est[-1].real)
    return SteinResult(psi, stein_residual(psi, M, Omega), True)


def theta_recursion(M, Omega, k):
    """Theta_k by Theta_{j+1} = M^T Theta_j M + Omega from Theta_0 = 0."""
    T = np.zeros_like(np.asarray(Omega, dtype=float))
    for _ in range(k):
        T = symmetrize(M.T @ T @ M + Omega)
    return T


def autonomous_theta(M, Omega, k, ladder=EPS_LADDER, tol=1e-6):
    """Theta_k for autonomous dynamics.

    Uses Psi - (M^k)^T Psi M^k when the Stein equation is solvable and the
    recursion otherwise. In the singular case the regularized form
    Psi_eps - e^{-ik eps} (M^k)^T Psi_eps M^k is also evaluated on the
    ladder and, if its extrapolated limit exists, it is returned after a
    consistency check against the recursion.
    """
    M = np.asarray(M, dtype=float)
    Omega = symmetrize(Omega)
    if k == 0:
        return np.zeros_like(Omega)
    Mk = np.linalg.matrix_power(M, k)
    if stein_admissible(M):
        psi = stein_solve(M, Omega).psi
        return symmetrize(psi - Mk.T @ psi @ Mk)
    rec = theta_recursion(M, Omega, k)
    vals = []
    for e in ladder:
        pe = _stein_eps(M, Omega, e)
        vals.append(pe - np.exp(-1j * k * e) * (Mk.T @ pe @ Mk))
    est = _richardson(vals, ladder)[-1].real
    if np.linalg.norm(est - rec) <= tol * max(np.linalg.norm(rec), 1.0):
        return symmetrize(est)
    return rec
