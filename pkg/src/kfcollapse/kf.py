"""Kalman filter covariance propagation.

Conventions: ``P`` is the forecast covariance at t_k, ``Pa`` the analysis
covariance at t_k. A :class:`~kfcollapse.models.ModelStep` ``s`` at index k
supplies Omega_k (from ``s.H``, ``s.R``) and the pair (M_{k+1}, Q_{k+1}).

Two propagation routes are provided. The dense one works on n x n matrices
and is the reference implementation of each formula. The factored one keeps
P = Q T T^T Q^T with Q orthonormal (n x r) and T upper triangular (r x r);
it preserves the rank of P exactly and keeps eigenvalues that decay to
1e-200 and below relatively accurate, which the dense route cannot.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import ConditioningWarning, InputContractError, NumericalError
from .linalg import (graded_singular_values, psd_factor, qr_pos, symmetrize,
                     asymmetry)

ASYM_FLAG = 1e-8


def obs_precision(H, R):
    """Observation precision in state space, Omega = H^T R^{-1} H."""
    H = np.atleast_2d(np.asarray(H, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if R.shape != (H.shape[0], H.shape[0]):
        raise InputContractError("R must be d x d with d = rows of H")
    try:
        c = sla.cho_factor(symmetrize(R))
    except np.linalg.LinAlgError as exc:
        raise InputContractError("R is not positive definite") from exc
    return symmetrize(H.T @ sla.cho_solve(c, H))


def step_precision(step):
    """Omega_k for a model step."""
    return obs_precision(step.H, step.R)


def analysis_update(P, Omega):
    """Analysis covariance (I + P Omega)^{-1} P.

    P is factored as X X^T with eigenvalues below n * eps * ||P|| dropped,
    and the symmetric form X (I + X^T Omega X)^{-1} X^T is evaluated. The
    inner matrix is SPD with eigenvalues >= 1, so the solve is benign.
    """
    P = np.asarray(P, dtype=float)
    Omega = np.asarray(Omega, dtype=float)
    if P.shape != Omega.shape:
        raise InputContractError("P and Omega must have the same shape")
    X = psd_factor(P)
    if X.shape[1] == 0:
        return np.zeros_like(P)
    B = np.eye(X.shape[1]) + X.T @ Omega @ X
    try:
        c = sla.cho_factor(symmetrize(B))
    except np.linalg.LinAlgError as exc:
        raise NumericalError("I + X^T Omega X is not positive definite") from exc
    return symmetrize(X @ sla.cho_solve(c, X.T))


def analysis_update_direct(P, Omega):
    """Unfactored (I + P Omega)^{-1} P, kept as a cross-check."""
    n = P.shape[0]
    return symmetrize(np.linalg.solve(np.eye(n) + P @ Omega, P))


def forecast_step(Pa, M, Q=None):
    """Forecast covariance M Pa M^T + Q."""
    out = M @ Pa @ M.T
    if Q is not None:
        out = out + Q
    return symmetrize(out)


def riccati_cycle(P, step):
    """One analysis/forecast cycle; returns (Pa_k, P_{k+1})."""
    Pa = analysis_update(P, step_precision(step))
    return Pa, forecast_step(Pa, step.M, step.Q)


def riccati_step(P, step):
    """P_{k+1} = M (I + P Omega)^{-1} P M^T + Q."""
    return riccati_cycle(P, step)[1]


def information_step(Pinv, M, Omega):
    """Information filter update M^{-T} (Pinv + Omega) M^{-1}."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    Pinv = np.atleast_2d(np.asarray(Pinv, dtype=float))
    Omega = np.atleast_2d(np.asarray(Omega, dtype=float))
    try:
        lu = sla.lu_factor(M, check_finite=True)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise InputContractError("M is singular") from exc
    if np.any(np.diag(lu[0]) == 0):
        raise InputContractError("M is singular")
    A = sla.lu_solve(lu, (Pinv + Omega).T, trans=1).T  # (Pinv + Omega) M^{-1}
    return symmetrize(sla.lu_solve(lu, A, trans=1))


def riccati_trace(P0, seq, K=None):
    """Dense forecast and analysis traces: lists P[0..K] and Pa[0..K-1]."""
    K = len(seq) if K is None else K
    P = symmetrize(P0)
    Ps, Pas = [P], []
    for k in range(K):
        Pa, P = riccati_cycle(P, seq[k])
        Pas.append(Pa)
        Ps.append(P)
    return Ps, Pas


# ---------------------------------------------------------------------------
# aggregates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Aggregates:
    """Running M_{k:0}, Gamma_k, Theta_k and Xi_k."""

    resolvent: np.ndarray
    gamma: np.ndarray
    theta: np.ndarray
    xi: np.ndarray
    k: int = 0
    perfect: bool = True

    @property
    def n(self):
        return self.resolvent.shape[0]


def initial_aggregates(n):
    """Aggregates at k = 0: identity resolvent, zero sums."""
    z = np.zeros((n, n))
    return Aggregates(np.eye(n), z, z.copy(), z.copy(), 0, True)


def accumulate(agg, step):
    """Advance the aggregates from index k to k + 1."""
    M = step.M
    try:
        lu = sla.lu_factor(M)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise InputContractError("M is singular") from exc
    if np.any(np.diag(lu[0]) == 0):
        raise InputContractError("M is singular")
    Om = step_precision(step)
    A = sla.lu_solve(lu, (agg.gamma + Om).T, trans=1).T
    gamma = symmetrize(sla.lu_solve(lu, A, trans=1))
    Mk0 = agg.resolvent
    theta = symmetrize(agg.theta + Mk0.T @ Om @ Mk0)
    xi = symmetrize(M @ agg.xi @ M.T + step.noise())
    return Aggregates(M @ Mk0, gamma, theta, xi, agg.k + 1, agg.perfect and step.perfect)


def aggregate_trace(seq, K=None):
    """Aggregates for k = 0..K."""
    K = len(seq) if K is None else K
    out = [initial_aggregates(seq[0].n)]
    for k in range(K):
        out.append(accumulate(out[-1], seq[k]))
    return out


def gamma_direct(seq, k):
    """Gamma_k as the explicit sum of M_{k:l}^{-T} Omega_l M_{k:l}^{-1}."""
    n = seq[0].n
    G = np.zeros((n, n))
    for l in range(k):
        Mkl = np.eye(n)
        for j in range(l, k):
            Mkl = seq[j].M @ Mkl
        Mi = np.linalg.inv(Mkl)
        G += Mi.T @ step_precision(seq[l]) @ Mi
    return symmetrize(G)


def theta_direct(seq, k):
    """Theta_k as the explicit sum of M_{l:0}^T Omega_l M_{l:0}."""
    n = seq[0].n
    T = np.zeros((n, n))
    Ml0 = np.eye(n)
    for l in range(k):
        T += Ml0.T @ step_precision(seq[l]) @ Ml0
        Ml0 = seq[l].M @ Ml0
    return symmetrize(T)


def _warn_condition(A, limit, what):
    c = np.linalg.cond(A)
    if not np.isfinite(c) or c > limit:
        warnings.warn(f"{what} has condition number {c:.3e}", ConditioningWarning, stacklevel=3)
    return c


def closed_form_covariance(P0, agg, cond_limit=1e14):
    """P_k = M_{k:0} P0 [I + Theta_k P0]^{-1} M_{k:0}^T (perfect model).

    Evaluated through P0 = X X^T as Y (I + X^T Theta_k X)^{-1} Y^T with
    Y = M_{k:0} X, which is the same matrix and is valid for singular P0.
    """
    if not agg.perfect:
        raise InputContractError("closed form requires a perfect model")
    X = psd_factor(P0)
    if X.shape[1] == 0:
        return np.zeros_like(agg.theta)
    B = np.eye(X.shape[1]) + X.T @ agg.theta @ X
    _warn_condition(B, cond_limit, "I + X^T Theta X")
    Y = agg.resolvent @ X
    return symmetrize(Y @ np.linalg.solve(symmetrize(B), Y.T))


def closed_form_gamma(P0, agg, cond_limit=1e14):
    """P_k = F (I + Gamma_k F)^{-1} with F = M_{k:0} P0 M_{k:0}^T.

    Gamma_k carries the inverse of the resolvent, so the relative error of
    this form grows roughly like cond(M_{k:0}) * eps. Prefer
    :func:`closed_form_covariance` or :func:`closed_form_trace`.
    """
    if not agg.perfect:
        raise InputContractError("closed form requires a perfect model")
    Y = agg.resolvent @ psd_factor(P0)
    if Y.shape[1] == 0:
        return np.zeros_like(agg.gamma)
    B = np.eye(Y.shape[1]) + Y.T @ agg.gamma @ Y
    _warn_condition(B, cond_limit, "I + Y^T Gamma Y")
    return symmetrize(Y @ np.linalg.solve(symmetrize(B), Y.T))


def closed_form_trace(P0, seq, K=None):
    """Closed-form P_k for k = 0..K, evaluated in a graded frame.

    With P0 = X X^T, X = Q_0 R_0 and the staged factorization
    M_{k:0} Q_0 = Q_k T_k, the closed form becomes

        P_k = Q_k (S_k^{-T} S_k^{-1} + G_k)^{-1} Q_k^T,

    where S_k = T_k R_0 and G_k = Q_k^T Gamma_k Q_k = S_k^{-T} X^T Theta_k X S_k^{-1}.
    S_k^{-1} and G_k are updated multiplicatively, so no long product or
    large aggregate is ever formed and the result stays accurate when
    M_{k:0} spans many orders of magnitude.
    """
    K = len(seq) if K is None else K
    X = psd_factor(P0)
    r = X.shape[1]
    n = seq[0].n
    out = [symmetrize(X @ X.T)]
    if r == 0:
        return out + [np.zeros((n, n)) for _ in range(K)]
    Qk, R0 = qr_pos(X)
    G = np.zeros((r, r))
    Sinv = sla.solve_triangular(R0, np.eye(r))
    for k in range(K):
        s = seq[k]
        G = G + Qk.T @ step_precision(s) @ Qk
        Qk, Rk = qr_pos(s.M @ Qk)
        Ri = sla.solve_triangular(Rk, np.eye(r))
        G = symmetrize(Ri.T @ G @ Ri)
        Sinv = np.triu(Sinv @ Ri)
        Lam = symmetrize(Sinv.T @ Sinv + G)
        try:
            c = sla.cho_factor(Lam)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("closed-form precision matrix lost definiteness", k + 1) from exc
        out.append(symmetrize(Qk @ sla.cho_solve(c, Qk.T)))
    return out


# ---------------------------------------------------------------------------
# factored propagation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FactoredCovariance:
    """P = (Q T)(Q T)^T with orthonormal Q (n x r) and square T (r x r)."""

    Q: np.ndarray
    T: np.ndarray

    @classmethod
    def from_factor(cls, X):
        Q, R = qr_pos(np.asarray(X, dtype=float))
        return cls(Q, R)

    @classmethod
    def from_matrix(cls, P):
        return cls.from_factor(psd_factor(P))

    @property
    def n(self):
        return self.Q.shape[0]

    @property
    def rank(self):
        return self.T.shape[0]

    def dense(self):
        L = self.Q @ self.T
        return symmetrize(L @ L.T)

    def eigenvalues(self):
        """All n eigenvalues, descending, small ones relatively accurate."""
        s = graded_singular_values(self.T) ** 2
        return np.concatenate([s, np.zeros(self.n - self.rank)])

    def apply(self, V):
        """P @ V without forming P."""
        return self.Q @ (self.T @ (self.T.T @ (self.Q.T @ V)))


def factored_analysis(fc, Omega):
    """Analysis update of a factored covariance."""
    if fc.rank == 0:
        return fc
    A = fc.Q.T @ Omega @ fc.Q
    B = symmetrize(np.eye(fc.rank) + fc.T.T @ A @ fc.T)
    try:
        U = sla.cholesky(B)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("I + T^T Q^T Omega Q T is not positive definite") from exc
    Ta = sla.solve_triangular(U, fc.T.T, trans="T").T  # T U^{-1}
    return FactoredCovariance(fc.Q, np.triu(Ta))


def factored_forecast(fc, M):
    """Perfect-model forecast of a factored covariance."""
    if fc.rank == 0:
        return FactoredCovariance(np.zeros((M.shape[0], 0)), fc.T)
    Q, R = qr_pos(M @ fc.Q)
    return FactoredCovariance(Q, np.triu(R @ fc.T))


@dataclass
class FilterTrace:
    """Output of :func:`run_filter`.

    Attributes
    ----------
    forecast_eigs : (K + 1, n) ndarray
        Eigenvalues of P_k, descending.
    analysis_eigs : (K, n) ndarray
        Eigenvalues of P^a_k, descending.
    forecast : dict
        k -> dense P_k for the requested indices.
    analysis : dict
        k -> dense P^a_k for the requested indices.
    final : FactoredCovariance or ndarray
        P_K in the representation used for propagation.
    """

    forecast_eigs: np.ndarray
    analysis_eigs: np.ndarray
    forecast: dict = field(default_factory=dict)
    analysis: dict = field(default_factory=dict)
    final: object = None
    method: str = "factored"

    @property
    def K(self):
        return self.analysis_eigs.shape[0]


def run_filter(P0, seq, K=None, keep_forecast=(), keep_analysis=(), method="auto"):
    """Propagate P0 through ``seq`` and record eigenvalue traces.

    Parameters
    ----------
    P0 : (n, n) ndarray or FactoredCovariance
    seq : list of ModelStep
    K : int, optional
        Number of cycles (default ``len(seq)``).
    keep_forecast, keep_analysis : iterable of int
        Indices at which dense matrices are stored.
    method : {'auto', 'factored', 'dense'}
        'auto' uses the factored route for perfect models.
    """
    K = len(seq) if K is None else K
    if K > len(seq):
        raise InputContractError("K exceeds the sequence length")
    perfect = all(s.perfect for s in seq[:K])
    if method == "auto":
        method = "factored" if perfect else "dense"
    if method == "factored" and not perfect:
        raise InputContractError("factored propagation needs a perfect model")
    keep_f, keep_a = set(keep_forecast), set(keep_analysis)
    n = seq[0].n
    feig = np.zeros((K + 1, n))
    aeig = np.zeros((K, n))
    fdict, adict = {}, {}

    if method == "factored":
        fc = P0 if isinstance(P0, FactoredCovariance) else FactoredCovariance.from_matrix(P0)
        feig[0] = fc.eigenvalues()
        if 0 in keep_f:
            fdict[0] = fc.dense()
        for k in range(K):
            s = seq[k]
            fa = factored_analysis(fc, step_precision(s))
            aeig[k] = fa.eigenvalues()
            if k in keep_a:
                adict[k] = fa.dense()
            fc = factored_forecast(fa, s.M)
            if not np.all(np.isfinite(fc.T)):
                raise NumericalError("covariance became non-finite", k + 1)
            feig[k + 1] = fc.eigenvalues()
            if k + 1 in keep_f:
                fdict[k + 1] = fc.dense()
        return FilterTrace(feig, aeig, fdict, adict, fc, method)

    P = P0.dense() if isinstance(P0, FactoredCovariance) else symmetrize(P0)
    feig[0] = np.linalg.eigvalsh(P)[::-1]
    if 0 in keep_f:
        fdict[0] = P
    for k in range(K):
        Pa, P = riccati_cycle(P, seq[k])
        if not np.all(np.isfinite(P)):
            raise NumericalError("covariance became non-finite", k + 1)
        aeig[k] = np.linalg.eigvalsh(Pa)[::-1]
        feig[k + 1] = np.linalg.eigvalsh(P)[::-1]
        if k in keep_a:
            adict[k] = Pa
        if k + 1 in keep_f:
            fdict[k + 1] = P
    return FilterTrace(feig, aeig, fdict, adict, P, method)


def asymmetry_flag(A):
    """True when A is further than 1e-8 (relative) from symmetric."""
    return asymmetry(A) > ASYM_FLAG
