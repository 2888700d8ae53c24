"""Lyapunov exponents and vectors by the QR method.

Propagators are indexed so that ``Ms[k]`` maps t_k to t_{k+1}. The forward
pass iterates Q_{k+1} R_{k+1} = M Q_k with a positive diagonal in R; its Q_k
converge to the backward Lyapunov vectors (BLVs) at t_k. The adjoint pass
runs the transposed propagators backwards in time and yields the forward
Lyapunov vectors (FLVs) at t_0. Covariant vectors (CLVs) follow from the
stored R factors by the backward triangular iteration.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import InputContractError, NumericalError
from .linalg import graded_singular_values, qr_pos

DEGENERACY_GAP = 1e-4


def _propagators(steps):
    # accept ModelStep objects or raw matrices
    return [getattr(s, "M", s) for s in steps]


def _random_orthonormal(n, seed):
    rng = np.random.default_rng(seed)
    return qr_pos(rng.standard_normal((n, n)))[0]


@dataclass
class QRPass:
    """Result of :func:`forward_qr_pass`.

    Attributes
    ----------
    exponents : (n,) ndarray
        Per-step Lyapunov exponents, descending.
    log_r : (K, n) ndarray
        ln of the R diagonals at each step.
    bases : dict
        k -> Q_k (BLV estimate at t_k) for the stored indices.
    r_factors : list of ndarray or None
        R_1 .. R_K when requested.
    """

    exponents: np.ndarray
    log_r: np.ndarray
    bases: dict = field(default_factory=dict)
    r_factors: list = None

    def running(self, k):
        """Exponent estimate from the first k steps."""
        return self.log_r[:k].mean(axis=0)


def forward_qr_pass(steps, K=None, seed=0, keep=None, keep_r=False, transient=0):
    """Forward QR iteration.

    Parameters
    ----------
    steps : sequence of ModelStep or (n, n) arrays
    K : int, optional
        Number of steps (default all).
    seed : int
        Seed of the random initial orthonormal basis.
    keep : iterable of int or 'all', optional
        Indices k at which Q_k is stored.
    keep_r : bool
        Store every R factor (needed for CLVs).
    transient : int
        Leading steps excluded from the exponent average.
    """
    Ms = _propagators(steps)
    K = len(Ms) if K is None else K
    if K < 1 or K > len(Ms):
        raise InputContractError("K must lie in [1, len(steps)]")
    if not 0 <= transient < K:
        raise InputContractError("transient must lie in [0, K)")
    n = Ms[0].shape[0]
    keep_all = keep == "all"
    keep = set() if keep is None or keep_all else set(keep)
    Q = _random_orthonormal(n, seed)
    log_r = np.empty((K, n))
    bases = {0: Q} if (keep_all or 0 in keep) else {}
    rs = [] if keep_r else None
    for k in range(K):
        Q, R = qr_pos(Ms[k] @ Q)
        d = np.diag(R)
        if np.any(d <= 0):
            raise NumericalError("zero diagonal in QR factor", k + 1)
        log_r[k] = np.log(d)
        if keep_all or (k + 1) in keep:
            bases[k + 1] = Q
        if keep_r:
            rs.append(R)
    lam = log_r[transient:].mean(axis=0)
    return QRPass(lam, log_r, bases, rs)


def adjoint_qr_pass(steps, K=None, seed=0):
    """FLVs at t_0 from the transposed propagators taken from t_K back to t_0."""
    Ms = _propagators(steps)
    K = len(Ms) if K is None else K
    if K < 1 or K > len(Ms):
        raise InputContractError("K must lie in [1, len(steps)]")
    n = Ms[0].shape[0]
    V = _random_orthonormal(n, seed)
    for k in range(K - 1, -1, -1):
        V, R = qr_pos(Ms[k].T @ V)
        if np.any(np.diag(R) <= 0):
            raise NumericalError("zero diagonal in QR factor", k)
    return V


@dataclass
class FiniteTimeSVD:
    """SVD of M_{k:0} and the finite-time exponents ln(sigma_i) / k."""

    U: np.ndarray
    s: np.ndarray
    V: np.ndarray
    exponents: np.ndarray
    log_s: np.ndarray


def _scaled_rows(R, ld):
    # R diag(e^ld) = diag(e^ld') S with S unit-diagonal upper triangular
    d = np.diag(R)
    ld_new = ld + np.log(d)
    gap = ld[None, :] - ld[:, None]
    if np.max(np.triu(gap, 1)) > 700:
        raise NumericalError("resolvent is not graded; scaled accumulation overflowed")
    S = np.triu(R / d[:, None] * np.exp(np.triu(gap)))
    return S, ld_new


def _log_svd(Q, S, ld, max_iter=100, tol=1e-15):
    # SVD of Q diag(e^ld) S by alternating QR sweeps on the scaled factor;
    # each sweep writes A = D S as (R_X D)^T Q_X^T with S^T = Q_X R_X.
    n = S.shape[0]
    U = Q.copy()
    V = np.eye(n)
    for it in range(max_iter):
        Qx, Rx = qr_pos(S.T)
        S, ld = _scaled_rows(Rx, ld)
        if it % 2 == 0:
            V = V @ Qx
        else:
            U = U @ Qx
        off = np.max(np.abs(np.triu(S, 1))) if n > 1 else 0.0
        if off < tol and it % 2 == 1:
            break
    else:
        raise NumericalError("scaled SVD sweeps did not converge")
    order = np.argsort(-ld)
    return U[:, order], ld[order], V[:, order]


def finite_time_svd(resolvent, k):
    """Finite-time SVD of a resolvent.

    Parameters
    ----------
    resolvent : (n, n) ndarray or sequence of propagators
        Either M_{k:0} itself or the k one-step propagators, which are then
        accumulated in staged QR form M_{k:0} = Q T so the product is never
        formed explicitly.
    k : int
        Time span (k >= 1).

    Notes
    -----
    When the staged triangular factor would overflow, T is carried as
    diag(e^l) S with S unit upper triangular and the singular values are
    obtained in log form by alternating QR sweeps, which converge quickly
    on the strongly graded factors that long products produce. ``s`` may
    then contain inf; ``log_s`` and ``exponents`` stay finite.
    """
    if k < 1:
        raise InputContractError("k must be >= 1")
    if isinstance(resolvent, np.ndarray) and resolvent.ndim == 2:
        T = np.asarray(resolvent, dtype=float)
        if not np.all(np.isfinite(T)):
            raise NumericalError("resolvent is not finite")
        return _svd_direct(np.eye(T.shape[0]), T, k)
    Ms = _propagators(resolvent)[:k]
    n = Ms[0].shape[0]
    Q = np.eye(n)
    S = np.eye(n)
    ld = np.zeros(n)
    for M in Ms:
        Q, R = qr_pos(M @ Q)
        Rs, ld = _scaled_rows(R, ld)
        S = np.triu(Rs @ S)
    if np.max(ld) - np.min(ld) < 600 and np.max(np.abs(ld)) < 600:
        return _svd_direct(Q, np.exp(ld)[:, None] * S, k)
    U, log_s, V = _log_svd(Q, S, ld)
    with np.errstate(over="ignore"):
        s = np.exp(log_s)
    return FiniteTimeSVD(U, s, V, log_s / k, log_s)


def _svd_direct(Q, T, k):
    Ut, s, Vt = np.linalg.svd(T)
    s_acc = graded_singular_values(T)
    if np.any(s_acc <= 0):
        raise NumericalError("resolvent is numerically singular")
    log_s = np.log(s_acc)
    return FiniteTimeSVD(Q @ Ut, s_acc, Vt.T, log_s / k, log_s)


@dataclass
class CLVPass:
    """Covariant Lyapunov vectors over a window.

    Attributes
    ----------
    clvs : dict
        k -> C_k (unit columns) for k in the window.
    blvs : dict
        k -> Q_k for the same indices.
    log_stretch : (len(window) - 1, n) ndarray
        ln ||M c_i^k|| for consecutive window indices.
    window : range
    exponents : ndarray
    """

    clvs: dict
    blvs: dict
    log_stretch: np.ndarray
    window: range
    exponents: np.ndarray
    coefficients: dict = field(default_factory=dict)


def ginelli_clv_pass(steps, K=None, transient=None, seed=0):
    """CLVs by the forward QR / backward triangular iteration.

    Forward: Q_{k+1} R_{k+1} = M Q_k. Backward: A_k = R_{k+1}^{-1} A_{k+1}
    with column normalization, started from a random upper triangular A_K.
    The covariant vectors are C_k = Q_k A_k. The first and last
    ``transient`` steps (default 20% of K each) are discarded.
    """
    Ms = _propagators(steps)
    K = len(Ms) if K is None else K
    transient = int(0.2 * K) if transient is None else transient
    if K < 2 * transient + 1:
        raise InputContractError("K too short for the requested transients")
    fw = forward_qr_pass(Ms, K, seed=seed, keep=range(transient, K - transient + 1),
                         keep_r=True, transient=min(transient, K - 1))
    n = Ms[0].shape[0]
    rng = np.random.default_rng(seed + 1)
    A = np.triu(rng.standard_normal((n, n)))
    A[np.diag_indices(n)] = np.abs(np.diag(A)) + 1.0
    A /= np.linalg.norm(A, axis=0)
    hi = K - transient
    lo = transient
    coeffs = {}
    for k in range(K, lo, -1):
        if k <= hi:
            coeffs[k] = A
        # M Q_{k-1} = Q_k R_k, so C_{k-1} is proportional to Q_{k-1} R_k^{-1} A_k
        A = sla.solve_triangular(fw.r_factors[k - 1], A)
        if not np.all(np.isfinite(A)):
            raise NumericalError("singular R factor in backward pass", k)
        A = A / np.linalg.norm(A, axis=0)
    coeffs[lo] = A
    window = range(lo, hi + 1)
    clvs = {k: fw.bases[k] @ coeffs[k] for k in window}
    logs = []
    for k in window:
        if k == hi:
            break
        v = Ms[k] @ clvs[k]
        logs.append(np.log(np.linalg.norm(v, axis=0)))
    return CLVPass(clvs, {k: fw.bases[k] for k in window},
                   np.array(logs).reshape(-1, n), window, fw.exponents, coeffs)


@dataclass(frozen=True)
class SpectrumClassification:
    """Split of the spectrum into unstable-neutral and stable parts."""

    n0: int
    neutral: tuple
    stable: tuple
    neutral_tol: float
    near_degenerate: tuple = ()

    @property
    def n(self):
        return self.n0 + len(self.stable)


def classify_spectrum(lam, neutral_tol=1e-3):
    """Count exponents above -neutral_tol and flag neutral/degenerate ones.

    Indices in the result are zero-based. Input is expected in descending
    order; small inversions from finite averaging are sorted out.
    """
    lam = np.sort(np.asarray(lam, dtype=float))[::-1]
    n0 = int(np.sum(lam > -neutral_tol))
    neutral = tuple(int(i) for i in np.flatnonzero(np.abs(lam) <= neutral_tol))
    stable = tuple(range(n0, lam.size))
    gaps = -np.diff(lam)
    near = tuple(int(i) for i in np.flatnonzero(gaps < DEGENERACY_GAP))
    return SpectrumClassification(n0, neutral, stable, neutral_tol, near)


@dataclass
class LyapunovBases:
    """Bundle of bases and exponents used by the diagnostics."""

    exponents: np.ndarray
    blvs: dict
    flv0: np.ndarray = None
    clvs: dict = None
    finite_time: np.ndarray = None
    classification: SpectrumClassification = None


def log_det_average(steps, K=None):
    """Time average of ln|det M_k| (equals the sum of the exponents)."""
    Ms = _propagators(steps)
    K = len(Ms) if K is None else K
    return float(np.mean([np.linalg.slogdet(M)[1] for M in Ms[:K]]))
