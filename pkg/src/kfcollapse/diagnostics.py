"""Measurements on filter runs: decay fits, projections, asymptote, audits.

Every routine here post-processes traces produced by :mod:`kfcollapse.kf`
and :mod:`kfcollapse.lyapunov`; nothing mutates its inputs.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import ConditionViolation, InputContractError
from .kf import analysis_update, forecast_step, step_precision
from .linalg import eigvals_desc, loewner_margin, qr_pos, symmetrize

DENORMAL_FLOOR = 1e-280
TRANSIENT_FRACTION = 0.2


# ---------------------------------------------------------------------------
# decay rates
# ---------------------------------------------------------------------------

@dataclass
class DecayFit:
    """Least-squares decay slope of one eigenvalue index (zero-based)."""

    index: int
    slope: float
    residual: float
    reference: float
    points: int
    note: str = ""

    @property
    def ratio(self):
        return self.slope / self.reference if self.reference else np.nan


def eigen_decay_fit(eigs, lam, indices, window=None, floor=DENORMAL_FLOOR):
    """Fit ln(sigma_i^k) = a + b k for each requested index.

    Parameters
    ----------
    eigs : (K, n) ndarray
        Eigenvalue trace, one descending row per step.
    lam : (n,) ndarray
        Lyapunov exponents; the reference slope is -2 |lam_i|.
    indices : iterable of int
        Zero-based eigenvalue indices to fit.
    window : (int, int), optional
        Half-open step range; default skips the first 20% of steps.
    floor : float
        Eigenvalues at or below this are excluded from the fit.

    Returns
    -------
    list of DecayFit
    """
    eigs = np.asarray(eigs, dtype=float)
    K = eigs.shape[0]
    lo, hi = window if window is not None else (int(TRANSIENT_FRACTION * K), K)
    if not 0 <= lo < hi <= K:
        raise InputContractError("window outside the trace")
    ks = np.arange(K)
    out = []
    for i in indices:
        y = eigs[lo:hi, i]
        ok = y > floor
        x = ks[lo:hi][ok]
        ref = -2.0 * abs(lam[i])
        note = "" if ok.all() else f"{int((~ok).sum())} points below {floor:g} dropped"
        if x.size < 3:
            out.append(DecayFit(i, np.nan, np.nan, ref, int(x.size), "too few points above floor"))
            continue
        coef, res, *_ = np.polyfit(x, np.log(y[ok]), 1, full=True)
        rms = float(np.sqrt(res[0] / x.size)) if res.size else 0.0
        out.append(DecayFit(i, float(coef[0]), rms, ref, int(x.size), note))
    return out


def expdecay_bound_margins(eigs, log_sv, sigma10):
    """Log-margins of sigma_i^k <= sigma_1^0 exp(2 lambda_i^k k).

    ``log_sv[k]`` holds ln of the singular values of M_{k:0}, so that
    exp(2 lambda_i^k k) = exp(2 log_sv[k, i]). Non-negative entries mean
    the bound holds; eigenvalues that are exactly zero give +inf.
    """
    eigs = np.asarray(eigs, dtype=float)
    with np.errstate(divide="ignore"):
        lhs = np.log(np.maximum(eigs, 0.0))
    return np.log(sigma10) + 2.0 * np.asarray(log_sv) - lhs


# ---------------------------------------------------------------------------
# projections
# ---------------------------------------------------------------------------

def _check_orthonormal(U, tol=1e-8):
    U = np.asarray(U, dtype=float)
    if np.linalg.norm(U.T @ U - np.eye(U.shape[1])) > tol:
        raise InputContractError("basis is not orthonormal")
    return U


def blv_projection(P, U):
    """U^T P U for an orthonormal basis U."""
    U = _check_orthonormal(U)
    return symmetrize(U.T @ P @ U)


def stable_norms(P, U, stable):
    """||P u_i|| for the stable columns of U."""
    U = _check_orthonormal(U)
    cols = U[:, list(stable)]
    PU = P.apply(cols) if hasattr(P, "apply") else np.asarray(P) @ cols
    return np.linalg.norm(PU, axis=0)


def ratebound_margins(P, fts, sigma10, stable):
    """sigma_1^0 exp(2 lambda_i^k k) - u_i^T P u_i for stable i.

    ``fts`` is a :class:`~kfcollapse.lyapunov.FiniteTimeSVD` of M_{k:0}.
    """
    out = []
    for i in stable:
        u = fts.U[:, i]
        out.append(sigma10 * np.exp(2.0 * fts.log_s[i]) - float(u @ P @ u))
    return np.array(out)


# ---------------------------------------------------------------------------
# asymptote and observability of the unstable-neutral block
# ---------------------------------------------------------------------------

def asymptote_sequence(Cplus, Gamma):
    """S = C (C^T Gamma C)^{-1} C^T for the unstable-neutral block C."""
    C = np.asarray(Cplus, dtype=float)
    if C.ndim != 2:
        raise InputContractError("Cplus must be an n x n0 matrix")
    inner = symmetrize(C.T @ Gamma @ C)
    try:
        c = sla.cho_factor(inner)
    except np.linalg.LinAlgError as exc:
        raise ConditionViolation("C^T Gamma C is not positive definite") from exc
    return symmetrize(C @ sla.cho_solve(c, C.T))


@dataclass
class ProjectedInformation:
    """Gamma_k restricted to the leading BLV block.

    ``G[k]`` is U_{+,k}^T Gamma_k U_{+,k} and ``U[k]`` the n0 leading columns
    of the forward QR basis, for the stored indices. ``min_eig`` holds the
    smallest eigenvalue of G_k for every k = 0..K.
    """

    U: dict
    G: dict
    min_eig: np.ndarray

    def asymptote(self, k):
        """S_k = U_+ G_k^{-1} U_+^T at a stored index."""
        return _asymptote_from_projection(self.U[k], self.G[k])


def _asymptote_from_projection(U, G):
    try:
        c = sla.cho_factor(symmetrize(G))
    except np.linalg.LinAlgError as exc:
        raise ConditionViolation("projected information is not positive definite") from exc
    return symmetrize(U @ sla.cho_solve(c, U.T))


def projected_information(steps, n0, K=None, seed=0, keep=(), Q0=None):
    """Track U_+^T Gamma_k U_+ along the forward QR pass.

    With M U_{+,k} = U_{+,k+1} R_{++}, the recursion for Gamma gives

        G_{k+1} = R_{++}^{-T} (G_k + U_{+,k}^T Omega_k U_{+,k}) R_{++}^{-1},

    which only involves n0 x n0 matrices. Since the asymptote depends on
    C_+ only through its span, which equals span(U_+), S_k = U_+ G_k^{-1} U_+^T.
    """
    K = len(steps) if K is None else K
    n = steps[0].n
    if not 1 <= n0 <= n:
        raise InputContractError("n0 must lie in [1, n]")
    if Q0 is None:
        Q0 = qr_pos(np.random.default_rng(seed).standard_normal((n, n)))[0]
    U = Q0[:, :n0]
    G = np.zeros((n0, n0))
    keep = set(keep)
    Us, Gs = {}, {}
    mins = np.empty(K + 1)
    mins[0] = 0.0
    if 0 in keep:
        Us[0], Gs[0] = U, G
    for k in range(K):
        s = steps[k]
        G = G + U.T @ step_precision(s) @ U
        U, R = qr_pos(s.M @ U)
        Ri = sla.solve_triangular(R, np.eye(n0))
        G = symmetrize(Ri.T @ G @ Ri)
        mins[k + 1] = np.linalg.eigvalsh(G)[0]
        if k + 1 in keep:
            Us[k + 1], Gs[k + 1] = U, G
    return ProjectedInformation(Us, Gs, mins)


def pair_distance(traceA, traceB):
    """||A_k - B_k||_F for aligned traces (lists or dicts keyed by k)."""
    if isinstance(traceA, dict):
        if set(traceA) != set(traceB):
            raise InputContractError("traces are not aligned")
        return {k: float(np.linalg.norm(traceA[k] - traceB[k])) for k in sorted(traceA)}
    if len(traceA) != len(traceB):
        raise InputContractError("traces have different lengths")
    return np.array([np.linalg.norm(a - b) for a, b in zip(traceA, traceB)])


def consecutive_distance(trace):
    """||A_k - A_{k-1}||_F along one trace (list or dict with consecutive keys)."""
    if isinstance(trace, dict):
        ks = sorted(trace)
        return {k: float(np.linalg.norm(trace[k] - trace[p])) for p, k in zip(ks, ks[1:])
                if k == p + 1}
    return np.array([np.linalg.norm(b - a) for a, b in zip(trace, trace[1:])])


# ---------------------------------------------------------------------------
# Conditions 1-3
# ---------------------------------------------------------------------------

@dataclass
class ConditionReport:
    """Diagnostics of the three convergence conditions.

    condition1_rank is rank(V_{+,0}^T X_0); condition2_min is the smallest
    eigenvalue trace of the projected information; condition3_min is the
    smallest singular value trace of Phi_k (None when there is no neutral
    mode, which makes the condition vacuous).
    """

    n0: int
    condition1_rank: int
    condition2_min: np.ndarray
    condition3_min: np.ndarray = None
    notes: list = field(default_factory=list)

    @property
    def condition1(self):
        return self.condition1_rank == self.n0

    @property
    def condition2(self):
        return bool(self.condition2_min.size and self.condition2_min[-1] > 0)

    @property
    def condition3(self):
        if self.condition3_min is None:
            return True
        m = self.condition3_min
        return bool(m.size > 1 and m[-1] > m[0])


def condition1_rank(X0, V0, n0, rtol=1e-10):
    """rank(V_{+,0}^T X_0) with a relative singular value cut."""
    A = V0[:, :n0].T @ np.asarray(X0, dtype=float)
    s = np.linalg.svd(A, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def condition3_trace(clv, steps, neutral):
    """Smallest singular value of Phi_k over the CLV window.

    The window start plays the role of t_0. For neutral CLVs c_i,
    C^T Theta_k C = sum_l Lambda_{l:0} C_l^T Omega_l C_l Lambda_{l:0} and
    Phi_k rescales it by the growing part of Lambda_{k:0}, whose log is the
    running sum of max(ln stretch, 0).
    """
    neutral = list(neutral)
    if not neutral:
        return None
    ks = list(clv.window)
    logs = clv.log_stretch[:, neutral]
    m = len(neutral)
    # A holds sum_l Lambda_{l:0} W_l Lambda_{l:0} scaled by the current
    # growth factor on both sides; cl is ln Lambda_{k:0} minus ln of the
    # growing part, which is never positive
    A = np.zeros((m, m))
    cl = np.zeros(m)
    out = [0.0]
    for j, k in enumerate(ks[:-1]):
        C = clv.clvs[k][:, neutral]
        e = np.exp(cl)
        A = A + e[:, None] * (C.T @ step_precision(steps[k]) @ C) * e[None, :]
        g = np.exp(-np.maximum(logs[j], 0.0))
        A = g[:, None] * A * g[None, :]
        cl = cl + logs[j] - np.maximum(logs[j], 0.0)
        out.append(np.linalg.svd(A, compute_uv=False)[-1])
    return np.array(out)


def condition_checks(X0, V0, n0, steps, K=None, clv=None, neutral=(), seed=0):
    """Assemble a :class:`ConditionReport`."""
    r1 = condition1_rank(X0, V0, n0)
    pinfo = projected_information(steps, n0, K, seed=seed)
    notes = []
    c3 = None
    if neutral and clv is not None:
        c3 = condition3_trace(clv, steps, neutral)
    elif not neutral:
        notes.append("no neutral mode: condition 3 vacuous")
    return ConditionReport(n0, r1, pinfo.min_eig, c3, notes)


# ---------------------------------------------------------------------------
# Loewner bound audits
# ---------------------------------------------------------------------------

@dataclass
class BoundAudit:
    """Relative Loewner margins per k; NaN where a bound is not evaluated.

    A margin is lambda_min(B - A) / max(||A||_2, ||B||_2, 1) for the claim
    A <= B. ``absolute`` holds the unscaled smallest eigenvalues.
    """

    margins: dict
    absolute: dict
    scale: dict

    def worst(self, name):
        m = self.margins[name]
        m = m[np.isfinite(m)]
        return float(m.min()) if m.size else np.nan

    def evaluated(self, name):
        return int(np.isfinite(self.margins[name]).sum())


def _rel_margin(A, B):
    s = max(np.linalg.norm(A, 2), np.linalg.norm(B, 2), 1.0)
    m = loewner_margin(A, B)
    return m / s, m, s


def gamma_inverse(Gamma, threshold=1e-10):
    """Gamma^{-1} via eigh when every eigenvalue exceeds ``threshold``."""
    w, V = np.linalg.eigh(symmetrize(Gamma))
    if w[0] <= threshold:
        return None
    return symmetrize((V / w) @ V.T)


def gamma_inverse_trace(steps, K=None, threshold=1e-10):
    """Gamma_k^{-1} for k = 0..K (None while Gamma_k is singular).

    Until Gamma_k becomes invertible it is carried as a triangular square
    root W_k with Gamma_k = W_k^T W_k,

        W_{k+1} = qr([W_k; L_k^{-1} H_k] M_k^{-1}),    R_k = L_k L_k^T,

    so the first inverse costs sqrt(cond(Gamma)) rather than cond(Gamma) in
    accuracy. From then on Pi_k = Gamma_k^{-1} is carried by

        Pi_{k+1} = M (Gamma_k + Omega_k)^{-1} M^T = M (I + Pi_k Omega_k)^{-1} Pi_k M^T,

    a noise-free Riccati step. Inverting the accumulated Gamma at every k
    instead loses all accuracy once its condition number passes 1/eps,
    which happens within a few steps for strongly stable dynamics.
    """
    K = len(steps) if K is None else K
    n = steps[0].n
    out = [None]
    W = np.zeros((0, n))
    Pi = None
    for k in range(K):
        s = steps[k]
        if Pi is None:
            L = sla.cholesky(symmetrize(np.atleast_2d(s.R)), lower=True)
            rows = np.vstack([W, sla.solve_triangular(L, s.H, lower=True)])
            rows = np.linalg.solve(s.M.T, rows.T).T
            W = sla.qr(rows, mode="r")[0][: min(rows.shape[0], n)]
            if W.shape[0] == n:
                if np.linalg.svd(W, compute_uv=False)[-1] ** 2 > threshold:
                    Wi = sla.solve_triangular(W, np.eye(n))
                    Pi = symmetrize(Wi @ Wi.T)
            out.append(Pi)
            continue
        Pi = forecast_step(analysis_update(Pi, step_precision(s)), s.M)
        out.append(Pi)
    return out


def bound_audit(Ps, aggs, P0, noises=None, gamma_inv=None, threshold=1e-10):
    """Audit the Loewner bounds on a forecast trace.

    Parameters
    ----------
    Ps : list of ndarray
        P_0..P_K.
    aggs : list of Aggregates
        Aggregates for the same indices.
    P0 : ndarray
    noises : list of ndarray, optional
        Q_k for k = 0..K (Q_0 = 0); defaults to zeros.
    gamma_inv : list, optional
        Gamma_k^{-1} or None per k, e.g. from :func:`gamma_inverse_trace`.
        Without it Gamma_k from ``aggs`` is inverted directly.
    threshold : float
        Smallest eigenvalue Gamma_k must exceed to count as invertible.

    Returns
    -------
    BoundAudit
        Keys ``bound0_lower`` (Q_k <= P_k), ``bound0`` (P_k <= free forecast
        plus Xi_k), ``bound1`` (P_k <= M P0 M^T, perfect model only),
        ``bound2`` (P_k <= Gamma_k^{-1}, perfect model only) and ``bound3``
        (both arms; its margin is the smaller of the two).
    """
    K = len(Ps) - 1
    names = ("bound0_lower", "bound0", "bound1", "bound2", "bound3")
    mar = {m: np.full(K + 1, np.nan) for m in names}
    ab = {m: np.full(K + 1, np.nan) for m in names}
    sc = {m: np.full(K + 1, np.nan) for m in names}
    n = P0.shape[0]
    for k in range(K + 1):
        P = Ps[k]
        agg = aggs[k]
        Qk = np.zeros((n, n)) if noises is None else noises[k]
        free = symmetrize(agg.resolvent @ P0 @ agg.resolvent.T)
        for name, A, B in (("bound0_lower", Qk, P), ("bound0", P, free + agg.xi)):
            mar[name][k], ab[name][k], sc[name][k] = _rel_margin(A, B)
        if not agg.perfect:
            continue
        mar["bound1"][k], ab["bound1"][k], sc["bound1"][k] = _rel_margin(P, free)
        if k == 0:
            continue
        Gi = gamma_inv[k] if gamma_inv is not None else gamma_inverse(agg.gamma, threshold)
        if Gi is None:
            continue
        mar["bound2"][k], ab["bound2"][k], sc["bound2"][k] = _rel_margin(P, Gi)
        src = "bound1" if mar["bound1"][k] <= mar["bound2"][k] else "bound2"
        mar["bound3"][k], ab["bound3"][k], sc["bound3"][k] = mar[src][k], ab[src][k], sc[src][k]
    return BoundAudit(mar, ab, sc)


def convrate_margins(eigs_P, log_sv, sigma10):
    """Same as :func:`expdecay_bound_margins` for a single step."""
    return expdecay_bound_margins(eigs_P[None, :], np.asarray(log_sv)[None, :], sigma10)[0]


def top_eigenvalue(P):
    return float(eigvals_desc(P)[0])
