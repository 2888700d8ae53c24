"""Linear model sequences for the three experiment families.

A sequence is a list of :class:`ModelStep`. Step ``k`` holds the observation
pair (H_k, R_k) used at time t_k and the propagator/noise pair
(M_{k+1}, Q_{k+1}) that carries the analysis from t_k to t_{k+1}.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma

from .errors import InputContractError, NumericalError
from .linalg import random_spd

KINDS = ("autonomous-random", "nonautonomous-random", "lorenz95")
OBS_MODES = ("dense-random", "first-component")
COND_WARN = 1e12


@dataclass(frozen=True)
class ModelStep:
    """One assimilation cycle.

    Attributes
    ----------
    M : (n, n) ndarray
        Propagator from t_k to t_{k+1}.
    H : (d, n) ndarray
        Observation operator at t_k.
    R : (d, d) ndarray
        Observation error covariance at t_k.
    Q : (n, n) ndarray or None
        Model noise added at t_{k+1}; None means a perfect model.
    """

    M: np.ndarray
    H: np.ndarray
    R: np.ndarray
    Q: np.ndarray = None

    @property
    def n(self):
        return self.M.shape[0]

    @property
    def d(self):
        return self.H.shape[0]

    @property
    def perfect(self):
        return self.Q is None or not np.any(self.Q)

    def noise(self):
        """Q as a dense array (zeros for a perfect model)."""
        return np.zeros_like(self.M) if self.Q is None else self.Q


@dataclass(frozen=True)
class Lorenz95Config:
    """Lorenz-95 integration settings."""

    n: int = 40
    F: float = 8.0
    dt: float = 0.1
    substeps: int = 10
    spinup: int = 5000

    def __post_init__(self):
        if self.n < 4:
            raise InputContractError("Lorenz-95 needs n >= 4")
        if self.substeps < 1 or self.dt < 0:
            raise InputContractError("substeps must be >= 1 and dt >= 0")
        if self.dt / self.substeps > 0.05:
            raise InputContractError("dt / substeps must not exceed 0.05")


def _check_l96_state(x):
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size < 4:
        raise InputContractError("Lorenz-95 state must be a vector of length >= 4")
    return x


def lorenz95_tendency(x, F=8.0):
    """dx_j/dt = x_{j-1}(x_{j+1} - x_{j-2}) - x_j + F with cyclic indices."""
    x = _check_l96_state(x)
    return np.roll(x, 1) * (np.roll(x, -1) - np.roll(x, 2)) - x + F


def lorenz95_jacobian(x, F=8.0):
    """Dense Jacobian of :func:`lorenz95_tendency` at ``x``."""
    x = _check_l96_state(x)
    n = x.size
    J = -np.eye(n)
    j = np.arange(n)
    J[j, (j - 2) % n] = -x[(j - 1) % n]
    J[j, (j - 1) % n] = x[(j + 1) % n] - x[(j - 2) % n]
    J[j, (j + 1) % n] = x[(j - 1) % n]
    return J


def _jacobian_times(x, V):
    # J(x) @ V using the four-point stencil on the rows of V
    xm1 = np.roll(x, 1)[:, None]
    xp1 = np.roll(x, -1)[:, None]
    xm2 = np.roll(x, 2)[:, None]
    return (-xm1 * np.roll(V, 2, axis=0) + (xp1 - xm2) * np.roll(V, 1, axis=0)
            - V + xm1 * np.roll(V, -1, axis=0))


def lorenz95_flow(x, cfg):
    """Integrate the nonlinear model over one interval ``cfg.dt`` with RK4."""
    x = _check_l96_state(x).copy()
    h = cfg.dt / cfg.substeps
    F = cfg.F
    for _ in range(cfg.substeps):
        k1 = lorenz95_tendency(x, F)
        k2 = lorenz95_tendency(x + 0.5 * h * k1, F)
        k3 = lorenz95_tendency(x + 0.5 * h * k2, F)
        k4 = lorenz95_tendency(x + h * k3, F)
        x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(x)):
        raise NumericalError("Lorenz-95 trajectory diverged")
    return x


def tangent_linear_propagator(x_start, cfg):
    """Propagator and end state over one interval.

    The state and the variational equation dM/dt = J(x(t)) M are advanced
    together by the same RK4 stages, so M is the exact derivative of the
    discrete RK4 map.

    Returns
    -------
    M : (n, n) ndarray
    x_end : (n,) ndarray
    """
    x = _check_l96_state(x_start).copy()
    n = x.size
    M = np.eye(n)
    if cfg.dt == 0:
        return M, x
    h = cfg.dt / cfg.substeps
    F = cfg.F
    for _ in range(cfg.substeps):
        k1 = lorenz95_tendency(x, F)
        K1 = _jacobian_times(x, M)
        x2 = x + 0.5 * h * k1
        k2 = lorenz95_tendency(x2, F)
        K2 = _jacobian_times(x2, M + 0.5 * h * K1)
        x3 = x + 0.5 * h * k2
        k3 = lorenz95_tendency(x3, F)
        K3 = _jacobian_times(x3, M + 0.5 * h * K2)
        x4 = x + h * k3
        k4 = lorenz95_tendency(x4, F)
        K4 = _jacobian_times(x4, M + h * K3)
        x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        M = M + h / 6.0 * (K1 + 2 * K2 + 2 * K3 + K4)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(M))):
        raise NumericalError("Lorenz-95 tangent-linear integration diverged")
    return M, x


def lorenz95_spinup(cfg, rng):
    """Settle a perturbed rest state onto the attractor."""
    x = cfg.F + rng.standard_normal(cfg.n)
    for _ in range(cfg.spinup):
        x = lorenz95_flow(x, cfg)
    return x


def gaussian_scale_for_n0(n, n0):
    """Entry scale placing the zero exponent between indices n0 and n0 + 1.

    For products of independent n x n matrices with iid N(0, s^2) entries
    the exponents are ln s + (ln 2 + psi((n - i + 1) / 2)) / 2. The returned
    s puts zero halfway between the n0-th and (n0 + 1)-th of them.
    """
    if not 1 <= n0 < n:
        raise InputContractError("need 1 <= n0 < n")
    i = np.array([n0, n0 + 1])
    g = 0.5 * (np.log(2.0) + digamma((n - i + 1) / 2.0))
    return float(np.exp(-g.mean()))


def _observation(rng, n, d, obs_mode):
    if obs_mode == "first-component":
        H = np.zeros((1, n))
        H[0, 0] = 1.0
        R = random_spd(1, 1, rng)
    else:
        H = rng.standard_normal((d, n))
        R = random_spd(d, d, rng)
    return H, R


def _check_propagator(M, k):
    c = np.linalg.cond(M)
    if not np.isfinite(c) or c > COND_WARN:
        warnings.warn(f"propagator at step {k} has condition number {c:.3e}", RuntimeWarning)


def gen_model_sequence(kind, n, d, seed, steps, obs_mode="dense-random", m_scale=1.0,
                       l96=None):
    """Generate a deterministic sequence of model steps.

    Parameters
    ----------
    kind : {'autonomous-random', 'nonautonomous-random', 'lorenz95'}
    n, d : int
        State and observation dimensions. ``d`` is forced to 1 for
        ``obs_mode='first-component'``.
    seed : int
        Seed of numpy's PCG64 generator.
    steps : int
        Number of cycles.
    obs_mode : {'dense-random', 'first-component'}
    m_scale : float
        Standard deviation of the random propagator entries (random kinds).
    l96 : Lorenz95Config, optional
        Overrides for the Lorenz-95 kind; its ``n`` must equal ``n``.

    Returns
    -------
    list of ModelStep
    """
    if kind not in KINDS:
        raise InputContractError(f"unknown kind {kind!r}")
    if obs_mode not in OBS_MODES:
        raise InputContractError(f"unknown obs_mode {obs_mode!r}")
    if steps < 1 or n < 1 or d < 1:
        raise InputContractError("steps, n and d must be positive")
    if obs_mode == "dense-random" and d > n:
        raise InputContractError("d must not exceed n")
    if m_scale <= 0:
        raise InputContractError("m_scale must be positive")
    rng = np.random.default_rng(seed)

    if kind == "autonomous-random":
        M = m_scale * rng.standard_normal((n, n))
        _check_propagator(M, 0)
        H, R = _observation(rng, n, d, obs_mode)
        for A in (M, H, R):
            A.setflags(write=False)
        return [ModelStep(M, H, R) for _ in range(steps)]

    if kind == "nonautonomous-random":
        seq = []
        for k in range(steps):
            M = m_scale * rng.standard_normal((n, n))
            _check_propagator(M, k)
            H, R = _observation(rng, n, d, obs_mode)
            seq.append(ModelStep(M, H, R))
        return seq

    cfg = l96 if l96 is not None else Lorenz95Config(n=n)
    if cfg.n != n:
        raise InputContractError("Lorenz95Config.n must match n")
    x = lorenz95_spinup(cfg, rng)
    seq = []
    for k in range(steps):
        M, x = tangent_linear_propagator(x, cfg)
        H, R = _observation(rng, n, d, obs_mode)
        seq.append(ModelStep(M, H, R))
    return seq


# ---------------------------------------------------------------------------
# binary container
#
# A container file is an ASCII header line followed by raw float64 data.
#
#   KFMAT1 <count> <rows> <cols>\n       then count*rows*cols doubles
#   KFSEQ1 <steps> <n> <d> <has_q>\n     then, per step, M (n*n), H (d*n),
#                                         R (d*d) and, if has_q, Q (n*n)
#
# Doubles are little-endian, each matrix stored row-major.
# ---------------------------------------------------------------------------

_DT = np.dtype("<f8")


def save_matrices(path, mats):
    """Write equally shaped matrices to a KFMAT1 container."""
    mats = [np.asarray(A, dtype=float) for A in mats]
    if not mats:
        raise InputContractError("nothing to write")
    shape = mats[0].shape
    if len(shape) != 2 or any(A.shape != shape for A in mats):
        raise InputContractError("all matrices must share one 2-d shape")
    with open(path, "wb") as fh:
        fh.write(f"KFMAT1 {len(mats)} {shape[0]} {shape[1]}\n".encode())
        for A in mats:
            fh.write(np.ascontiguousarray(A, dtype=_DT).tobytes())


def load_matrices(path):
    """Read a KFMAT1 container into an array of shape (count, rows, cols)."""
    with open(path, "rb") as fh:
        head = fh.readline().decode().split()
        if len(head) != 4 or head[0] != "KFMAT1":
            raise InputContractError(f"{path} is not a KFMAT1 container")
        count, rows, cols = map(int, head[1:])
        data = np.frombuffer(fh.read(), dtype=_DT)
    if data.size != count * rows * cols:
        raise InputContractError(f"{path} is truncated")
    return data.reshape(count, rows, cols).astype(float)


def save_sequence(path, seq):
    """Write a model sequence to a KFSEQ1 container."""
    n, d = seq[0].n, seq[0].d
    has_q = any(s.Q is not None for s in seq)
    with open(path, "wb") as fh:
        fh.write(f"KFSEQ1 {len(seq)} {n} {d} {int(has_q)}\n".encode())
        for s in seq:
            blocks = [s.M, s.H, s.R] + ([s.noise()] if has_q else [])
            for A in blocks:
                fh.write(np.ascontiguousarray(A, dtype=_DT).tobytes())


def load_sequence(path):
    """Read a KFSEQ1 container back into a list of ModelStep."""
    with open(path, "rb") as fh:
        head = fh.readline().decode().split()
        if len(head) != 5 or head[0] != "KFSEQ1":
            raise InputContractError(f"{path} is not a KFSEQ1 container")
        steps, n, d, has_q = map(int, head[1:])
        data = np.frombuffer(fh.read(), dtype=_DT).astype(float)
    per = n * n + d * n + d * d + (n * n if has_q else 0)
    if data.size != steps * per:
        raise InputContractError(f"{path} is truncated")
    seq = []
    for k in range(steps):
        blk = data[k * per:(k + 1) * per]
        M = blk[:n * n].reshape(n, n)
        H = blk[n * n:n * n + d * n].reshape(d, n)
        R = blk[n * n + d * n:n * n + d * n + d * d].reshape(d, d)
        Q = blk[n * n + d * n + d * d:].reshape(n, n) if has_q else None
        seq.append(ModelStep(M, H, R, Q))
    return seq


def with_noise(seq, Qs):
    """Copy of ``seq`` with model noise ``Qs[k]`` attached to step k."""
    if len(Qs) != len(seq):
        raise InputContractError("one Q per step required")
    return [ModelStep(s.M, s.H, s.R, np.asarray(Q, dtype=float)) for s, Q in zip(seq, Qs)]


@dataclass
class SequenceInfo:
    """Provenance recorded alongside generated sequences."""

    kind: str
    n: int
    d: int
    seed: int
    steps: int
    obs_mode: str
    m_scale: float = 1.0
    prng: str = "numpy.random.PCG64"
    l96: dict = field(default_factory=dict)
