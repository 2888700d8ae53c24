import numpy as np
import pytest

from kfcollapse.diagnostics import (
    asymptote_sequence,
    blv_projection,
    bound_audit,
    condition1_rank,
    condition3_trace,
    condition_checks,
    consecutive_distance,
    convrate_margins,
    eigen_decay_fit,
    expdecay_bound_margins,
    gamma_inverse,
    gamma_inverse_trace,
    pair_distance,
    projected_information,
    ratebound_margins,
    stable_norms,
)
from kfcollapse.errors import ConditionViolation, InputContractError
from kfcollapse.kf import aggregate_trace, riccati_trace, run_filter
from kfcollapse.linalg import numerical_rank, random_factor, random_spd, rel_frobenius
from kfcollapse.lyapunov import (
    adjoint_qr_pass,
    classify_spectrum,
    finite_time_svd,
    forward_qr_pass,
    ginelli_clv_pass,
)
from kfcollapse.models import ModelStep, gen_model_sequence, gaussian_scale_for_n0, with_noise

N, D = 10, 4
SCALE = gaussian_scale_for_n0(N, 4)


@pytest.fixture(scope="module")
def small_suite():
    seq = gen_model_sequence("nonautonomous-random", N, D, 0, 600, m_scale=SCALE)
    qp = forward_qr_pass(seq, keep="all", transient=100)
    return seq, qp, classify_spectrum(qp.exponents)


def test_decay_fit_exact_exponential():
    k = np.arange(100)
    eigs = np.exp(-0.6 * k)[:, None]
    fit = eigen_decay_fit(eigs, np.array([-0.3]), [0])[0]
    assert fit.slope == pytest.approx(-0.6, abs=1e-9)
    assert fit.ratio == pytest.approx(1.0, abs=1e-8)


def test_decay_fit_constant():
    fit = eigen_decay_fit(np.full((50, 1), 3.0), np.array([0.0]), [0])[0]
    assert abs(fit.slope) < 1e-12


def test_decay_fit_floor_truncation():
    k = np.arange(200)
    eigs = np.exp(-5.0 * k)[:, None]
    fit = eigen_decay_fit(eigs, np.array([-2.5]), [0], window=(0, 200))[0]
    assert fit.points < 200 and "dropped" in fit.note
    assert fit.slope == pytest.approx(-5.0, rel=1e-9)
    with pytest.raises(InputContractError):
        eigen_decay_fit(eigs, np.array([-2.5]), [0], window=(150, 300))


def test_blv_projection_examples():
    u = np.ones(4) / 2.0
    U = np.linalg.qr(np.column_stack([u, np.eye(4)[:, :3]]))[0]
    U[:, 0] = u
    Pr = blv_projection(np.outer(u, u), U)
    assert np.allclose(Pr, np.diag([1.0, 0, 0, 0]), atol=1e-14)
    assert np.allclose(blv_projection(np.eye(4), U), np.eye(4))
    with pytest.raises(InputContractError):
        blv_projection(np.eye(2), np.ones((2, 2)))


def test_asymptote_scalar_and_rank():
    assert asymptote_sequence(np.ones((1, 1)), np.array([[4.0]]))[0, 0] == pytest.approx(0.25)
    rng = np.random.default_rng(0)
    C = rng.standard_normal((6, 3))
    S = asymptote_sequence(C, random_spd(6, 6, rng))
    assert numerical_rank(S) == 3
    with pytest.raises(ConditionViolation):
        asymptote_sequence(C, np.zeros((6, 6)))


def test_pair_and_consecutive_distance():
    tr = [random_spd(3, 3, i) for i in range(4)]
    assert not np.any(pair_distance(tr, tr))
    with pytest.raises(InputContractError):
        pair_distance(tr, tr[:2])
    seq = gen_model_sequence("autonomous-random", 6, 3, 1, 400)
    _, Pas = riccati_trace(np.eye(6), seq)
    d = consecutive_distance(Pas)
    assert d[-1] < 1e-8 * np.linalg.norm(Pas[-1])


def test_p0_independence(small_suite):
    seq, qp, cls = small_suite
    n0 = cls.n0
    a = run_filter(random_spd(N, n0, 1), seq, keep_analysis=range(540, 600))
    b = run_filter(random_spd(N, N, 2), seq, keep_analysis=range(540, 600))
    dist = pair_distance(a.analysis, b.analysis)
    assert max(dist.values()) < 1e-3


def test_condition1():
    seq = gen_model_sequence("nonautonomous-random", 6, 2, 3, 200, m_scale=gaussian_scale_for_n0(6, 3))
    V0 = adjoint_qr_pass(seq, seed=1)
    assert condition1_rank(np.eye(6), V0, 3) == 3
    # a factor orthogonal to the first forward vector loses one rank
    X0 = V0[:, 1:]
    assert condition1_rank(X0, V0, 3) == 2


def test_condition3_linear_growth():
    # neutral direction e1 observed at every step
    M = np.diag([1.0, 0.5])
    steps = [ModelStep(M, np.array([[1.0, 0.0]]), np.eye(1))] * 300
    clv = ginelli_clv_pass(steps, transient=50)
    cls = classify_spectrum(clv.exponents)
    assert cls.neutral == (0,)
    phi = condition3_trace(clv, steps, cls.neutral)
    k = np.arange(phi.size)
    assert np.allclose(phi, k, atol=1e-8)


def test_condition_checks_report(small_suite):
    seq, qp, cls = small_suite
    V0 = adjoint_qr_pass(seq[:300], seed=0)
    rep = condition_checks(np.eye(N), V0, cls.n0, seq, K=300)
    assert rep.condition1
    assert rep.condition2
    assert "vacuous" in " ".join(rep.notes)


def test_projected_information_asymptote(small_suite):
    seq, qp, cls = small_suite
    K = 600
    pinfo = projected_information(seq, cls.n0, K, Q0=qp.bases[0], keep=[K])
    tr = run_filter(random_spd(N, N, 5), seq, keep_forecast=[K])
    S = pinfo.asymptote(K)
    assert np.linalg.norm(tr.forecast[K] - S) < 1e-2 * np.linalg.norm(S)


def test_gamma_inverse_trace_matches_direct():
    seq = gen_model_sequence("nonautonomous-random", 6, 3, 2, 8, m_scale=0.6)
    gi = gamma_inverse_trace(seq)
    aggs = aggregate_trace(seq)
    assert gi[0] is None and gi[1] is None
    for k in range(2, 5):
        ref = gamma_inverse(aggs[k].gamma)
        if ref is not None and gi[k] is not None:
            assert rel_frobenius(gi[k], ref) < 1e-6


def test_audit_free_forecast_equality():
    rng = np.random.default_rng(1)
    seq = [ModelStep(0.8 * rng.standard_normal((5, 5)), np.zeros((1, 5)), np.eye(1)) for _ in range(20)]
    P0 = random_spd(5, 5, 2)
    Ps, _ = riccati_trace(P0, seq)
    aud = bound_audit(Ps, aggregate_trace(seq), P0)
    a = aud.absolute["bound1"]
    s = aud.scale["bound1"]
    assert np.all(np.abs(a) <= 1e-10 * s)
    assert aud.evaluated("bound2") == 0


@pytest.mark.parametrize("seed", range(3))
def test_audit_observed_run(seed):
    seq = gen_model_sequence("nonautonomous-random", 8, 3, seed, 50, m_scale=gaussian_scale_for_n0(8, 4))
    P0 = random_spd(8, 8, seed + 1)
    Ps, _ = riccati_trace(P0, seq)
    aud = bound_audit(Ps, aggregate_trace(seq), P0, gamma_inv=gamma_inverse_trace(seq))
    for name in ("bound0_lower", "bound0", "bound1", "bound2", "bound3"):
        assert aud.worst(name) >= -1e-8
    assert aud.evaluated("bound2") > 40


def test_audit_noisy_bound0():
    rng = np.random.default_rng(4)
    seq = gen_model_sequence("nonautonomous-random", 6, 2, 4, 30, m_scale=0.5)
    Qs = [0.05 * random_spd(6, 3, rng) for _ in range(30)]
    noisy = with_noise(seq, Qs)
    P0 = random_spd(6, 6, 3)
    Ps, _ = riccati_trace(P0, noisy)
    aud = bound_audit(Ps, aggregate_trace(noisy), P0, noises=[np.zeros((6, 6))] + Qs)
    assert aud.worst("bound0_lower") >= -1e-8
    assert aud.worst("bound0") >= -1e-8
    # only k = 0 precedes the first noise injection
    assert aud.evaluated("bound1") == 1


def test_collapse_rate_bounds(small_suite):
    seq, qp, cls = small_suite
    K = 60
    P0 = random_spd(N, N, 7)
    sigma10 = np.linalg.eigvalsh(P0)[-1]
    tr = run_filter(P0, seq, K, keep_forecast=range(K + 1))
    stable = cls.stable
    for k in range(1, K + 1):
        fts = finite_time_svd(seq, k)
        P = tr.forecast[k]
        m = ratebound_margins(P, fts, sigma10, stable)
        # roundoff floor of the dense P plus a relative slack on the bound
        tol = 1e-10 * sigma10 * np.exp(2 * fts.log_s[list(stable)]) + 1e-14 * np.linalg.norm(P, 2)
        assert np.all(m >= -tol)
        # at least s eigenvalues below sigma_1^0 exp(2 lambda_{n-s+1}^k k)
        w = np.sort(tr.forecast_eigs[k])
        for s in range(1, len(stable) + 1):
            bound = sigma10 * np.exp(2 * fts.log_s[N - s])
            assert np.sum(w <= bound * (1 + 1e-8)) >= s
        em = expdecay_bound_margins(tr.forecast_eigs[k][None, :], fts.log_s[None, :], sigma10)
        assert np.all(em >= -1e-6)
        assert np.array_equal(convrate_margins(tr.forecast_eigs[k], fts.log_s, sigma10), em[0])


def test_strong_collapse(small_suite):
    seq, qp, cls = small_suite
    tr = run_filter(random_spd(N, N, 9), seq)
    U = qp.bases[600]
    norms = stable_norms(tr.final, U, cls.stable)
    assert np.max(norms) < 1e-6
    X = random_factor(N, N, 3)
    assert np.max(stable_norms(X @ X.T, U, cls.stable)) > 1e-6
