import numpy as np
import pytest

from kfcollapse.errors import InputContractError
from kfcollapse.linalg import principal_angles
from kfcollapse.lyapunov import (
    adjoint_qr_pass,
    classify_spectrum,
    finite_time_svd,
    forward_qr_pass,
    ginelli_clv_pass,
    log_det_average,
)
from kfcollapse.models import gen_model_sequence


def _axes_match(Q, tol=1e-8):
    return np.allclose(np.abs(Q), np.eye(Q.shape[0]), atol=tol)


def test_qr_diagonal_autonomous():
    M = np.diag([2.0, 0.5])
    qp = forward_qr_pass([M] * 200, seed=1, keep=[200], transient=10)
    assert np.allclose(qp.exponents, [np.log(2), -np.log(2)], atol=1e-10)
    assert _axes_match(qp.bases[200])


def test_qr_triangular_spectrum():
    rng = np.random.default_rng(0)
    M = np.triu(rng.standard_normal((5, 5)))
    M[np.diag_indices(5)] = [3.0, -1.5, 0.7, 0.2, -0.05]
    qp = forward_qr_pass([M] * 3000, seed=2, transient=500)
    ref = np.sort(np.log(np.abs(np.diag(M))))[::-1]
    assert np.allclose(qp.exponents, ref, atol=1e-3)


def test_qr_bad_arguments():
    with pytest.raises(InputContractError):
        forward_qr_pass([np.eye(2)], K=2)
    with pytest.raises(InputContractError):
        forward_qr_pass([np.eye(2)] * 3, transient=3)


def test_exponent_sum_equals_log_det():
    seq = gen_model_sequence("nonautonomous-random", 8, 2, 0, 500)
    qp = forward_qr_pass(seq)
    assert abs(qp.exponents.sum() - log_det_average(seq)) < 1e-6


def test_adjoint_diagonal():
    V = adjoint_qr_pass([np.diag([0.5, 3.0, 1.0])] * 100, seed=4)
    assert np.allclose(np.abs(V), np.eye(3)[:, [1, 2, 0]], atol=1e-8)


def test_adjoint_matches_finite_time_svd():
    seq = gen_model_sequence("nonautonomous-random", 6, 2, 1, 400)
    V = adjoint_qr_pass(seq, seed=3)
    assert np.allclose(V.T @ V, np.eye(6), atol=1e-10)
    fts = finite_time_svd(seq, 400)
    for i in range(1, 6):
        ang = principal_angles(V[:, :i], fts.V[:, :i])
        assert np.max(ang) < 1e-4


def test_finite_time_svd_examples():
    assert np.allclose(finite_time_svd(np.eye(3), 5).exponents, 0.0)
    f = finite_time_svd(np.diag([np.e**2, np.e**-1]), 1)
    assert np.allclose(f.exponents, [2.0, -1.0])
    with pytest.raises(InputContractError):
        finite_time_svd(np.eye(2), 0)


@pytest.mark.parametrize("k", [1, 5, 20])
def test_finite_time_svd_reconstructs(k):
    seq = gen_model_sequence("nonautonomous-random", 10, 2, 3, k)
    Mk = np.eye(10)
    for s in seq:
        Mk = s.M @ Mk
    f = finite_time_svd(seq, k)
    rec = (f.U * f.s) @ f.V.T
    assert np.linalg.norm(rec - Mk) <= 1e-8 * np.linalg.norm(Mk)
    if k <= 5:
        # the dense product loses its smallest singular values for longer spans
        g = finite_time_svd(Mk, k)
        assert np.allclose(g.exponents, f.exponents, atol=1e-8)


def test_finite_time_svd_long_span_stays_finite():
    seq = gen_model_sequence("nonautonomous-random", 6, 2, 7, 1500)
    f = finite_time_svd(seq, 1500)
    assert np.all(np.isfinite(f.log_s))
    assert np.allclose(f.U.T @ f.U, np.eye(6), atol=1e-10)
    assert np.allclose(f.V.T @ f.V, np.eye(6), atol=1e-10)
    assert np.all(np.diff(f.log_s) <= 0)


def test_finite_time_converges_to_qr():
    seq = gen_model_sequence("nonautonomous-random", 10, 2, 5, 2000)
    qp = forward_qr_pass(seq)
    f = finite_time_svd(seq, 2000)
    assert np.max(np.abs(f.exponents - qp.exponents)) < 0.02


def test_clv_diagonal():
    clv = ginelli_clv_pass([np.diag([2.0, 1.0, 0.3])] * 120, transient=40)
    for C in clv.clvs.values():
        assert _axes_match(C)


def test_clv_eigenvectors_and_residual():
    rng = np.random.default_rng(8)
    V = rng.standard_normal((4, 4))
    D = np.diag([1.6, 1.1, 0.7, 0.4])
    M = V @ D @ np.linalg.inv(V)
    clv = ginelli_clv_pass([M] * 300, transient=60, seed=1)
    Vn = V / np.linalg.norm(V, axis=0)
    C = clv.clvs[150]
    for i in range(4):
        c = abs(C[:, i] @ Vn[:, i])
        assert np.arccos(min(c, 1.0)) < 1e-4
    # covariance: M c_i^k is parallel to c_i^{k+1} with stretch from the stored logs
    ks = list(clv.window)
    for j, k in enumerate(ks[:-1]):
        lhs = M @ clv.clvs[k]
        rhs = clv.clvs[k + 1] * np.exp(clv.log_stretch[j])
        err = np.linalg.norm(lhs - rhs, axis=0)
        assert np.all(err < 1e-6)


def test_clv_span_matches_blv():
    seq = gen_model_sequence("nonautonomous-random", 8, 2, 2, 400, m_scale=0.5)
    clv = ginelli_clv_pass(seq, seed=0)
    k = clv.window[len(clv.window) // 2]
    for n0 in (1, 3, 5):
        ang = principal_angles(clv.clvs[k][:, :n0], clv.blvs[k][:, :n0])
        assert np.max(ang) < 1e-4


def test_clv_stretch_transitivity():
    seq = gen_model_sequence("nonautonomous-random", 6, 2, 4, 200)
    clv = ginelli_clv_pass(seq)
    logs = clv.log_stretch
    ks = list(clv.window)
    # Lambda_{k:l} from the propagated covariant vectors themselves; kept
    # short because forward propagation pulls the lower vectors upward
    l, k = ks[0], ks[5]
    C = clv.clvs[l]
    for j in range(l, k):
        C = seq[j].M @ C
    direct = np.log(np.linalg.norm(C, axis=0))
    assert np.allclose(direct, logs[:5].sum(axis=0), atol=1e-8)
    # Lambda_{k:0} = Lambda_{k:l} Lambda_{l:0}
    C = clv.clvs[l]
    for j in range(l, l + 2):
        C = seq[j].M @ C
    C = C / np.linalg.norm(C, axis=0)
    for j in range(l + 2, k):
        C = seq[j].M @ C
    assert np.allclose(logs[:2].sum(axis=0) + np.log(np.linalg.norm(C, axis=0)), direct, atol=1e-8)


def test_classify_examples():
    c = classify_spectrum([0.5, 1e-4, -0.3], 1e-2)
    assert c.n0 == 2 and c.neutral == (1,)
    assert c.stable == (2,)
    assert classify_spectrum([-1.0, -2.0], 1e-3).n0 == 0


def test_classify_sorts_and_counts():
    c = classify_spectrum([-0.3, 0.5, 0.1], 1e-3)
    assert c.n0 == 2 and c.n0 + len(c.stable) == 3
