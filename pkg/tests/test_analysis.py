import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import expit

from conftest import random_batch
from sigattn.analysis import (
    GradcheckError,
    ProbeError,
    composed_jacobian_probe,
    finite_diff_gradient,
    gradcheck_attention,
    jacobian_norm_probe,
    rel_err,
    sigmoid_derivative_scan,
    spectral_norm,
)
from sigattn.kernel import TileConfig
from sigattn.reference import AttentionConfig

SIG = AttentionConfig()


def test_rel_err_convention():
    assert rel_err(np.zeros(3), np.zeros(3)) == 0.0
    assert rel_err([1.0, 2.0], [1.0, 2.5]) == pytest.approx(0.5 / 2.5)
    assert rel_err([0.0], [1e-13]) == pytest.approx(1e-13 / 1e-12)


def test_fd_quadratic():
    g = finite_diff_gradient(lambda x: np.sum(x**2), np.array([1.0, 2.0]))
    assert np.allclose(g, [2.0, 4.0], atol=1e-8, rtol=0)


def test_fd_sigmoid_at_zero():
    g = finite_diff_gradient(lambda x: expit(x[0]), np.array([0.0]))
    assert abs(g[0] - 0.25) <= 1e-9


def test_fd_names_nonfinite_coordinate():
    def f(x):
        return np.inf if x[1] > 0.5 else 0.0

    with pytest.raises(ProbeError, match=r"\(1,\)"):
        finite_diff_gradient(f, np.array([0.0, 0.5]))


def test_fd_does_not_mutate_input():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    finite_diff_gradient(lambda t: np.sum(t**3), x)
    assert np.array_equal(x, [[1.0, 2.0], [3.0, 4.0]])


def test_derivative_scan_examples():
    assert sigmoid_derivative_scan([0.0]) == (0.25, 0.0)
    peak, _ = sigmoid_derivative_scan([-100.0, 100.0])
    assert peak < 1e-40
    grid = np.arange(-10_000, 10_001) * 1e-3
    peak, at = sigmoid_derivative_scan(grid)
    assert 0 <= 0.25 - peak < 1e-7 and abs(at) <= 1e-3


def test_spectral_norm_against_svd(rng):
    for _ in range(20):
        a = rng.standard_normal((6, 6))
        a = a @ a.T
        assert spectral_norm(a, iters=500) == pytest.approx(np.linalg.norm(a, 2), rel=1e-6)


def test_softmax_jacobian_two_scores():
    # independent route: eigenvalues of the symmetric Jacobian
    p = expit(2.0)  # softmax([1, -1])[0]
    j = np.array([[p * (1 - p), -p * (1 - p)], [-p * (1 - p), p * (1 - p)]])
    want = np.max(np.abs(np.linalg.eigvalsh(j)))
    rep = jacobian_norm_probe([1.0, -1.0], [0.0, 1.0])
    assert rep.softmax_spectral_norms[0] == pytest.approx(0.5, abs=1e-10)
    assert rep.softmax_spectral_norms[1] == pytest.approx(want, abs=1e-10)
    assert rep.sigmoid_spectral_norms[0] == pytest.approx(0.25, abs=1e-12)


@given(
    arrays(np.float64, st.integers(1, 10), elements=st.floats(-20, 20)),
    st.lists(st.floats(0.01, 200), min_size=1, max_size=4),
)
def test_probe_invariants(row, scales):
    rep = jacobian_norm_probe(row, scales)
    assert all(x <= 0.25 for x in rep.sigmoid_spectral_norms)
    assert all(x == 0.0 for x in rep.sigmoid_max_offdiag)
    assert all(x <= 0.25 for x in rep.sigmoid_max_diag)
    assert all(x <= 0.5 + 1e-9 for x in rep.softmax_spectral_norms)


def test_softmax_coupling_present(rng):
    for n in range(2, 9):
        rep = jacobian_norm_probe(rng.standard_normal(n), [1.0])
        assert rep.softmax_max_offdiag[0] > 0


def test_probe_report_table_and_dict():
    rep = jacobian_norm_probe([0.3, -0.2, 1.0], [1, 10])
    assert rep.to_dict()["scale_factors"] == [1.0, 10.0]
    assert len(rep.table().splitlines()) == 3


def test_composed_probe_contrast(rng):
    x, wq, wk, wv = (rng.standard_normal((4, 4)) for _ in range(4))
    out = composed_jacobian_probe(x, wq, wk, wv, [1.0, 4.0])
    assert len(out["softmax"]) == 2 and all(np.isfinite(out["sigmoid"]))
    with pytest.raises(ValueError):
        composed_jacobian_probe(rng.standard_normal((5, 4)), wq, wk, wv, [1.0])


def test_gradcheck_small_instance(rng):
    b = random_batch(rng, 1, 4, 1, 2, n_q=[4])
    rep = gradcheck_attention(b, SIG, TileConfig(2, 2))
    assert rep.worst <= 1e-6


@given(st.integers(0, 2**31 - 1), st.sampled_from([1, 2, 3, 8]), st.sampled_from([1, 2, 3, 8]))
def test_gradcheck_random(seed, bm, bn):
    rng = np.random.default_rng(seed)
    b = random_batch(rng, int(rng.integers(1, 3)), int(rng.integers(1, 9)), int(rng.integers(1, 3)), 2)
    assert gradcheck_attention(b, SIG, TileConfig(bm, bn), seed=seed).worst <= 1e-6


def test_gradcheck_zero_upstream(rng):
    b = random_batch(rng, 1, 5, 1, 2)
    rep = gradcheck_attention(b, SIG, TileConfig(2, 2), dO=np.zeros_like(b.q))
    assert rep.to_dict() == {"max_rel_err_dq": 0.0, "max_rel_err_dk": 0.0, "max_rel_err_dv": 0.0, "worst": 0.0}


def test_gradcheck_saturated_is_finite(rng):
    b = random_batch(rng, 1, 4, 1, 2, n_q=[4])
    rep = gradcheck_attention(b, AttentionConfig(bias_mode="fixed", bias=30.0), TileConfig(2, 2), fail_above=None)
    assert np.isfinite(rep.worst)


def test_gradcheck_catches_injected_bug(rng):
    b = random_batch(rng, 1, 4, 1, 2, n_q=[4])
    with pytest.raises(GradcheckError, match="dQ"):
        gradcheck_attention(b, SIG, TileConfig(2, 2), perturb_dq=1e-2)


def test_gradcheck_size_limit(rng):
    b = random_batch(rng, 2, 80, 1, 2)
    with pytest.raises(ValueError):
        gradcheck_attention(b, SIG, TileConfig())
