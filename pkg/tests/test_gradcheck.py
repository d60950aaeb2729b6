import numpy as np
import pytest

from refgate import AttnConfig, forward, make_rng, rand_matrix, row_softmax
from refgate.gradcheck import (NumericalError, UsageError, backward_scalar_loss,
                               check_gradients, compare, finite_difference, make_problem,
                               matmul_backward)


def test_fd_constant_loss():
    g = finite_difference(lambda p: 3.0, np.ones((2, 3)))
    assert not g.any()


def test_fd_sum_of_squares_at_identity():
    g = finite_difference(lambda p: float((p ** 2).sum()), np.eye(3))
    np.testing.assert_allclose(g, 2 * np.eye(3), atol=1e-9)


def test_fd_softmax_jacobian():
    x = np.array([[0.3, -1.2, 0.8]])
    s = row_softmax(x)[0]
    J = np.diag(s) - np.outer(s, s)
    analytic = J.T @ (2 * s)
    numeric = finite_difference(lambda p: float((row_softmax(p) ** 2).sum()), x)
    rel = np.abs(numeric[0] - analytic) / np.maximum(np.abs(analytic), 1e-8)
    assert rel.max() < 1e-6


def test_quadratic_gradient():
    rng = make_rng(0)
    A, x = rand_matrix(4, 3, rng), rand_matrix(3, 1, rng)
    expected = 2 * A.T @ A @ x
    # reverse mode through y = A x, loss = |y|^2
    _, dx = matmul_backward(A, x, 2 * (A @ x))
    np.testing.assert_allclose(dx, expected, atol=1e-14)
    numeric = finite_difference(lambda p: float(((A @ p) ** 2).sum()), x)
    np.testing.assert_allclose(numeric, expected, atol=1e-8)


def test_fd_rejects_bad_step_and_nonfinite_loss():
    with pytest.raises(ValueError):
        finite_difference(lambda p: 0.0, np.ones((1, 1)), h=0.0)

    def loss(p):
        return float("nan") if p[1, 0] > 1.0 else 0.0

    with pytest.raises(NumericalError, match=r"\(1, 0\)"):
        finite_difference(loss, np.ones((2, 2)))


def test_backward_needs_cache():
    cfg = AttnConfig(2, 2, 2, M=1, gating_mode="aicg")
    H_src, H_ref, w, _ = make_problem(cfg, 0)
    trace, gm = forward(H_src, H_ref, w, cfg)
    with pytest.raises(UsageError):
        backward_scalar_loss(trace, gm, w, cfg)


@pytest.mark.parametrize("mode", ["vanilla", "global", "explicit", "aicg"])
def test_zero_linear_blocks_upstream_gradients(mode):
    cfg = AttnConfig(3, 4, 4, M=2, gating_mode=mode)
    H_src, H_ref, w, _ = make_problem(cfg, 1, zero_linear_scale=0.0)
    trace, gm = forward(H_src, H_ref, w, cfg, cache=True)
    grads = backward_scalar_loss(trace, gm, w, cfg)
    for name in ("W_Q", "W_K", "W_V", "to_out", "T_S"):
        assert not grads[name].any(), name
    assert grads["global_gate_logit"] == 0.0
    assert grads["zero_linear"].any()


def test_tiny_config_against_fd():
    cfg = AttnConfig(3, 4, 4, heads=1, M=2, gating_mode="aicg")
    res = check_gradients(cfg, seed=0, h=1e-5)
    for r in res.reports:
        assert r.max_rel_err < 1e-5, (r.param, r.max_rel_err)


@pytest.mark.parametrize("mode", ["vanilla", "global", "explicit"])
@pytest.mark.parametrize("placement", ["before-zero-linear", "before-to-out"])
def test_baseline_modes_against_fd(mode, placement):
    cfg = AttnConfig(3, 5, 4, heads=2, M=2, gating_mode=mode, gate_placement=placement)
    assert check_gradients(cfg, seed=3).max_rel_err < 1e-4


def test_summary_tokens_are_trainable_in_logit_mode():
    cfg = AttnConfig(4, 5, 4, heads=2, M=3, gating_mode="aicg")
    res = check_gradients(cfg, seed=4, params=("T_S",))
    assert np.linalg.norm(res.report("T_S").analytic) > 1e-6


def test_summary_tokens_dead_in_softmax_output_mode():
    cfg = AttnConfig(4, 5, 4, heads=2, M=3, gating_mode="aicg", aggregation="softmax-output")
    res = check_gradients(cfg, seed=4, params=("T_S",))
    assert np.linalg.norm(res.report("T_S").analytic) < 1e-10
    assert np.linalg.norm(res.report("T_S").numeric) < 1e-10


def test_relative_error_floor():
    r = compare("x", np.array([0.0, 1.0]), np.array([1e-12, 1.0]), 1e-5)
    assert r.max_rel_err == pytest.approx(1e-4)
    assert r.max_abs_err == pytest.approx(1e-12)


def test_planted_sign_flip_is_detected():
    cfg = AttnConfig(3, 4, 4, M=2, gating_mode="aicg")

    def broken(*args, **kw):
        g = backward_scalar_loss(*args, **kw)
        g["W_V"] = -g["W_V"]
        return g

    res = check_gradients(cfg, seed=0, backward=broken)
    assert res.report("W_V").max_rel_err > 1.0
