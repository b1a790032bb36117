import numpy as np
import pytest

import povseg.grad as grad_mod
from povseg.errors import NonFiniteError
from povseg.grad import (
    Gradients,
    backward,
    finite_diff,
    gradcheck,
    random_instance,
    relative_errors,
)
from povseg.losses import LossWeights


def test_zero_weights_zero_gradients():
    snapshot, state, gt, _ = random_instance(0)
    _, grads = backward(snapshot, state, gt, LossWeights(0, 0, 0, 0, 0))
    assert not grads.g_t_per.any()
    assert not grads.g_w_z.any()
    assert not grads.g_w_m.any()
    assert grads.g_b_m == 0.0


def test_alpha_one_kills_text_gradient():
    snapshot, state, gt, weights = random_instance(0)
    state.alpha = 1.0
    _, grads = backward(snapshot, state, gt, weights)
    np.testing.assert_array_equal(grads.g_t_per, np.zeros_like(state.t_per))


def test_text_gradient_scales_with_one_minus_alpha():
    # forcing f_per = t_per keeps the forward pass identical across alphas,
    # isolating the chain-rule factor (1 - alpha) on the text gradient
    snapshot, state, gt, weights = random_instance(3)
    state.f_per = state.t_per.copy()
    state.alpha = 0.0
    _, g0 = backward(snapshot, state, gt, weights)
    state.alpha = 0.4
    _, g4 = backward(snapshot, state, gt, weights)
    np.testing.assert_allclose(g4.g_t_per, 0.6 * g0.g_t_per, rtol=1e-12)


def test_backward_matches_finite_differences():
    snapshot, state, gt, weights = random_instance(0)
    _, analytic = backward(snapshot, state, gt, weights)
    numeric = finite_diff(snapshot, state, gt, weights, eps=1e-4)
    errors = relative_errors(analytic, numeric)
    assert max(errors.values()) <= 1e-5


def test_backward_matches_fd_without_negative_branch():
    snapshot, state, gt, weights = random_instance(4)
    state.negative_enabled = False
    _, analytic = backward(snapshot, state, gt, weights)
    numeric = finite_diff(snapshot, state, gt, weights, eps=1e-4)
    assert max(relative_errors(analytic, numeric).values()) <= 1e-5
    assert not analytic.g_w_z.any() and not analytic.g_w_m.any()


def test_frozen_tensors_untouched():
    snapshot, state, gt, weights = random_instance(1)
    before = (snapshot.t_open.copy(), snapshot.z_open.copy(), snapshot.m_open.copy(),
              state.f_per.copy())
    for _ in range(3):
        backward(snapshot, state, gt, weights)
    np.testing.assert_array_equal(snapshot.t_open, before[0])
    np.testing.assert_array_equal(snapshot.z_open, before[1])
    np.testing.assert_array_equal(snapshot.m_open, before[2])
    np.testing.assert_array_equal(state.f_per, before[3])


def test_finite_diff_quadratic_stub(monkeypatch):
    """With the loss stubbed to ||theta||^2 the FD machinery returns 2*theta."""

    def quadratic(snapshot, state, gt, weights):
        return (float(state.t_per @ state.t_per) + float(state.w_z @ state.w_z)
                + float(state.w_m @ state.w_m) + state.b_m ** 2)

    monkeypatch.setattr(grad_mod, "_loss_at", quadratic)
    snapshot, state, gt, weights = random_instance(2)
    grads = finite_diff(snapshot, state, gt, weights, eps=1e-4)
    np.testing.assert_allclose(grads.g_t_per, 2 * state.t_per, atol=1e-8)
    np.testing.assert_allclose(grads.g_w_z, 2 * state.w_z, atol=1e-8)
    np.testing.assert_allclose(grads.g_w_m, 2 * state.w_m, atol=1e-8)
    assert grads.g_b_m == pytest.approx(2 * state.b_m, abs=1e-8)


def test_finite_diff_richardson_consistency():
    snapshot, state, gt, weights = random_instance(5)
    coarse = finite_diff(snapshot, state, gt, weights, eps=1e-4)
    fine = finite_diff(snapshot, state, gt, weights, eps=1e-5)
    assert max(relative_errors(coarse, fine).values()) <= 1e-4


def test_finite_diff_constant_loss_is_zero():
    snapshot, state, gt, _ = random_instance(6)
    grads = finite_diff(snapshot, state, gt, LossWeights(0, 0, 0, 0, 0))
    assert not grads.g_t_per.any() and grads.g_b_m == 0.0


def test_gradcheck_passes_and_reports():
    report = gradcheck(seed=0)
    assert report.passed
    assert set(report.errors) == {"t_per", "w_z", "w_m", "b_m"}
    assert "PASS" in report.summary()


def test_gradcheck_infinite_tolerance_always_passes():
    report = gradcheck(seed=1, tol=float("inf"))
    assert report.passed


def test_corrupted_gradient_fails_check():
    snapshot, state, gt, weights = random_instance(0)
    _, analytic = backward(snapshot, state, gt, weights)
    numeric = finite_diff(snapshot, state, gt, weights)
    corrupted = Gradients(g_t_per=analytic.g_t_per + 0.1,
                          g_w_z=analytic.g_w_z, g_w_m=analytic.g_w_m,
                          g_b_m=analytic.g_b_m)
    assert max(relative_errors(corrupted, numeric).values()) > 1e-5


def test_non_finite_input_names_stage():
    snapshot, state, gt, weights = random_instance(0)
    state.t_per[0] = np.nan
    with pytest.raises(NonFiniteError) as excinfo:
        backward(snapshot, state, gt, weights)
    assert excinfo.value.stage == "forward"


def test_backward_rejects_bank_tiled_snapshots():
    snapshot, state, gt, weights = random_instance(0)
    from povseg.snapshot import FrozenSnapshot
    doubled = FrozenSnapshot(
        t_open=snapshot.t_open,
        z_open=np.vstack([snapshot.z_open, snapshot.z_open]),
        m_open=np.concatenate([snapshot.m_open, snapshot.m_open], axis=2),
        vocab_names=snapshot.vocab_names,
        logit_scale=snapshot.logit_scale,
    )
    from povseg.errors import InvariantError
    with pytest.raises(InvariantError):
        backward(doubled, state, gt, weights)
