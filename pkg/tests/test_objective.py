import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import brentq

from noisefit import tensor as T
from noisefit.errors import ConfigError, EmptyTargetError
from noisefit.objective import (LossConfig, combine, consistency_loss, ce_loss, hybrid_objective, soft_ce_loss,
                                soft_targets)
from noisefit.tensor import Tensor, backward, grad_check


def test_defaults():
    c = LossConfig()
    assert (c.lambda_ce, c.lambda_consistency, c.temperature) == (0.5, 0.1, 2.0)


def test_ce_uniform_logits():
    assert ce_loss(Tensor(np.zeros((1, 3, 4))), np.array([[0, 1, 3]])).item() == pytest.approx(math.log(4))


def test_ce_perfect_prediction_limit():
    z = np.full((1, 2, 4), -50.0)
    z[0, 0, 1] = z[0, 1, 2] = 50.0
    assert ce_loss(Tensor(z), np.array([[1, 2]])).item() < 1e-40


def test_ce_matches_scalar_loop():
    rng = np.random.default_rng(0)
    z, y, m = rng.normal(size=(1, 3, 5)), rng.integers(0, 5, (1, 3)), np.array([[1.0, 0.0, 1.0]])
    total = 0.0
    for t in (0, 2):
        lse = math.log(sum(math.exp(v) for v in z[0, t]))
        total += lse - z[0, t, y[0, t]]
    assert ce_loss(Tensor(z), y, m).item() == pytest.approx(total / 2, rel=1e-13)


def test_empty_mask_is_an_error():
    with pytest.raises(EmptyTargetError):
        ce_loss(Tensor(np.zeros((1, 2, 3))), np.zeros((1, 2), int), np.zeros((1, 2)))


def test_soft_target_examples():
    z = np.array([[[0.0, math.log(2)]]])
    np.testing.assert_allclose(soft_targets(z, 0.5)[0, 0], [0.2, 0.8], rtol=1e-12)
    np.testing.assert_allclose(soft_targets(z, 1.0), T.softmax(Tensor(z)).data)
    np.testing.assert_allclose(soft_targets(z, 1e9)[0, 0], [0.5, 0.5], atol=1e-9)
    with pytest.raises(ConfigError):
        soft_targets(z, 0.0)


def test_soft_ce_zero_on_equal_logits():
    z = np.random.default_rng(1).normal(size=(2, 3, 5))
    assert abs(soft_ce_loss(soft_targets(z, 1.0), Tensor(z)).item()) < 1e-12


def test_soft_ce_matches_scalar_loop():
    rng = np.random.default_rng(2)
    clean, noisy = rng.normal(size=(1, 2, 3)), rng.normal(size=(1, 2, 3))
    p = soft_targets(clean, 2.0)
    total = 0.0
    for t in range(2):
        q = np.exp(noisy[0, t]) / np.exp(noisy[0, t]).sum()
        total += sum(p[0, t, k] * math.log((p[0, t, k] + 1e-12) / (q[k] + 1e-12)) for k in range(3))
    assert soft_ce_loss(p, Tensor(noisy)).item() == pytest.approx(total / 2, rel=1e-12)


def test_consistency_examples():
    z = np.random.default_rng(3).normal(size=(2, 3, 4))
    assert consistency_loss(Tensor(z), Tensor(z)).item() == 0.0
    shifted = z + np.random.default_rng(4).normal(size=(2, 3, 1)) * 5
    assert abs(consistency_loss(Tensor(z), Tensor(shifted)).item()) < 1e-12
    two = consistency_loss(Tensor(np.array([[[0.0, 0.0]]])), Tensor(np.array([[[0.0, math.log(3)]]]))).item()
    assert two == pytest.approx(0.5 * math.log(0.5 / 0.25) + 0.5 * math.log(0.5 / 0.75), rel=1e-10)
    assert two == pytest.approx(0.1438, abs=1e-4)


def test_combine_examples():
    b = combine(2.0, 1.0, 0.4, LossConfig(lambda_ce=0.5, lambda_consistency=0.1))
    assert b.l_hybrid.item() == pytest.approx(1.5)
    assert b.l_final.item() == pytest.approx(1.54)
    b = combine(2.0, 1.0, 0.4, LossConfig(lambda_ce=1.0, lambda_consistency=0.0))
    assert b.l_final.item() == 2.0


def test_zero_ce_weight_cuts_clean_path():
    z = Tensor(np.random.default_rng(5).normal(size=(1, 2, 4)), requires_grad=True)
    b = combine(ce_loss(z, np.array([[1, 2]])), Tensor(0.3), Tensor(0.1), LossConfig(lambda_ce=0.0))
    backward(b.l_final)
    np.testing.assert_array_equal(z.grad, np.zeros_like(z.data))


def test_config_validation():
    for bad in (dict(lambda_ce=1.5), dict(lambda_consistency=-0.1), dict(temperature=0), dict(soft_source="x")):
        with pytest.raises(ConfigError):
            LossConfig(**bad)


def bundle(seed=0, mask=None, cfg=LossConfig()):
    rng = np.random.default_rng(seed)
    c, n1, n2 = (Tensor(rng.normal(size=(2, 3, 5)), requires_grad=True) for _ in range(3))
    y = rng.integers(0, 5, (2, 3))
    return hybrid_objective(c, n1, n2, y, mask if mask is not None else np.ones((2, 3)), cfg), (c, n1, n2)


@given(st.integers(0, 10_000), st.floats(0, 1), st.floats(0, 2))
def test_bundle_invariants(seed, lam, lam_c):
    cfg = LossConfig(lambda_ce=lam, lambda_consistency=lam_c)
    b, _ = bundle(seed, cfg=cfg)
    assert b.l_soft.item() >= 0 and b.l_consistency.item() >= 0
    assert b.l_hybrid.item() == pytest.approx(lam * b.l_ce.item() + (1 - lam) * b.l_soft.item(), abs=1e-12)
    assert b.l_final.item() == pytest.approx(b.l_hybrid.item() + lam_c * b.l_consistency.item(), abs=1e-12)
    assert b.l_final.item() >= lam * b.l_ce.item() - 1e-12


def test_masking_ignores_outside_tokens():
    mask = np.array([[1.0, 1, 0], [0, 1, 1]])
    b1, (c, n1, n2) = bundle(7, mask)
    c.data[0, 2] += 5
    n1.data[1, 0] -= 3
    n2.data[0, 2] *= 2
    rng = np.random.default_rng(7)
    for _ in range(3):
        rng.normal(size=(2, 3, 5))
    y = rng.integers(0, 5, (2, 3))
    y[0, 2] = (y[0, 2] + 1) % 5
    b2 = hybrid_objective(c, n1, n2, y, mask, LossConfig())
    assert b1.values() == b2.values()


def test_soft_targets_are_constants():
    b, (c, n1, n2) = bundle(3, cfg=LossConfig(lambda_ce=0.0, lambda_consistency=0.0))
    backward(b.l_final)
    np.testing.assert_array_equal(c.grad, np.zeros_like(c.data))
    assert np.any(n1.grad != 0)


def test_hybrid_gradient_matches_fd():
    rng = np.random.default_rng(9)
    n1, n2 = rng.normal(size=(1, 3, 4)), rng.normal(size=(1, 3, 4))
    y = np.array([[0, 3, 1]])
    clean = Tensor(rng.normal(size=(1, 3, 4)))
    # soft targets are constants, so only the noisy branches are compared against differences
    f = lambda z: hybrid_objective(clean, z, Tensor(n2) - z * 0.2, y, None, LossConfig()).l_final
    assert grad_check(f, Tensor(n1.copy(), requires_grad=True)) < 1e-7


def test_mean_soft_source():
    b_first, _ = bundle(4)
    b_mean, _ = bundle(4, cfg=LossConfig(soft_source="mean"))
    assert b_first.l_ce.item() == b_mean.l_ce.item()
    assert b_first.l_soft.item() != b_mean.l_soft.item()


def _fixed_point_nll(lam, tau, V):
    # p_y = lam + (1 - lam) * q_y with q = softmax(log p / tau), other classes tied
    def g(py):
        r = (1 - py) / (V - 1)
        qy = py ** (1 / tau) / (py ** (1 / tau) + (V - 1) * r ** (1 / tau))
        return lam + (1 - lam) * qy - py
    return -np.log(brentq(g, 1e-6, 1 - 1e-12))


@pytest.mark.parametrize("tau", [2.0, 4.0])
def test_noise_free_hybrid_plateaus_at_self_distillation_fixed_point(tau):
    # with stop-grad soft targets and tau > 1, free logits cannot drive l_ce to 0
    V, cfg = 256, LossConfig(lambda_ce=0.5, lambda_consistency=0.1, temperature=tau)
    z = Tensor(np.zeros((1, 1, V)), requires_grad=True)
    targets, mask = np.array([[7]]), np.ones((1, 1))
    for _ in range(3000):
        z.grad = None
        b = hybrid_objective(z, z, z, targets, mask, cfg)
        backward(b.l_final)
        z.data -= 2.0 * z.grad
    assert float(b.l_ce.data) == pytest.approx(_fixed_point_nll(0.5, tau, V), rel=1e-6)


def test_unit_temperature_has_no_plateau():
    V, cfg = 256, LossConfig(lambda_ce=0.5, temperature=1.0)
    z = Tensor(np.zeros((1, 1, V)), requires_grad=True)
    for _ in range(3000):
        z.grad = None
        b = hybrid_objective(z, z, z, np.array([[7]]), np.ones((1, 1)), cfg)
        backward(b.l_final)
        z.data -= 2.0 * z.grad
    assert float(b.l_ce.data) < 0.01
