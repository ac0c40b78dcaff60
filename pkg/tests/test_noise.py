import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from noisefit import tensor as T
from noisefit.errors import ConfigError, InputError, NumericError
from noisefit.noise import (NoiseConfig, NoisePlan, NoiseState, effective_sigma, gate_value, inject,
                            noise_factor_logits, noise_factor_variance, robust_stats, weighting)
from noisefit.tensor import Rng, Tensor, backward, grad_check


def test_robust_stats_examples():
    assert robust_stats([1, 2, 3, 4, 5]) == (3.0, 1.0)
    assert robust_stats(np.full(4, 2.5)) == (2.5, 0.0)
    assert robust_stats([-1, 1]) == (0.0, 1.0)
    with pytest.raises(InputError):
        robust_stats([])


def test_weighting_examples():
    mad, eps = 0.7, 1e-6
    w = weighting(np.array([3.0, 3.0 + mad + eps]), 3.0, mad, 1.0, eps)
    assert w[0] == 1.0
    assert w[1] == pytest.approx(math.exp(-1), rel=1e-12)
    far = weighting(np.array([3.0, 4.0]), 3.0, 1.0, beta=1e6)
    assert far[0] == 1.0 and far[1] < 1e-300


@given(arrays(np.float64, 8, elements=st.floats(-10, 10)), st.floats(0.1, 5))
def test_weights_in_unit_interval(h, beta):
    med, mad = robust_stats(h)
    w = weighting(h, med, mad, beta)
    assert np.all((w > 0) | (np.abs(h - med) > 0)) and np.all(w <= 1)


def test_variance_factor_examples():
    h = np.random.default_rng(0).normal(size=(2, 3, 8))
    h = h / h.std(-1, keepdims=True)  # equal per-token variance
    eta = noise_factor_variance(Tensor(h)).data
    np.testing.assert_allclose(eta, math.e, rtol=1e-5)
    assert np.all(noise_factor_variance(Tensor(np.ones((1, 2, 4)))).data == 1.0)
    two = np.stack([np.array([1, -1, 1, -1.0]), math.sqrt(3) * np.array([1, -1, 1, -1.0])])[None]
    np.testing.assert_allclose(noise_factor_variance(Tensor(two)).data[0], [math.exp(0.5), math.exp(1.5)], rtol=1e-6)


def test_logits_factor_examples():
    assert noise_factor_logits(Tensor(np.zeros((1, 3, 4)))).data[0] == pytest.approx(4.0, rel=1e-5)
    peaked = np.zeros((1, 2, 5))
    peaked[..., 0] = 60.0
    # the eps guard leaves exp(-log(1 + eps)) at the limit
    assert noise_factor_logits(Tensor(peaked)).data[0] == pytest.approx(1.0, abs=1e-5)


def test_logits_factor_matches_scalar_loop():
    z = np.random.default_rng(3).normal(size=(2, 4, 3))
    eps = 1e-6
    for b in range(2):
        total = 0.0
        for t in range(4):
            ex = [math.exp(v) for v in z[b, t]]
            s = sum(ex)
            total += -sum((e / s) * math.log(e / s + eps) for e in ex)
        assert noise_factor_logits(Tensor(z)).data[b] == pytest.approx(math.exp(total / 4), rel=1e-12)


def test_effective_sigma_formula():
    rng = np.random.default_rng(1)
    h = rng.normal(size=(1, 2, 6))
    cfg = NoiseConfig(sigma_base=0.3, beta=1.5)
    state = NoiseState(alpha=0.8, noise_gate=0.5)
    sig = effective_sigma(Tensor(h), cfg, state).data
    v = h.var(-1)
    eta = np.clip(np.exp(v / (v.mean() + 1e-6)), 1, 10)
    for t in range(2):
        med, mad = robust_stats(h[0, t])
        w = weighting(h[0, t], med, mad, 1.5)
        np.testing.assert_allclose(sig[0, t], 0.3 * 0.8 * 0.5 * mad * w * eta[0, t], rtol=1e-12)


def test_eta_clamp_applies():
    h = np.zeros((1, 2, 4))
    h[0, 1] = [10, -10, 10, -10]
    sig_hi = effective_sigma(Tensor(h), NoiseConfig(eta_clamp=(1.0, 1.5)), NoiseState()).data
    sig_lo = effective_sigma(Tensor(h), NoiseConfig(eta_clamp=(1.0, 100.0)), NoiseState()).data
    assert sig_hi[0, 1].max() < sig_lo[0, 1].max()


@pytest.mark.parametrize("cfg,state", [
    (NoiseConfig(sigma_base=0.0), NoiseState()),
    (NoiseConfig(sigma_base=0.1), NoiseState(noise_gate=0.0)),
])
def test_identity_cases_return_input(cfg, state):
    h = Tensor(np.random.default_rng(0).normal(size=(2, 3, 8)))
    assert inject(h, cfg, state, Rng(0)) is h


def test_zero_mad_is_identity():
    h = np.ones((1, 2, 5)) * 3.0
    out = inject(Tensor(h), NoiseConfig(sigma_base=0.3), NoiseState(), Rng(0)).data
    np.testing.assert_array_equal(out, h)


def test_gate_is_validated():
    with pytest.raises(ConfigError):
        NoiseState(noise_gate=1.5)
    with pytest.raises(ConfigError):
        NoiseConfig(gate_schedule="linear:0:2")
    assert gate_value("linear:1:0", 5, 11) == pytest.approx(0.5)


def test_config_validation():
    for bad in (dict(sigma_base=-1), dict(beta=0), dict(epsilon=0), dict(eta_mode="x"), dict(eta_clamp=(2, 1))):
        with pytest.raises(ConfigError):
            NoiseConfig(**bad)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_sigma_reports_location():
    h = np.random.default_rng(0).normal(size=(1, 2, 4)) * 1e200
    with pytest.raises(NumericError, match="layer 3, batch 0"):
        inject(Tensor(h), NoiseConfig(sigma_base=1e200), NoiseState(), Rng(0), layer=3)


def test_logits_mode_needs_reference():
    with pytest.raises(ConfigError):
        inject(Tensor(np.random.default_rng(0).normal(size=(1, 2, 4))), NoiseConfig(eta_mode="logits"),
               NoiseState(), Rng(0))


def test_monte_carlo_mean_and_variance():
    n = 100_000
    h = np.random.default_rng(2).normal(size=8)
    cfg, state = NoiseConfig(sigma_base=0.1), NoiseState()
    out = inject(Tensor(np.broadcast_to(h, (n, 1, 8)).copy()), cfg, state, Rng(5)).data[:, 0]
    sig = effective_sigma(Tensor(np.broadcast_to(h, (n, 1, 8)).copy()), cfg, state).data[0, 0]
    assert np.all(np.abs((out - h).mean(0)) < 4 * sig / math.sqrt(n))
    np.testing.assert_allclose(out.var(0, ddof=1), sig**2, rtol=0.05)


def test_larger_sigma_moves_further():
    h = Tensor(np.random.default_rng(4).normal(size=(2, 3, 8)))
    dist = [np.abs(inject(h, NoiseConfig(sigma_base=s), NoiseState(), Rng(0)).data - h.data).sum()
            for s in (0.01, 0.1, 0.3)]
    assert dist[0] < dist[1] < dist[2]


def test_gradient_flows_to_alpha_and_hidden():
    state = NoiseState(alpha=1.3)
    h = Tensor(np.random.default_rng(6).normal(size=(1, 2, 6)), requires_grad=True)
    backward(T.tsum(inject(h, NoiseConfig(sigma_base=0.2), state, Rng(1)) ** 2))
    assert state.alpha.grad is not None and state.alpha.grad != 0
    assert h.grad is not None


def test_injection_gradient_matches_fd():
    state = NoiseState(alpha=1.1)
    h = Tensor(np.random.default_rng(7).normal(size=(1, 3, 6)), requires_grad=True)
    f = lambda x: T.tsum(inject(x, NoiseConfig(sigma_base=0.3), state, Rng(2)) ** 2)
    assert grad_check(f, h) < 1e-6
    g = lambda a: T.tsum(inject(Tensor(h.data), NoiseConfig(sigma_base=0.3), _with_alpha(a), Rng(2)) ** 2)
    assert grad_check(g, Tensor(np.array(1.1), requires_grad=True)) < 1e-6


def _with_alpha(a):
    s = NoiseState()
    s.alpha = a
    return s


def test_plan_active_flag():
    assert NoisePlan((0,), NoiseConfig()).active
    assert not NoisePlan((), NoiseConfig()).active
    assert not NoisePlan((0,), NoiseConfig(sigma_base=0.0)).active
    with pytest.raises(ConfigError):
        NoisePlan((1, 1), NoiseConfig())
