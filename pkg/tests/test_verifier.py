import numpy as np
import pytest

from noisefit import verifier as V


def test_unbiasedness_passes_and_reports_band():
    r = V.check_unbiasedness(20_000, 0.1, seed=1)
    assert r.passed and r.tolerance == pytest.approx(4.0, abs=1e-3)


def test_zero_sigma_gives_exact_zero_deviation():
    r = V.check_unbiasedness(1_000, 0.0)
    assert r.passed and r.detail["max_abs_mean"] == 0.0
    assert V.check_variance(1_000, 0.0).passed


def test_small_n_widens_tolerance():
    r = V.check_unbiasedness(10, 0.1)
    assert r.tolerance > 4.0 and np.isfinite(r.observed)
    v = V.check_variance(10, 0.1)
    assert v.tolerance > 0.05


def test_variance_check():
    r = V.check_variance(20_000, 0.1, seed=2)
    assert r.passed and r.detail["max_cov_z"] <= r.detail["cov_z_band"]


def test_lipschitz_adaptive_map():
    r = V.check_lipschitz(2_000, seed=0)
    assert r.passed and r.detail["L_sigma"] > 0


def test_lipschitz_constant_sigma_is_additive_case():
    r = V.check_lipschitz(500, sigma_fn=lambda h: np.full_like(h, 0.2))
    assert r.passed and r.detail["L_sigma"] == 0.0
    assert r.detail["max_lhs_over_rhs"] == pytest.approx(1.0)


def test_gradient_stability_slope():
    r = V.check_gradient_stability(n_draws=2)
    assert r.passed and 0.8 <= r.observed <= 1.2
    d = r.detail["diffs"]
    # doubling-ish: sigma steps alternate x3 and x3.33; the first step is x3
    assert d[1] / d[0] == pytest.approx(3.0, rel=0.25)


def test_gradient_difference_vanishes_at_zero_sigma():
    model = V.tiny_model(0)
    x, y, m = V.tiny_batch(0)
    g = V._param_grads(model, x, y, m)
    from noisefit.noise import NoiseConfig, NoisePlan
    plan = NoisePlan((0, 1), NoiseConfig(sigma_base=0.0))
    np.testing.assert_array_equal(V._param_grads(model, x, y, m, plan, V.Rng(0)), g)


def test_loss_bound():
    r = V.check_loss_bound(n=4)
    assert r.passed and r.detail["C"] > 0
    d = r.detail["deviations"]
    # a decade in sigma is two decades in deviation at small sigma
    assert d[1] / d[0] == pytest.approx(100.0, rel=0.5)


def test_loss_deviation_zero_at_zero_sigma():
    model = V.tiny_model(0)
    x, y, m = V.tiny_batch(0)
    assert V.loss_deviation(model, x, y, m, 0.0, 4, 0) == (0.0, 0.0)


def test_kl_check():
    assert V.check_kl(n=2_000).passed


@pytest.mark.parametrize("seed", range(4))
def test_convergence_quadratic_and_negative_control(seed):
    assert V.check_convergence("quadratic", steps=2000, seed=seed).passed
    bad = V.check_convergence("quadratic", steps=500, lr=1.5, schedule="constant")
    assert not bad.passed


def test_convergence_transformer_variant():
    rec = V.check_convergence("transformer", steps=300, seed=0)
    assert rec.passed and rec.detail["lr"] == 0.01


def test_checks_are_deterministic():
    a, b = V.check_lipschitz(300, seed=4), V.check_lipschitz(300, seed=4)
    assert a == b


def test_report_formats():
    rep = V.VerificationReport()
    rep.add(V.check_kl(n=100))
    rep.add(V.CheckRecord("fake", "q", 1.0, 2.0, False, 1, 0))
    assert not rep.passed
    text = rep.to_text()
    assert "[PASS] kl_consistency" in text and "[FAIL] fake" in text
    lines = rep.to_csv().splitlines()
    assert lines[0] == "name,quantity,tolerance,observed,pass,n_samples,seed" and len(lines) == 3


def test_bad_arguments():
    with pytest.raises(V.ConfigError):
        V.check_convergence("nope")
    with pytest.raises(V.ConfigError):
        V.check_gradient_stability(sigmas=(0.1,))
