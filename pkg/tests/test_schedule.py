import numpy as np
import pytest
import torch

from protodiff.schedule import NoiseSchedule, build_linear_schedule, q_sample


def direct_product_alpha_bar(T, b0, b1):
    # independent recomputation: sequential product of 1 - beta_t
    betas = np.linspace(b0, b1, T, dtype=np.float64)
    out = np.empty(T)
    acc = 1.0
    for i, b in enumerate(betas):
        acc *= 1.0 - b
        out[i] = acc
    return out


def test_single_step_schedule():
    s = build_linear_schedule(1, 0.02, 0.02)
    assert s.betas.tolist() == [0.02]
    assert s.alpha_bars.tolist() == [0.98]


def test_two_step_schedule():
    s = build_linear_schedule(2, 0.1, 0.3)
    assert np.allclose(s.alpha_bars, [0.9, 0.63], atol=0, rtol=0)


def test_default_schedule_golden_final_alpha_bar():
    s = build_linear_schedule(1000, 1e-4, 0.02)
    expected = direct_product_alpha_bar(1000, 1e-4, 0.02)
    # golden value frozen from the direct product
    assert expected[-1] == pytest.approx(4.035829765375676e-05, rel=1e-12)
    assert np.allclose(s.alpha_bars, expected, rtol=1e-10)


def test_schedule_invariants():
    s = build_linear_schedule(500, 1e-4, 0.05)
    assert np.all(s.betas > 0) and np.all(s.betas < 1)
    assert np.array_equal(s.alphas, 1.0 - s.betas)
    assert np.all(np.diff(s.alpha_bars) < 0)  # strictly decreasing
    assert s.alpha_bars[-1] < s.alpha_bars[0] < 1.0
    # signal/noise weights normalize
    w = np.sqrt(s.alpha_bars) ** 2 + np.sqrt(1 - s.alpha_bars) ** 2
    assert np.allclose(w, 1.0, atol=1e-12)


@pytest.mark.parametrize("args", [
    (0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 1e-4, 1.0),
    (10, 0.3, 0.1), (10, float("nan"), 0.02), (10, 1e-4, float("inf")),
])
def test_schedule_rejects_bad_arguments(args):
    with pytest.raises(ValueError):
        build_linear_schedule(*args)


def test_alpha_bar_accessor_handles_zero():
    s = build_linear_schedule(10, 0.01, 0.1)
    assert s.alpha_bar(0) == 1.0
    assert s.alpha_bar(1) == s.alpha_bars[0]
    with pytest.raises(ValueError):
        s.alpha_bar(11)
    with pytest.raises(ValueError):
        s.beta(0)


def test_posterior_variance_degenerates_at_one():
    s = build_linear_schedule(10, 0.01, 0.1)
    assert s.posterior_variance(1) == 0.0
    assert s.posterior_variance(5) > 0


def test_q_sample_zero_noise_weight():
    # a schedule with beta ~ 0 keeps alpha_bar ~ 1: output ~ x0
    s = build_linear_schedule(3, 1e-12, 1e-12)
    x0 = torch.full((2, 1, 4, 4), 0.5)
    noise = torch.randn(2, 1, 4, 4)
    out = q_sample(x0, 1, noise, s)
    assert torch.allclose(out, x0, atol=1e-5)


def test_q_sample_zero_signal():
    s = build_linear_schedule(20, 0.01, 0.2)
    noise = torch.randn(2, 1, 4, 4, dtype=torch.float64)
    out = q_sample(torch.zeros_like(noise), 7, noise, s)
    expected = np.sqrt(1 - s.alpha_bar(7)) * noise
    assert torch.allclose(out, expected, atol=0, rtol=0)


def test_q_sample_exact_affine_combination():
    s = build_linear_schedule(20, 0.01, 0.2)
    gen = np.random.default_rng(0)
    x0 = torch.as_tensor(gen.uniform(-1, 1, (3, 2, 4, 4)))
    noise = torch.as_tensor(gen.standard_normal((3, 2, 4, 4)))
    t = np.array([3, 10, 20])
    out = q_sample(x0, t, noise, s)
    for i, ti in enumerate(t):
        a = np.sqrt(s.alpha_bar(int(ti)))
        b = np.sqrt(1 - s.alpha_bar(int(ti)))
        assert torch.allclose(out[i], a * x0[i] + b * noise[i], atol=0, rtol=0)


def test_q_sample_validates_inputs():
    s = build_linear_schedule(10, 0.01, 0.1)
    x0 = torch.zeros(1, 1, 2, 2)
    with pytest.raises(ValueError):
        q_sample(x0, 1, torch.zeros(1, 1, 2, 3), s)
    with pytest.raises(ValueError):
        q_sample(x0, 0, torch.zeros_like(x0), s)
    with pytest.raises(ValueError):
        q_sample(x0, 11, torch.zeros_like(x0), s)


def test_q_sample_monte_carlo_statistics():
    # 10,000 draws at a fixed t match the closed-form marginal within 3 SE
    s = build_linear_schedule(50, 1e-3, 0.08)
    gen = np.random.default_rng(7)
    t = 35
    x0 = 0.4
    n = 10_000
    draws = q_sample(np.full(n, x0), t, gen.standard_normal(n), s)
    abar = s.alpha_bar(t)
    mean_expected = np.sqrt(abar) * x0
    var_expected = 1 - abar
    se_mean = np.sqrt(var_expected / n)
    se_var = var_expected * np.sqrt(2.0 / (n - 1))
    assert abs(draws.mean() - mean_expected) < 3 * se_mean
    assert abs(draws.var(ddof=1) - var_expected) < 3 * se_var


@pytest.mark.parametrize("k", [1, 5, 10])
def test_forward_composition_matches_marginal(k):
    # iterating the single-step kernel k times agrees with the closed-form
    # marginal at t = k (Monte Carlo, 3 sigma)
    s = build_linear_schedule(10, 0.02, 0.15)
    gen = np.random.default_rng(k)
    n = 10_000
    x0 = -0.3
    x = np.full(n, x0)
    for t in range(1, k + 1):
        alpha = s.alphas[t - 1]
        x = np.sqrt(alpha) * x + np.sqrt(1 - alpha) * gen.standard_normal(n)
    abar = s.alpha_bar(k)
    mean_expected = np.sqrt(abar) * x0
    var_expected = 1 - abar
    se_mean = np.sqrt(var_expected / n)
    se_var = var_expected * np.sqrt(2.0 / (n - 1))
    assert abs(x.mean() - mean_expected) < 3 * se_mean
    assert abs(x.var(ddof=1) - var_expected) < 3 * se_var


def test_schedule_is_frozen():
    s = build_linear_schedule(5, 0.01, 0.02)
    with pytest.raises(AttributeError):
        s.T = 7
