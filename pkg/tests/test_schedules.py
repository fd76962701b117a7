import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqdiff.schedules import (
    DiscreteNoiseGrid,
    LossWeighting,
    NoiseSchedule,
    Parameterization,
    ScheduleError,
    SingularConversionError,
    alpha_sigma,
    convert_param,
    forward_diffuse,
    loss_weight,
    validate_noise_level,
)

PARAMS = list(Parameterization)


def test_noise_level_range():
    validate_noise_level(0.0)
    validate_noise_level(1.0)
    with pytest.raises(ScheduleError):
        validate_noise_level(-0.01)
    with pytest.raises(ScheduleError):
        validate_noise_level(1.01)
    with pytest.raises(ScheduleError):
        validate_noise_level(float("nan"))


def test_endpoints_exact(cosine, shifted):
    for sched in (cosine, shifted):
        assert alpha_sigma(sched, 0.0) == (1.0, 0.0)
        assert alpha_sigma(sched, 1.0) == (0.0, 1.0)


def test_shifted_cosine_mid_value(shifted):
    # independent arithmetic: cosine SNR at k=0.5 is 1; scale by shift^2,
    # then alpha^2 = SNR / (1 + SNR)
    snr = 0.125**2 * 1.0
    alpha_expected = math.sqrt(snr / (1.0 + snr))
    sigma_expected = math.sqrt(1.0 / (1.0 + snr))
    alpha, sigma = alpha_sigma(shifted, 0.5)
    assert alpha == pytest.approx(alpha_expected, abs=1e-14)
    assert sigma == pytest.approx(sigma_expected, abs=1e-14)


def test_variance_preservation_grid(cosine, shifted):
    k = np.linspace(0.0, 1.0, 1000)
    for sched in (cosine, shifted):
        alpha, sigma = sched.alpha_sigma(k)
        assert np.abs(alpha**2 + sigma**2 - 1.0).max() < 1e-10
        assert np.all(np.diff(alpha) <= 0)


def test_shift_semantics_exact(cosine, shifted):
    k = np.linspace(0.01, 0.99, 200)
    np.testing.assert_allclose(
        shifted.snr(k), 0.125**2 * cosine.snr(k), rtol=1e-12
    )


def test_bad_schedule_configs():
    with pytest.raises(ScheduleError):
        NoiseSchedule("linear")
    with pytest.raises(ScheduleError):
        NoiseSchedule("shifted-cosine", shift=0.0)


def test_forward_diffuse_endpoints(cosine, rng):
    x0 = rng.standard_normal((3, 2))
    eps = rng.standard_normal((3, 2))
    np.testing.assert_array_equal(forward_diffuse(x0, 0.0, eps, cosine), x0)
    np.testing.assert_array_equal(forward_diffuse(x0, 1.0, eps, cosine), eps)
    _, sigma = cosine.alpha_sigma(0.5)
    np.testing.assert_allclose(
        forward_diffuse(np.zeros((3, 2)), 0.5, eps, cosine), sigma * eps
    )


def test_forward_diffuse_shape_mismatch(cosine):
    with pytest.raises(ScheduleError):
        forward_diffuse(np.zeros((2, 2)), 0.5, np.zeros((3, 2)), cosine)


def test_forward_diffuse_per_frame_levels(cosine, rng):
    x0 = rng.standard_normal((4, 3))
    eps = rng.standard_normal((4, 3))
    k = np.array([0.0, 0.3, 0.7, 1.0])
    out = forward_diffuse(x0, k, eps, cosine)
    for t in range(4):
        alpha, sigma = cosine.alpha_sigma(k[t])
        np.testing.assert_allclose(out[t], alpha * x0[t] + sigma * eps[t])


def test_forward_diffuse_moments(cosine):
    rng = np.random.default_rng(5)
    x0 = np.full((100_000, 1), 1.7)
    eps = rng.standard_normal(x0.shape)
    xk = forward_diffuse(x0, 0.35, eps, cosine)
    alpha, sigma = cosine.alpha_sigma(0.35)
    assert xk.mean() == pytest.approx(alpha * 1.7, abs=4 * sigma / math.sqrt(len(x0)))
    assert xk.std() == pytest.approx(sigma, rel=0.02)


def test_convert_trivial_values(cosine):
    # score = -eps / sigma at sigma = 1
    e = np.array([[0.4, -1.2]])
    out = convert_param(e, "epsilon", "score", np.zeros((1, 2)), 1.0, cosine)
    np.testing.assert_allclose(out, -e)
    # v = alpha eps - sigma x0 at alpha = sigma = sqrt(1/2)
    xk = math.sqrt(0.5) * np.ones((1, 1))  # x_k for x0=0, eps=1
    out = convert_param(np.ones((1, 1)), "epsilon", "v", xk, 0.5, cosine)
    assert out[0, 0] == pytest.approx(math.sqrt(0.5), abs=1e-14)


def test_convert_singular_errors(cosine):
    x = np.ones((1, 1))
    with pytest.raises(SingularConversionError):
        convert_param(x, "x0", "epsilon", x, 0.0, cosine)
    with pytest.raises(SingularConversionError):
        convert_param(x, "epsilon", "score", x, 0.0, cosine)
    with pytest.raises(SingularConversionError):
        convert_param(x, "epsilon", "x0", x, 1.0, cosine)


def test_convert_round_trips(cosine):
    rng = np.random.default_rng(3)
    for _ in range(100):
        k = rng.uniform(0.05, 0.95)
        x0 = rng.standard_normal((2, 3))
        eps = rng.standard_normal((2, 3))
        alpha, sigma = cosine.alpha_sigma(k)
        xk = alpha * x0 + sigma * eps
        values = {
            Parameterization.EPSILON: eps,
            Parameterization.X0: x0,
            Parameterization.V: alpha * eps - sigma * x0,
            Parameterization.SCORE: -eps / sigma,
        }
        for src in PARAMS:
            for dst in PARAMS:
                out = convert_param(values[src], src, dst, xk, k, cosine)
                np.testing.assert_allclose(out, values[dst], atol=1e-9)
                back = convert_param(out, dst, src, xk, k, cosine)
                np.testing.assert_allclose(back, values[src], atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.floats(min_value=0.02, max_value=0.98))
def test_conversion_roundtrip_property(k):
    sched = NoiseSchedule("cosine")
    rng = np.random.default_rng(int(k * 1e6))
    x0 = rng.standard_normal((1, 2))
    eps = rng.standard_normal((1, 2))
    alpha, sigma = sched.alpha_sigma(k)
    xk = alpha * x0 + sigma * eps
    v = convert_param(eps, "epsilon", "v", xk, k, sched)
    back = convert_param(v, "v", "epsilon", xk, k, sched)
    np.testing.assert_allclose(back, eps, atol=1e-10)


def test_loss_weight_uniform(cosine):
    assert loss_weight(LossWeighting("uniform"), 0.3, cosine) == 1.0


def test_loss_weight_min_snr(cosine):
    # min(SNR, gamma) / SNR evaluated by hand: SNR=1 at k=0.5 -> min(1,5)/1 = 1
    w = LossWeighting("min-snr", gamma=5.0)
    assert loss_weight(w, 0.5, cosine) == pytest.approx(1.0, abs=1e-12)
    # at low noise, SNR large: weight = gamma / SNR
    snr = cosine.snr(0.1)
    assert loss_weight(w, 0.1, cosine) == pytest.approx(min(snr, 5.0) / snr, rel=1e-12)
    assert loss_weight(w, 1.0, cosine) == 1.0  # SNR=0 limit


def test_loss_weight_sigmoid(cosine):
    # sigmoid(bias - logSNR) by hand: logSNR=0 at k=0.5, bias=0 -> 0.5
    w = LossWeighting("sigmoid", bias=0.0)
    assert loss_weight(w, 0.5, cosine) == pytest.approx(0.5, abs=1e-12)
    logsnr = cosine.log_snr(0.2)
    expected = 1.0 / (1.0 + math.exp(logsnr))
    assert loss_weight(w, 0.2, cosine) == pytest.approx(expected, rel=1e-12)


def test_loss_weight_finite_on_grid(cosine, grid16):
    for scheme in (LossWeighting("uniform"), LossWeighting("min-snr", gamma=5.0),
                   LossWeighting("sigmoid", bias=0.0)):
        w = scheme.weight(grid16.noised_levels(), cosine)
        assert np.all(np.isfinite(w)) and np.all(w >= 0)


def test_discrete_grid_consistency(cosine):
    grid = DiscreteNoiseGrid(cosine, 12)
    # abar_n equals the continuous alpha(n/N)^2 and the beta product form
    alpha, _ = cosine.alpha_sigma(grid.levels)
    np.testing.assert_allclose(grid.alpha_bar, np.asarray(alpha) ** 2, atol=1e-15)
    np.testing.assert_allclose(
        grid.alpha_bar, np.cumprod(1.0 - grid.beta), atol=1e-12
    )
    assert np.all(np.diff(grid.alpha_bar) < 0)
    assert grid.alpha_bar[0] == 1.0 and grid.alpha_bar[-1] == 0.0


def test_grid_rejects_bad_steps(cosine):
    with pytest.raises(ScheduleError):
        DiscreteNoiseGrid(cosine, 0)
