import numpy as np
import pytest

from seqdiff.gaussian import (
    GaussianPosteriorDenoiser,
    GaussianSeqSpec,
    NonPSDError,
    conditional_moments,
    exact_conditional_score,
    lemma_conditional,
    posterior_affine,
)


def test_spec_validation():
    with pytest.raises(NonPSDError):
        GaussianSeqSpec(n_frames=1, dim=2, mean=np.zeros(2), cov=-np.eye(2))
    with pytest.raises(NonPSDError):
        GaussianSeqSpec.ar1(1.0, 1, 3)
    with pytest.raises(NonPSDError):
        GaussianSeqSpec(n_frames=2, dim=1, mean=np.zeros(2),
                        cov=np.array([[1.0, 0.2], [0.3, 1.0]]))


def test_ar1_covariance_structure():
    spec = GaussianSeqSpec.ar1(0.9, 2, 3)
    assert spec.cov[0, 2] == pytest.approx(0.9)  # frame 0 dim 0 vs frame 1 dim 0
    assert spec.cov[0, 3] == 0.0  # cross-dim independent
    assert spec.cov[0, 4] == pytest.approx(0.81)
    np.testing.assert_allclose(np.diag(spec.cov), 1.0)


def test_denoise_clean_levels_identity(cosine, rng):
    spec = GaussianSeqSpec.ar1(0.8, 2, 4)
    den = GaussianPosteriorDenoiser(spec, cosine)
    x = rng.standard_normal((5, 4, 2))
    out = den.predict(x, np.zeros(4))
    np.testing.assert_allclose(out, x, atol=1e-10)


def test_denoise_full_noise_prior_mean(cosine, rng):
    mean = np.array([0.3, -0.7, 1.1])
    spec = GaussianSeqSpec(n_frames=3, dim=1, mean=mean, cov=np.eye(3))
    den = GaussianPosteriorDenoiser(spec, cosine)
    x = rng.standard_normal((4, 3, 1))
    out = den.predict(x, np.ones(3))
    np.testing.assert_allclose(out, np.tile(mean[None, :, None], (4, 1, 1)), atol=1e-12)


def test_denoise_ar1_history_extrapolation_vs_monte_carlo(cosine):
    # T=2 AR(1) rho=0.9, frame 1 clean, frame 2 fully masked: the posterior
    # mean of frame 2 must match the Monte-Carlo regression slope on frame 1.
    spec = GaussianSeqSpec.ar1(0.9, 1, 2)
    den = GaussianPosteriorDenoiser(spec, cosine)
    rng = np.random.default_rng(11)
    draws = spec.sample(rng, 1_000_000)
    slope = float(np.mean(draws[:, 0, 0] * draws[:, 1, 0]) / np.mean(draws[:, 0, 0] ** 2))
    for value in (-1.3, 0.2, 2.0):
        x = np.zeros((1, 2, 1))
        x[0, 0, 0] = value
        x[0, 1, 0] = 0.77  # pure-noise slot carries no information
        out = den.predict(x, np.array([0.0, 1.0]))
        assert out[0, 1, 0] == pytest.approx(slope * value, abs=5e-3)
        assert out[0, 1, 0] == pytest.approx(0.9 * value, abs=5e-3)


def test_denoiser_linearity(cosine, rng):
    spec = GaussianSeqSpec.ar1(0.7, 2, 3)
    den = GaussianPosteriorDenoiser(spec, cosine)
    k = np.array([0.2, 0.5, 0.9])
    u = rng.standard_normal((4, 3, 2))
    v = rng.standard_normal((4, 3, 2))
    a, b = 1.7, -0.4
    lhs = den.predict(a * u + b * v, k)
    rhs = a * den.predict(u, k) + b * den.predict(v, k)
    # affine map: f(au + bv) - (a f(u) + b f(v)) = (1 - a - b) * offset; with
    # zero-mean AR(1) the offset is zero, so linearity is exact
    np.testing.assert_allclose(lhs, rhs, atol=1e-8)


def test_denoiser_per_row_levels(cosine, rng):
    spec = GaussianSeqSpec.ar1(0.6, 1, 3)
    den = GaussianPosteriorDenoiser(spec, cosine)
    x = rng.standard_normal((2, 3, 1))
    k = np.array([[0.0, 0.5, 1.0], [0.5, 0.5, 0.5]])
    out = den.predict(x, k)
    for row in range(2):
        single = den.predict(x[row : row + 1], k[row])
        np.testing.assert_allclose(out[row], single[0])


def test_posterior_affine_lemma_setting(rng):
    # additive-noise observation (alpha=1, sigma role) must reproduce
    # S(sigma) = cov (cov + sigma^2 I)^{-1} applied to the observation
    spec = GaussianSeqSpec.ar1(0.5, 1, 3)
    sigma = 0.8
    w, b, post_cov = posterior_affine(spec, np.ones(3), np.full(3, sigma))
    shrink = spec.cov @ np.linalg.inv(spec.cov + sigma**2 * np.eye(3))
    np.testing.assert_allclose(w, shrink, atol=1e-10)
    np.testing.assert_allclose(b, 0.0, atol=1e-12)
    y = rng.standard_normal(3)
    np.testing.assert_allclose(w @ y + b, shrink @ y, atol=1e-10)


def test_lemma_conditional_sigma_zero(rng):
    a_mat = rng.standard_normal((2, 3))
    sigma_x = np.eye(3) * 1.5
    sigma_y = 0.3 * np.eye(2)
    x_sigma = rng.standard_normal(3)
    mean, cov = lemma_conditional(a_mat, sigma_x, sigma_y, 0.0, x_sigma)
    np.testing.assert_allclose(mean, a_mat @ x_sigma, atol=1e-12)
    np.testing.assert_allclose(cov, sigma_y, atol=1e-12)


def test_lemma_conditional_identity_case_monte_carlo():
    # x ~ N(0, I), y = x, observe x + z: E[y | x_sigma] = x_sigma / 2 at
    # sigma = 1. Verified against a 1e6-draw regression.
    rng = np.random.default_rng(21)
    n = 1_000_000
    x = rng.standard_normal(n)
    x_sigma = x + rng.standard_normal(n)
    slope = float(np.mean(x * x_sigma) / np.mean(x_sigma**2))
    mean, cov = lemma_conditional(np.eye(1), np.eye(1), np.zeros((1, 1)), 1.0, np.array([2.0]))
    assert mean[0] == pytest.approx(2.0 * slope, abs=5e-3)
    assert mean[0] == pytest.approx(1.0, abs=1e-12)
    assert cov[0, 0] == pytest.approx(0.5, abs=1e-12)
    resid = x - 0.5 * x_sigma
    assert resid.var() == pytest.approx(0.5, abs=5e-3)


def test_lemma_conditional_large_sigma_limit(rng):
    a_mat = rng.standard_normal((2, 2))
    sigma_x = np.array([[2.0, 0.3], [0.3, 1.0]])
    sigma_y = 0.1 * np.eye(2)
    mean, cov = lemma_conditional(a_mat, sigma_x, sigma_y, 1e6, np.array([5.0, -3.0]))
    np.testing.assert_allclose(mean, 0.0, atol=1e-9)
    np.testing.assert_allclose(cov, sigma_y + a_mat @ sigma_x @ a_mat.T, rtol=1e-9)


def test_conditional_moments_no_history():
    spec = GaussianSeqSpec.ar1(0.8, 1, 3)
    mean, cov = conditional_moments(spec, (), np.zeros((0, 1)))
    np.testing.assert_allclose(mean, spec.mean)
    np.testing.assert_allclose(cov, spec.cov)


def test_exact_score_single_frame(cosine):
    # T=1 standard normal: noised marginal variance alpha^2 + sigma^2 = 1,
    # so score(x) = -x at every level
    spec = GaussianSeqSpec.ar1(0.0, 1, 1)
    x = np.array([[[0.7]], [[-2.0]]])
    for k in (0.2, 0.6, 1.0):
        score = exact_conditional_score(spec, (), np.zeros((0, 1)), x, k, cosine)
        np.testing.assert_allclose(score, -x, atol=1e-12)


def test_exact_score_full_noise_ignores_history(cosine):
    spec = GaussianSeqSpec.ar1(0.9, 1, 2)
    x = np.array([[[1.3]]])
    score = exact_conditional_score(spec, (0,), np.array([[5.0]]), x, 1.0, cosine)
    np.testing.assert_allclose(score, -x, atol=1e-12)


def test_exact_score_ar1_vs_dense_reimplementation(cosine):
    # independent dense-covariance path written inline
    rho, k = 0.9, 0.45
    spec = GaussianSeqSpec.ar1(rho, 1, 2)
    hist_val = np.array([[0.8]])
    x = np.array([[[0.1]], [[1.4]], [[-0.6]]])
    score = exact_conditional_score(spec, (0,), hist_val, x, k, cosine)
    # by hand: x2 | x1 ~ N(rho x1, 1 - rho^2); noised: N(a rho x1, a^2(1-rho^2)+s^2)
    a, s = cosine.alpha_sigma(k)
    mean = a * rho * hist_val[0, 0]
    var = a**2 * (1 - rho**2) + s**2
    np.testing.assert_allclose(score[:, 0, 0], -(x[:, 0, 0] - mean) / var, atol=1e-8)


def test_spec_window_and_loglik(rng):
    spec = GaussianSeqSpec.ar1(0.8, 2, 5)
    win = spec.window(3)
    assert win.n_frames == 3
    np.testing.assert_allclose(win.cov, spec.cov[:6, :6])
    x = spec.sample(rng, 1)[0]
    ll = spec.log_likelihood(x)
    from scipy.stats import multivariate_normal

    ref = multivariate_normal(mean=spec.mean, cov=spec.cov).logpdf(x.reshape(-1))
    assert ll == pytest.approx(ref, rel=1e-10)
