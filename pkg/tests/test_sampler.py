import numpy as np
import pytest

from seqdiff.gaussian import GaussianPosteriorDenoiser, GaussianSeqSpec, conditional_moments
from seqdiff.guidance import GuidanceScheme, TaskSpec, scheme_vanilla
from seqdiff.metrics import energy_distance
from seqdiff.sampler import (
    InterpolationConfig,
    RolloutConfig,
    SamplerConfig,
    SamplingError,
    SteeringInput,
    interpolate,
    reverse_step,
    rollout,
    sample,
    sample_conditional,
)
from seqdiff.schedules import DiscreteNoiseGrid


class CountingModel:
    """Wraps a denoiser, counting predict() calls (one per branch)."""

    def __init__(self, inner):
        self.inner = inner
        self.parameterization = inner.parameterization
        self.calls = 0

    def predict(self, x, k, actions=None):
        self.calls += 1
        return self.inner.predict(x, k, actions)


@pytest.fixture(scope="module")
def ar1_setup():
    from seqdiff.schedules import NoiseSchedule

    schedule = NoiseSchedule("cosine")
    spec = GaussianSeqSpec.ar1(0.8, 1, 4)
    model = GaussianPosteriorDenoiser(spec, schedule)
    rng = np.random.default_rng(100)
    hist = spec.sample(rng, 1)[0][[0, 1]]
    task = TaskSpec(n_frames=4, history=(0, 1), history_values=hist)
    return schedule, spec, model, task


def test_sampler_config_validation():
    with pytest.raises(SamplingError):
        SamplerConfig(kind="euler")
    with pytest.raises(SamplingError):
        SamplerConfig(steps=0)
    with pytest.raises(SamplingError):
        SamplerConfig(eta=-1.0)


def test_reverse_step_final_returns_x0(cosine, rng):
    grid = DiscreteNoiseGrid(cosine, 1)
    x = rng.standard_normal((3, 2))
    x0_hat = rng.standard_normal((3, 2))
    out = reverse_step(SamplerConfig(steps=1), grid, x, x0_hat, 1)
    np.testing.assert_allclose(out, x0_hat, atol=1e-12)


def test_reverse_step_zero_prediction_scales_noise(cosine, rng):
    grid = DiscreteNoiseGrid(cosine, 8)
    n = 5
    x = rng.standard_normal((2, 2))
    out = reverse_step(SamplerConfig(steps=8), grid, x, np.zeros_like(x), n)
    s_n = np.sqrt(1 - grid.alpha_bar[n])
    s_p = np.sqrt(1 - grid.alpha_bar[n - 1])
    np.testing.assert_allclose(out, (s_p / s_n) * x, atol=1e-12)


def test_reverse_step_matches_hand_recursion(cosine):
    # scalar chain, N=4, oracle prediction from a fixed affine rule; the
    # DDIM recursion is re-derived inline from alpha/sigma directly
    grid = DiscreteNoiseGrid(cosine, 4)
    cfg = SamplerConfig(steps=4)

    def oracle_x0(x, n):  # arbitrary fixed affine "denoiser"
        return 0.3 * x + 0.1

    x = np.array([[1.234]])
    x_hand = 1.234
    for n in range(4, 0, -1):
        x = reverse_step(cfg, grid, x, oracle_x0(x, n), n)
        a_n = np.sqrt(grid.alpha_bar[n])
        s_n = np.sqrt(1 - grid.alpha_bar[n])
        a_p = np.sqrt(grid.alpha_bar[n - 1])
        s_p = np.sqrt(1 - grid.alpha_bar[n - 1])
        x0h = 0.3 * x_hand + 0.1
        eps = (x_hand - a_n * x0h) / s_n
        x_hand = a_p * x0h + s_p * eps
        assert x[0, 0] == pytest.approx(x_hand, abs=1e-10)


def test_reverse_step_rejects_nonfinite(cosine):
    grid = DiscreteNoiseGrid(cosine, 4)
    cfg = SamplerConfig(steps=4)
    with pytest.raises(SamplingError, match="non-finite"):
        reverse_step(cfg, grid, np.array([np.nan]), np.zeros(1), 2)
    with pytest.raises(SamplingError, match="non-finite"):
        reverse_step(cfg, grid, np.zeros(1), np.array([np.inf]), 2)
    with pytest.raises(SamplingError):
        reverse_step(cfg, grid, np.zeros(1), np.zeros(1), 9)


def test_ddpm_step_mean_and_final_noise(cosine, rng):
    grid = DiscreteNoiseGrid(cosine, 4)
    cfg = SamplerConfig(kind="ddpm", steps=4)
    # final step adds no noise and returns the posterior mean = x0_hat
    x = rng.standard_normal((2, 1))
    x0h = rng.standard_normal((2, 1))
    out = reverse_step(cfg, grid, x, x0h, 1, np.random.default_rng(0))
    abar1 = grid.alpha_bar[1]
    beta1 = grid.beta[1]
    mu = ((1 - 1.0) * np.sqrt(1 - beta1) * x + beta1 * np.sqrt(1.0) * x0h) / (1 - abar1)
    np.testing.assert_allclose(out, mu, atol=1e-12)
    np.testing.assert_allclose(out, x0h, atol=1e-12)


def test_sample_empty_generation(ar1_setup):
    schedule, spec, model, _ = ar1_setup
    counting = CountingModel(model)
    task = TaskSpec(n_frames=2, history=(0, 1),
                    history_values=np.zeros((2, 1)))
    out = sample(task, scheme_vanilla((0, 1), 2.0), counting,
                 SamplerConfig(steps=8), schedule, seed=0, batch_size=3)
    assert out.shape == (3, 0, 1)
    assert counting.calls == 0


def test_model_evaluations_per_step(ar1_setup):
    schedule, spec, model, task = ar1_setup
    steps = 6
    for scheme, n_terms in (
        (scheme_vanilla(task.history, 2.0), 1),
        (GuidanceScheme(terms=()), 0),
        (scheme_vanilla(task.history, 1.0), 1),
    ):
        counting = CountingModel(model)
        sample(task, scheme, counting, SamplerConfig(steps=steps), schedule, seed=0)
        assert counting.calls == steps * (1 + n_terms)


def test_seed_determinism_bitwise(ar1_setup):
    schedule, spec, model, task = ar1_setup
    cfg = SamplerConfig(steps=16)
    scheme = scheme_vanilla(task.history, 1.5)
    a = sample(task, scheme, model, cfg, schedule, seed=5, batch_size=4)
    b = sample(task, scheme, model, cfg, schedule, seed=5, batch_size=4)
    np.testing.assert_array_equal(a, b)
    c = sample(task, scheme, model, cfg, schedule, seed=6, batch_size=4)
    assert np.any(c != a)


def test_vanilla_unit_equals_conditional_bitwise(ar1_setup):
    schedule, spec, model, task = ar1_setup
    cfg = SamplerConfig(steps=12)
    a = sample(task, scheme_vanilla(task.history, 1.0), model, cfg, schedule,
               seed=3, batch_size=5)
    b = sample_conditional(task, model, cfg, schedule, seed=3, batch_size=5)
    np.testing.assert_array_equal(a, b)


def test_empty_scheme_equals_handrolled_unconditional(ar1_setup):
    # the documented randomness contract, re-derived inline: init draw, then
    # per step one masking draw for the full history, then the DDIM update
    schedule, spec, model, task = ar1_setup
    steps = 8
    batch = 3
    got = sample(task, GuidanceScheme(terms=()), model, SamplerConfig(steps=steps),
                 schedule, seed=11, batch_size=batch)
    grid = DiscreteNoiseGrid(schedule, steps)
    rng = np.random.default_rng(11)
    gen = list(task.generation)
    x_g = rng.standard_normal((batch, len(gen), 1))
    for n in range(steps, 0, -1):
        k_level = grid.level(n)
        inp = np.empty((batch, 4, 1))
        k_vec = np.empty(4)
        inp[:, [0, 1]] = rng.standard_normal((batch, 2, 1))
        k_vec[[0, 1]] = 1.0
        inp[:, gen] = x_g
        k_vec[gen] = k_level
        x0 = model.predict(inp, k_vec)[:, gen]
        a_n, s_n = np.sqrt(grid.alpha_bar[n]), np.sqrt(1 - grid.alpha_bar[n])
        a_p, s_p = np.sqrt(grid.alpha_bar[n - 1]), np.sqrt(1 - grid.alpha_bar[n - 1])
        eps = (x_g - a_n * x0) / s_n
        x_g = a_p * x0 + s_p * eps
    np.testing.assert_array_equal(got, x_g)


def test_unguided_sampling_matches_exact_conditional(ar1_setup):
    schedule, spec, model, task = ar1_setup
    mean_ref, cov_ref = conditional_moments(spec, task.history, task.history_values)
    draws = sample_conditional(task, model, SamplerConfig(steps=128), schedule,
                               seed=0, batch_size=4000)
    flat = draws.reshape(len(draws), -1)
    assert np.abs(flat.mean(axis=0) - mean_ref).max() < 0.06
    emp_cov = np.cov(flat, rowvar=False)
    assert np.linalg.norm(emp_cov - cov_ref) / np.linalg.norm(cov_ref) < 0.12


def test_sampling_error_decreases_with_steps(ar1_setup):
    schedule, spec, model, task = ar1_setup
    mean_ref, cov_ref = conditional_moments(spec, task.history, task.history_values)
    ref_rng = np.random.default_rng(999)
    chol = np.linalg.cholesky(cov_ref + 1e-12 * np.eye(len(cov_ref)))
    reference = mean_ref + ref_rng.standard_normal((4000, len(mean_ref))) @ chol.T
    errs = []
    for steps in (8, 32, 128, 512):
        draws = sample_conditional(task, model, SamplerConfig(steps=steps), schedule,
                                   seed=1, batch_size=4000)
        errs.append(energy_distance(draws.reshape(4000, -1), reference))
    assert errs[0] > errs[1] > errs[2]
    assert errs[3] <= errs[2] * 1.05  # both ~ MC floor at many steps


def test_guidance_scale_shrinks_variance(ar1_setup):
    schedule, spec, model, task = ar1_setup
    cfg = SamplerConfig(steps=64)
    variances = []
    for omega in (1.0, 1.5, 2.0, 3.0):
        draws = sample(task, scheme_vanilla(task.history, omega), model, cfg,
                       schedule, seed=2, batch_size=2000)
        variances.append(draws.reshape(len(draws), -1).var(axis=0).mean())
    assert all(a >= b for a, b in zip(variances, variances[1:]))
    assert variances[-1] < variances[0]


def test_ddpm_sampling_approaches_conditional(ar1_setup):
    schedule, spec, model, task = ar1_setup
    mean_ref, _ = conditional_moments(spec, task.history, task.history_values)
    draws = sample_conditional(task, model, SamplerConfig(kind="ddpm", steps=256),
                               schedule, seed=4, batch_size=3000)
    flat = draws.reshape(len(draws), -1)
    assert np.abs(flat.mean(axis=0) - mean_ref).max() < 0.08


def test_stochastic_ddim_needs_rng_is_seeded(ar1_setup):
    schedule, spec, model, task = ar1_setup
    cfg = SamplerConfig(steps=16, eta=0.5)
    a = sample_conditional(task, model, cfg, schedule, seed=8, batch_size=2)
    b = sample_conditional(task, model, cfg, schedule, seed=8, batch_size=2)
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# rollout and interpolation


def test_rollout_zero_windows(ar1_setup):
    schedule, spec, model, _ = ar1_setup
    initial = np.array([[0.5], [0.2]])
    cfg = RolloutConfig(context_frames=2, frames_per_window=2,
                        scheme_default={"preset": "conditional"})
    out = rollout(initial, 0, None, cfg, model, SamplerConfig(steps=4), schedule)
    np.testing.assert_array_equal(out, initial)


def test_rollout_appends_and_stabilization_noop(ar1_setup):
    schedule, spec, model, _ = ar1_setup
    initial = spec.sample(np.random.default_rng(0), 1)[0][:2]
    sampler_cfg = SamplerConfig(steps=8)
    base = RolloutConfig(context_frames=2, frames_per_window=2,
                         stabilization_k=0.0,
                         scheme_default={"preset": "conditional"})
    out = rollout(initial, 3, None, base, model, sampler_cfg, schedule, seed=7)
    assert out.shape == (2 + 3 * 2, 1)
    # stabilization 0 must equal plain repeated sampling under the same seeds
    seed_seq = np.random.SeedSequence(7)
    seq = initial
    for w in range(3):
        task = TaskSpec(n_frames=4, history=(0, 1), history_values=seq[-2:])
        child = np.random.default_rng(seed_seq.spawn(1)[0])
        new = sample_conditional(task, model, sampler_cfg, schedule, rng=child)
        seq = np.concatenate([seq, new[0]])
    np.testing.assert_array_equal(out, seq)


def test_rollout_stabilization_declared_level(ar1_setup):
    schedule, spec, model, _ = ar1_setup

    class Recorder:
        parameterization = model.parameterization

        def predict(self, x, k, actions=None):
            recorded.append(np.array(k, copy=True))
            return model.predict(x, k, actions)

    recorded = []
    initial = spec.sample(np.random.default_rng(1), 1)[0][:2]
    cfg = RolloutConfig(context_frames=2, frames_per_window=2, stabilization_k=0.02,
                        scheme_default={"preset": "conditional"})
    rollout(initial, 2, None, cfg, Recorder(), SamplerConfig(steps=4), schedule, seed=0)
    first_window = np.array(recorded[:4])
    second_window = np.array(recorded[4:])
    assert np.all(first_window[:, [0, 1]] == 0.0)  # real history stays clean
    assert np.all(second_window[:, [0, 1]] == 0.02)  # generated history declared noisy


def test_rollout_escalation_predicate(ar1_setup):
    schedule, spec, model, _ = ar1_setup
    cfg = RolloutConfig(
        context_frames=2, frames_per_window=1,
        scheme_default={"preset": "conditional"},
        scheme_escalation={"preset": "vanilla", "omega": 2.0},
        escalation_angle_deg=30.0,
    )
    assert cfg.pick_scheme_config(SteeringInput(turn_angle_deg=0.0))[1] == "default"
    assert cfg.pick_scheme_config(SteeringInput(turn_angle_deg=45.0))[1] == "escalation"
    assert cfg.pick_scheme_config(SteeringInput(turn_angle_deg=-31.0))[1] == "escalation"
    override = SteeringInput(scheme_override={"preset": "vanilla", "omega": 3.0})
    assert cfg.pick_scheme_config(override)[1] == "override"


def test_rollout_steering_failure_aborts(ar1_setup):
    schedule, spec, model, _ = ar1_setup
    cfg = RolloutConfig(context_frames=1, frames_per_window=1,
                        scheme_default={"preset": "conditional"})

    def bad_provider(w, seq):
        raise RuntimeError("joystick unplugged")

    with pytest.raises(SamplingError, match="steering provider failed"):
        rollout(np.zeros((1, 1)), 2, bad_provider, cfg, model,
                SamplerConfig(steps=2), schedule)


def test_interpolate_length_contract(ar1_setup):
    schedule, spec, model, _ = ar1_setup
    frames = spec.sample(np.random.default_rng(3), 1)[0][:3]
    for factor in (2, 3, 4):
        dense = interpolate(frames, InterpolationConfig(factor=factor), model,
                            SamplerConfig(steps=8), schedule)
        assert dense.shape == ((len(frames) - 1) * factor + 1, 1)
        np.testing.assert_array_equal(dense[::factor], frames)


def test_interpolate_two_frames_single_insert(ar1_setup):
    schedule, spec, model, _ = ar1_setup
    frames = np.array([[0.0], [1.0]])
    dense = interpolate(frames, InterpolationConfig(factor=2), model,
                        SamplerConfig(steps=8), schedule)
    assert dense.shape == (3, 1)
    np.testing.assert_array_equal(dense[[0, 2]], frames)


def test_interpolate_bridge_mean(cosine):
    # Brownian-motion covariance: the midpoint given both endpoints is the
    # bridge, whose mean is the endpoint average
    t = np.arange(1, 4, dtype=float)
    cov = np.minimum.outer(t, t)
    spec = GaussianSeqSpec(n_frames=3, dim=1, mean=np.zeros(3), cov=cov)
    model = GaussianPosteriorDenoiser(spec, cosine)
    frames = np.array([[0.4], [1.6]])
    draws = []
    for seed in range(400):
        dense = interpolate(frames, InterpolationConfig(factor=2), model,
                            SamplerConfig(steps=32), cosine, seed=seed)
        draws.append(dense[1, 0])
    assert np.mean(draws) == pytest.approx((0.4 + 1.6) / 2, abs=0.08)


def test_interpolate_validation(ar1_setup):
    schedule, spec, model, _ = ar1_setup
    with pytest.raises(ValueError):
        InterpolationConfig(factor=1)
    with pytest.raises(ValueError):
        interpolate(np.zeros((1, 1)), InterpolationConfig(factor=2), model,
                    SamplerConfig(steps=2), schedule)
