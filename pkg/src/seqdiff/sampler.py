"""Reverse-process steppers and the guided sampling loop.

The sampling loop follows the composed-score recipe exactly: initialize the
generation frames from standard normal noise; at every step build one model
input per branch (the unconditional branch first, then each guidance term,
each with fresh masking noise), evaluate the model once per branch, compose,
and step the generation frames one grid level down.

Branch predictions are canonicalized to clean-frame (x0) form before
composition; because every parameterization is an affine image of the others
with per-step shared coefficients, composing x0 predictions with the same
weights is identical to composing scores.

Randomness contract (everything drawn from one Generator, in order): the
initial generation noise; then per step, each branch's masking draws in
branch order; then the stepper's own noise, if stochastic. Branches at mask
level 0 draw nothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .guidance import (
    UNCONDITIONAL_TERM,
    GuidanceError,
    GuidanceScheme,
    GuidanceTerm,
    TaskSpec,
    build_model_input,
    compose_extended,
    compose_scores,
    scheme_from_config,
)
from .schedules import (
    DiscreteNoiseGrid,
    NoiseSchedule,
    Parameterization,
    convert_param,
)


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "ddim"
    steps: int = 50
    eta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("ddim", "ddpm"):
            raise SamplingError(f"unknown sampler kind {self.kind!r}")
        if self.steps < 1:
            raise SamplingError("sampler steps must be positive")
        if self.eta < 0:
            raise SamplingError("eta must be >= 0")


def _check_finite(arr, what: str, n: int):
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.isfinite(arr).sum())
        raise SamplingError(f"non-finite {what} at step n={n} ({bad} entries)")


def reverse_step(
    config: SamplerConfig,
    grid: DiscreteNoiseGrid,
    x: np.ndarray,
    x0_hat: np.ndarray,
    n: int,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """One denoising step n/N -> (n-1)/N given an x0-parameterized prediction.

    DDIM(eta=0): x <- alpha_{n-1} x0_hat + sigma_{n-1} eps_hat with eps_hat
    recovered from (x, x0_hat) at level n/N. DDPM: the grid posterior mean
    with its per-step noise.
    """
    if n < 1 or n > grid.n_steps:
        raise SamplingError(f"step index n={n} outside 1..{grid.n_steps}")
    x = np.asarray(x, dtype=np.float64)
    x0_hat = np.asarray(x0_hat, dtype=np.float64)
    _check_finite(x, "sampler state", n)
    _check_finite(x0_hat, "prediction", n)
    abar_n = grid.alpha_bar[n]
    abar_p = grid.alpha_bar[n - 1]
    a_n, s_n = np.sqrt(abar_n), np.sqrt(1.0 - abar_n)
    a_p, s_p = np.sqrt(abar_p), np.sqrt(1.0 - abar_p)
    eps_hat = (x - a_n * x0_hat) / s_n
    if config.kind == "ddim":
        if config.eta > 0.0:
            sig = (
                config.eta
                * np.sqrt((1.0 - abar_p) / (1.0 - abar_n))
                * np.sqrt(1.0 - abar_n / abar_p)
            )
            sig = min(sig, s_p)
            out = a_p * x0_hat + np.sqrt(s_p**2 - sig**2) * eps_hat
            if rng is None:
                raise SamplingError("stochastic DDIM needs an rng")
            out = out + sig * rng.standard_normal(x.shape)
        else:
            out = a_p * x0_hat + s_p * eps_hat
    else:
        beta_n = grid.beta[n]
        alpha_n = 1.0 - beta_n
        denom = 1.0 - abar_n
        mu = ((1.0 - abar_p) * np.sqrt(alpha_n) * x + beta_n * np.sqrt(abar_p) * x0_hat) / denom
        var = beta_n * (1.0 - np.sqrt(abar_p)) / denom
        if rng is None:
            raise SamplingError("DDPM needs an rng")
        out = mu + np.sqrt(max(var, 0.0)) * rng.standard_normal(x.shape)
    return out


def _canonical_x0(pred, param, x, k, schedule):
    return convert_param(pred, param, Parameterization.X0, x, k, schedule)


def _branch_x0(
    model, task, term, k_level, x_g, rng, schedule, gen_cols, g_subset=None,
    history_declared_level=0.0, diffuse_declared=False,
):
    """Evaluate one branch; returns its x0 prediction restricted to G columns."""
    term_eff = term
    if (
        history_declared_level > 0.0
        and term.mask_level == 0.0
        and term.frames
    ):
        term_eff = GuidanceTerm(term.frames, history_declared_level, term.weight)
        if not diffuse_declared:
            # declared-noisy stabilization: values stay clean, only the
            # noise-level vector advertises the stabilization level
            inp, k_vec = build_model_input(
                task, term, k_level, x_g, rng, schedule, g_subset=g_subset
            )
            idx = np.array(term.frames, dtype=int)
            k_vec = k_vec.copy()
            k_vec[idx] = history_declared_level
            pred = model.predict(inp, k_vec, _batch_actions(task, inp.shape[0]))
            x0 = _canonical_x0(pred, model.parameterization, inp, k_vec, schedule)
            return x0[:, gen_cols]
    inp, k_vec = build_model_input(
        task, term_eff, k_level, x_g, rng, schedule, g_subset=g_subset
    )
    pred = model.predict(inp, k_vec, _batch_actions(task, inp.shape[0]))
    x0 = _canonical_x0(pred, model.parameterization, inp, k_vec, schedule)
    return x0[:, gen_cols]


def _batch_actions(task: TaskSpec, batch: int):
    if task.actions is None:
        return None
    return np.broadcast_to(task.actions, (batch, task.n_frames))


def sample(
    task: TaskSpec,
    scheme: GuidanceScheme,
    model,
    sampler: SamplerConfig,
    schedule: NoiseSchedule,
    seed: int | None = None,
    batch_size: int = 1,
    rng: np.random.Generator | None = None,
    history_declared_level: float = 0.0,
    diffuse_declared: bool = False,
) -> np.ndarray:
    """Generate the task's generation frames under a guidance scheme.

    Returns (batch_size, |G|, D). Deterministic given the seed (DDIM eta=0).
    """
    scheme.validate_for(task)
    gen = task.generation
    dim = task.dim
    if rng is None:
        rng = np.random.default_rng(sampler.seed if seed is None else seed)
    if not gen:
        return np.empty((batch_size, 0, dim))
    grid = DiscreteNoiseGrid(schedule, sampler.steps)
    gen_cols = np.array(gen, dtype=int)
    x_g = rng.standard_normal((batch_size, len(gen), dim))
    subs = scheme.generation_subsequences
    kwargs = dict(
        history_declared_level=history_declared_level,
        diffuse_declared=diffuse_declared,
    )
    for n in range(sampler.steps, 0, -1):
        k_level = grid.level(n)
        if subs is None:
            uncond = _branch_x0(
                model, task, UNCONDITIONAL_TERM, k_level, x_g, rng, schedule,
                gen_cols, **kwargs,
            )
            branches = [
                (
                    _branch_x0(
                        model, task, term, k_level, x_g, rng, schedule,
                        gen_cols, **kwargs,
                    ),
                    term.weight,
                )
                for term in scheme.terms
            ]
            composed = compose_scores(uncond, branches)
        else:
            g_pos = {t: j for j, t in enumerate(gen)}
            uncond_by_sub, cond_by_sub = {}, {}
            for j, sub in enumerate(subs):
                cols = [g_pos[t] for t in sub]
                uncond_by_sub[j] = _branch_x0(
                    model, task, UNCONDITIONAL_TERM, k_level, x_g, rng, schedule,
                    gen_cols, g_subset=sub, **kwargs,
                )[:, cols]
                cond_by_sub[j] = [
                    (
                        _branch_x0(
                            model, task, term, k_level, x_g, rng, schedule,
                            gen_cols, g_subset=sub, **kwargs,
                        )[:, cols],
                        term.weight,
                    )
                    for term in scheme.terms
                ]
            composed = compose_extended(task, scheme, uncond_by_sub, cond_by_sub)
        x_g = reverse_step(sampler, grid, x_g, composed, n, rng)
    return x_g


def sample_conditional(
    task: TaskSpec,
    model,
    sampler: SamplerConfig,
    schedule: NoiseSchedule,
    seed: int | None = None,
    batch_size: int = 1,
    rng: np.random.Generator | None = None,
    history_declared_level: float = 0.0,
    diffuse_declared: bool = False,
) -> np.ndarray:
    """Plain conditional sampling: one clean-history branch, no composition."""
    gen = task.generation
    dim = task.dim
    if rng is None:
        rng = np.random.default_rng(sampler.seed if seed is None else seed)
    if not gen:
        return np.empty((batch_size, 0, dim))
    grid = DiscreteNoiseGrid(schedule, sampler.steps)
    gen_cols = np.array(gen, dtype=int)
    x_g = rng.standard_normal((batch_size, len(gen), dim))
    term = GuidanceTerm(task.history, 0.0, 1.0)
    for n in range(sampler.steps, 0, -1):
        x0 = _branch_x0(
            model, task, term, grid.level(n), x_g, rng, schedule, gen_cols,
            history_declared_level=history_declared_level,
            diffuse_declared=diffuse_declared,
        )
        x_g = reverse_step(sampler, grid, x_g, x0, n, rng)
    return x_g


@dataclass(frozen=True)
class SteeringInput:
    """Per-window user input: a turn plus a travel distance, or a raw action."""

    turn_angle_deg: float = 0.0
    distance: float = 1.0
    action: str | None = None
    scheme_override: dict | None = None

    def __post_init__(self):
        if not -180.0 <= self.turn_angle_deg <= 180.0:
            raise ValueError("turn angle must lie in [-180, 180] degrees")


@dataclass(frozen=True)
class RolloutConfig:
    context_frames: int
    frames_per_window: int
    stabilization_k: float = 0.02
    scheme_default: dict = field(default_factory=lambda: {"preset": "conditional"})
    scheme_escalation: dict | None = None
    escalation_angle_deg: float = 30.0
    diffuse_stabilized: bool = False

    def __post_init__(self):
        if self.context_frames < 1 or self.frames_per_window < 1:
            raise ValueError("context_frames and frames_per_window must be positive")

    @property
    def window_frames(self) -> int:
        return self.context_frames + self.frames_per_window

    def pick_scheme_config(self, steering: SteeringInput | None) -> tuple[dict, str]:
        """Escalate on sharp turns; explicit overrides win."""
        if steering is not None and steering.scheme_override is not None:
            return steering.scheme_override, "override"
        if (
            steering is not None
            and self.scheme_escalation is not None
            and abs(steering.turn_angle_deg) > self.escalation_angle_deg
        ):
            return self.scheme_escalation, "escalation"
        return self.scheme_default, "default"


class RolloutDriver:
    """Stateful sliding-window generation, one window per step.

    Each window conditions on the last ``context_frames`` frames (fewer on
    the first window if the initial history is shorter), declared at the
    stabilization level once generated frames enter the context, and appends
    ``frames_per_window`` new frames. An optional ``window_codec`` maps
    between stored frames and the model's window-relative encoding; an
    optional ``plan_actions(steering, n_new)`` callback supplies per-frame
    action labels for the newly generated frames.
    """

    def __init__(
        self,
        initial_history: np.ndarray,
        config: RolloutConfig,
        model,
        sampler: SamplerConfig,
        schedule: NoiseSchedule,
        seed: int = 0,
        window_codec=None,
        plan_actions=None,
        initial_actions=None,
    ):
        seq = np.asarray(initial_history, dtype=np.float64)
        if seq.ndim != 2 or len(seq) < 1:
            raise ValueError("initial history must be a nonempty (n, D) array")
        self.config = config
        self.model = model
        self.sampler = sampler
        self.schedule = schedule
        self.codec = window_codec
        self.plan_actions = plan_actions
        self.frames = seq
        if initial_actions is not None:
            self.actions = np.asarray(initial_actions, dtype=np.int64)
            if self.actions.shape != (len(seq),):
                raise ValueError("initial actions must align with initial history")
        else:
            self.actions = np.zeros(len(seq), dtype=np.int64)
        self.window_index = 0
        self.seed = seed
        self._seed_seq = np.random.SeedSequence(seed)
        self.scheme_log: list[str] = []

    def step(self, steering: SteeringInput | None) -> tuple[np.ndarray, str]:
        """Generate one window; returns (new frames, applied scheme label)."""
        config = self.config
        scheme_cfg, label = config.pick_scheme_config(steering)
        ctx = min(config.context_frames, len(self.frames))
        history = tuple(range(ctx))
        n_frames = ctx + config.frames_per_window
        history_abs = self.frames[-ctx:]
        if self.codec is not None:
            history_values, anchor = self.codec.encode(history_abs)
        else:
            history_values, anchor = history_abs, None
        actions = None
        if self.plan_actions is not None:
            new_actions = np.asarray(
                self.plan_actions(steering, config.frames_per_window), dtype=np.int64
            )
            actions = np.concatenate([self.actions[-ctx:], new_actions])
        task = TaskSpec(
            n_frames=n_frames,
            history=history,
            history_values=history_values,
            actions=actions,
        )
        scheme = scheme_from_config(scheme_cfg, history)
        child_rng = np.random.default_rng(self._seed_seq.spawn(1)[0])
        declared = config.stabilization_k if self.window_index > 0 else 0.0
        new = sample(
            task,
            scheme,
            self.model,
            self.sampler,
            self.schedule,
            batch_size=1,
            rng=child_rng,
            history_declared_level=declared,
            diffuse_declared=config.diffuse_stabilized,
        )[0]
        if self.codec is not None:
            new = self.codec.decode(new, anchor)
        self.frames = np.concatenate([self.frames, new], axis=0)
        if self.plan_actions is not None:
            self.actions = np.concatenate([self.actions, new_actions])
        else:
            self.actions = np.concatenate(
                [self.actions, np.zeros(len(new), dtype=np.int64)]
            )
        self.window_index += 1
        self.scheme_log.append(label)
        return new, label


def rollout(
    initial_history: np.ndarray,
    num_windows: int,
    steering_provider,
    config: RolloutConfig,
    model,
    sampler: SamplerConfig,
    schedule: NoiseSchedule,
    seed: int = 0,
    window_codec=None,
    plan_actions=None,
    initial_actions=None,
) -> np.ndarray:
    """Autoregressive sliding-window generation with stabilization.

    ``steering_provider(window_index, sequence_so_far)`` supplies a
    SteeringInput (or None); its failure aborts the session cleanly. Returns
    the full sequence including the initial history.
    """
    driver = RolloutDriver(
        initial_history, config, model, sampler, schedule, seed,
        window_codec=window_codec, plan_actions=plan_actions,
        initial_actions=initial_actions,
    )
    for w in range(num_windows):
        try:
            steering = (
                steering_provider(w, driver.frames) if steering_provider is not None else None
            )
        except SamplingError:
            raise
        except Exception as exc:
            raise SamplingError(f"steering provider failed at window {w}: {exc}") from exc
        driver.step(steering)
    return driver.frames


@dataclass(frozen=True)
class InterpolationConfig:
    factor: int

    def __post_init__(self):
        if self.factor < 2:
            raise ValueError("interpolation factor must be >= 2")


def interpolate(
    frames: np.ndarray,
    config: InterpolationConfig,
    model,
    sampler: SamplerConfig,
    schedule: NoiseSchedule,
    scheme_config: dict | None = None,
    seed: int = 0,
    window_codec=None,
) -> np.ndarray:
    """Densify a sequence by conditioning on every consecutive frame pair.

    Each pair anchors a (factor+1)-frame window with history {first, last}
    and generated interior; the output has length (n-1)*factor + 1 and
    preserves the original frames verbatim. A ``window_codec`` relativizes
    each pair window independently.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or len(frames) < 2:
        raise ValueError("need at least two (n, D) frames to interpolate")
    if scheme_config is None:
        scheme_config = {"preset": "vanilla", "omega": 1.5}
    f = config.factor
    n_frames = f + 1
    history = (0, f)
    scheme = scheme_from_config(scheme_config, history)
    seed_seq = np.random.SeedSequence(seed)
    out = [frames[0]]
    for i in range(len(frames) - 1):
        pair = frames[i : i + 2]
        if window_codec is not None:
            values, anchor = window_codec.encode(pair)
        else:
            values, anchor = pair, None
        task = TaskSpec(
            n_frames=n_frames,
            history=history,
            history_values=values,
        )
        child_rng = np.random.default_rng(seed_seq.spawn(1)[0])
        inner = sample(
            task, scheme, model, sampler, schedule, batch_size=1, rng=child_rng
        )[0]
        if window_codec is not None:
            inner = window_codec.decode(inner, anchor)
        out.extend(inner)
        out.append(frames[i + 1])
    return np.asarray(out)
