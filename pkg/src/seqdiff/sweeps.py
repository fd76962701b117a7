"""Experiment drivers: guidance-scale sweeps, the conditioning-flexibility
suite, and the out-of-distribution-history suite, all scored against exact
references at toy scale.

Every cell is reproducible bit-for-bit from (config, seed): cells share one
base seed, which doubles as common random numbers across guidance scales so
that ordering comparisons are not noise-dominated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import metrics
from .datasets import (
    NavDatasetConfig,
    NavWindowCodec,
    relative_frames,
    rollout_nav_states,
    ACTION_INDEX,
)
from .gaussian import GaussianPosteriorDenoiser, GaussianSeqSpec, conditional_moments
from .guidance import TaskSpec, scheme_from_config
from .metrics import MetricReport
from .sampler import SamplerConfig, sample, sample_conditional
from .schedules import NoiseSchedule


def _task_reference(spec, task):
    mean, cov = conditional_moments(spec, task.history, task.history_values)
    return mean, cov


def _score_samples(samples, mean_ref, cov_ref, reference_draws=None):
    row = {
        "mean_error": metrics.mean_error(samples, mean_ref),
        "cov_error": metrics.cov_error(samples, cov_ref),
        "sample_variance": metrics.sample_variance(samples),
    }
    if reference_draws is not None:
        row["energy_distance"] = metrics.energy_distance(samples, reference_draws)
    return row


def _reference_draws(mean, cov, n, seed):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE5EF]))
    chol = np.linalg.cholesky(cov + 1e-12 * np.eye(len(cov)))
    return mean[None, :] + rng.standard_normal((n, len(mean))) @ chol.T


def run_sweep(
    model,
    spec: GaussianSeqSpec,
    task: TaskSpec,
    schedule: NoiseSchedule,
    sampler: SamplerConfig,
    omegas=(1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0),
    fractional_mask: float = 0.8,
    n_samples: int = 2048,
    seed: int = 0,
) -> MetricReport:
    """Evaluate vanilla and fractional guidance across guidance scales."""
    report = MetricReport()
    mean_ref, cov_ref = _task_reference(spec, task)
    ref_draws = _reference_draws(mean_ref, cov_ref, n_samples, seed)
    baseline = sample_conditional(
        task, model, sampler, schedule, seed=seed, batch_size=n_samples
    )
    report.add(
        scheme="conditional",
        omega=1.0,
        **_score_samples(baseline, mean_ref, cov_ref, ref_draws),
    )
    for scheme_name in ("vanilla", "fractional"):
        for omega in omegas:
            if scheme_name == "vanilla":
                cfg = {"preset": "vanilla", "omega": float(omega)}
                k_h = 0.0
            else:
                cfg = {
                    "preset": "fractional",
                    "omega": float(omega),
                    "mask_level": fractional_mask,
                }
                k_h = fractional_mask
            scheme = scheme_from_config(cfg, task.history)
            draws = sample(
                task, scheme, model, sampler, schedule, seed=seed, batch_size=n_samples
            )
            report.add(
                scheme=scheme_name,
                omega=float(omega),
                k_h=k_h,
                **_score_samples(draws, mean_ref, cov_ref, ref_draws),
            )
    return report


def plot_sweep(report: MetricReport, path) -> None:
    """Guidance-scale curves: sample variance and energy distance vs omega."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for scheme in ("vanilla", "fractional"):
        rows = [r for r in report.rows if r["scheme"] == scheme]
        if not rows:
            continue
        omegas = [r["omega"] for r in rows]
        axes[0].plot(omegas, [r["sample_variance"] for r in rows], marker="o", label=scheme)
        axes[1].plot(omegas, [r["energy_distance"] for r in rows], marker="o", label=scheme)
    base = [r for r in report.rows if r["scheme"] == "conditional"]
    for ax, col in zip(axes, ("sample_variance", "energy_distance")):
        if base and base[0][col] is not None:
            ax.axhline(base[0][col], color="gray", ls="--", lw=1, label="no guidance")
        ax.set_xlabel("guidance scale")
        ax.set_ylabel(col.replace("_", " "))
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def flexibility_tasks(spec: GaussianSeqSpec, history_lengths=range(1, 7)):
    """Prefix-history tasks of increasing length plus an interpolation task."""
    tasks = [("hist%d" % length, tuple(range(length))) for length in history_lengths]
    tasks.append(("interp", (0, spec.n_frames - 1)))
    return tasks


def run_flexibility_suite(
    model,
    spec: GaussianSeqSpec,
    schedule: NoiseSchedule,
    sampler: SamplerConfig,
    n_samples: int = 512,
    n_history_draws: int = 2,
    seed: int = 0,
    history_lengths=range(1, 7),
) -> MetricReport:
    """Conditional-distribution error across history layouts, scored against
    the exact Gaussian conditional. One row per task; errors averaged over a
    few pinned history instantiations."""
    report = MetricReport()
    hist_rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))
    reference = spec.sample(hist_rng, n_history_draws)
    for name, history in flexibility_tasks(spec, history_lengths):
        errs = {"mean_error": [], "cov_error": [], "energy_distance": [],
                "sample_variance": []}
        for draw in range(n_history_draws):
            values = reference[draw][list(history)]
            task = TaskSpec(
                n_frames=spec.n_frames, history=history, history_values=values
            )
            mean_ref, cov_ref = _task_reference(spec, task)
            ref_draws = _reference_draws(mean_ref, cov_ref, n_samples, seed + draw)
            draws = sample_conditional(
                task, model, sampler, schedule, seed=seed + draw, batch_size=n_samples
            )
            scored = _score_samples(draws, mean_ref, cov_ref, ref_draws)
            for key in errs:
                errs[key].append(scored[key])
        report.add(scheme=name, **{k: float(np.mean(v)) for k, v in errs.items()})
    return report


@dataclass(frozen=True)
class OodProtocol:
    """The paper-shaped OOD configuration on an 8-frame window."""

    history: tuple = (0, 1, 2, 3)
    history_subsequences: tuple = ((0, 1, 2), (1, 2, 3))
    generation_subsequences: tuple = ((4, 5, 6), (5, 6, 7))
    omega: float = 2.0

    def schemes(self) -> dict[str, dict]:
        subs = [
            {"frames": list(h), "weight": self.omega} for h in self.history_subsequences
        ]
        return {
            "conditional": {"preset": "conditional"},
            "vanilla": {"preset": "vanilla", "omega": self.omega},
            "temporal": {"preset": "temporal", "subsequences": subs},
            "extended": {
                "preset": "extended",
                "subsequences": subs,
                "generation_subsequences": [list(g) for g in self.generation_subsequences],
            },
        }


def _ood_action_plan(rng, n_frames, turn_bias):
    acts = np.full(n_frames, ACTION_INDEX["forward"], dtype=np.int64)
    acts[0] = ACTION_INDEX["none"]
    turn = ACTION_INDEX["left"] if turn_bias >= 0 else ACTION_INDEX["right"]
    slots = rng.permutation(np.arange(1, n_frames))[: n_frames // 2]
    acts[slots] = turn
    return acts


def run_ood_suite(
    model,
    train_cfg: NavDatasetConfig,
    schedule: NoiseSchedule,
    sampler: SamplerConfig,
    turn_angles=(15.0, 40.0),
    n_scenes: int = 8,
    seed: int = 0,
    protocol: OodProtocol = OodProtocol(),
    n_generation: int = 0,
) -> MetricReport:
    """Error versus exact navigation dynamics across history turn magnitudes.

    Histories are produced by the same world but with per-step turns scaled
    beyond the training range; every guidance scheme generates the next
    frames and is scored by mean distance to the true continuation.
    Setting n_generation=0 (empty generation) yields an empty report.
    """
    report = MetricReport()
    if n_generation == 0:
        n_generation = 8 - len(protocol.history)
    if n_generation <= 0:
        return report
    n_frames = len(protocol.history) + n_generation
    for angle in turn_angles:
        world = NavDatasetConfig(
            n_frames=n_frames,
            step_size=train_cfg.step_size,
            turn_angle_deg=angle,
            seed=seed,
        )
        scheme_errs: dict[str, list[float]] = {
            name: [] for name in protocol.schemes()
        }
        for scene in range(n_scenes):
            rng = np.random.default_rng(
                np.random.SeedSequence([seed, int(angle * 10), scene])
            )
            acts = _ood_action_plan(rng, n_frames, turn_bias=1 if scene % 2 else -1)
            start = rng.uniform(-5, 5, size=2)
            heading = rng.uniform(-math.pi, math.pi)
            positions, headings = rollout_nav_states(start, heading, acts, world)
            frames = relative_frames(positions, headings)
            truth = frames[len(protocol.history):]
            task = TaskSpec(
                n_frames=n_frames,
                history=protocol.history,
                history_values=frames[: len(protocol.history)],
                actions=acts,
            )
            for name, cfg in protocol.schemes().items():
                scheme = scheme_from_config(cfg, protocol.history)
                if name == "conditional":
                    gen = sample_conditional(
                        task, model, sampler, schedule, seed=seed + scene, batch_size=1
                    )
                else:
                    gen = sample(
                        task, scheme, model, sampler, schedule,
                        seed=seed + scene, batch_size=1,
                    )
                err = float(np.linalg.norm(gen[0] - truth, axis=1).mean())
                scheme_errs[name].append(err)
        for name, errs in scheme_errs.items():
            report.add(
                scheme=f"{name}@{angle:g}",
                omega=protocol.omega if name != "conditional" else 1.0,
                mean_error=float(np.mean(errs)),
            )
    return report
