"""Task specification and the score-composition algebra.

A task partitions a T-frame window (0-based indices) into history frames H,
whose values are given, and generation frames G = {0..T-1} \\ H, which are
sampled. A guidance scheme is a list of terms (H_i, k_{H_i}, omega_i): which
history frames to condition on, how strongly they are masked with noise, and
the weight of that branch in the composed score

    s = s_uncond + sum_i omega_i * (s_i - s_uncond).

Composition is representation-agnostic: the same affine combination applies
whether the branch arrays hold scores, noise predictions, or clean-frame
predictions, because all of these are affine images of one another with
coefficients shared across branches at a fixed step.

Extended mode additionally splits G into subsequences G_j; branch inputs
place frames outside the active G_j at full noise (like masked history), and
per-frame outputs are averaged over the G_j that cover the frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .schedules import NoiseSchedule, validate_noise_level


class GuidanceError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    """What to generate conditioned on what, over a T-frame window."""

    n_frames: int
    history: tuple[int, ...]
    history_values: np.ndarray  # (|H|, D), rows in sorted history order
    actions: np.ndarray | None = None  # optional (T,) int labels

    def __post_init__(self):
        hist = tuple(sorted(set(self.history)))
        object.__setattr__(self, "history", hist)
        if any(t < 0 or t >= self.n_frames for t in hist):
            raise GuidanceError(f"history indices {hist} outside 0..{self.n_frames - 1}")
        values = np.asarray(self.history_values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != len(hist):
            raise GuidanceError(
                f"history values shape {values.shape} != (|H|={len(hist)}, D)"
            )
        object.__setattr__(self, "history_values", values)
        if self.actions is not None:
            acts = np.asarray(self.actions, dtype=np.int64)
            if acts.shape != (self.n_frames,):
                raise GuidanceError(f"actions shape {acts.shape} != ({self.n_frames},)")
            object.__setattr__(self, "actions", acts)

    @property
    def generation(self) -> tuple[int, ...]:
        hist = set(self.history)
        return tuple(t for t in range(self.n_frames) if t not in hist)

    @property
    def dim(self) -> int:
        return self.history_values.shape[1]


@dataclass(frozen=True)
class GuidanceTerm:
    frames: tuple[int, ...]  # H_i, a subset of the task history
    mask_level: float  # k_{H_i}
    weight: float  # omega_i

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(sorted(set(self.frames))))
        validate_noise_level(self.mask_level)


@dataclass(frozen=True)
class GuidanceScheme:
    terms: tuple[GuidanceTerm, ...] = ()
    generation_subsequences: tuple[tuple[int, ...], ...] | None = None
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if self.generation_subsequences is not None:
            subs = tuple(tuple(sorted(set(s))) for s in self.generation_subsequences)
            object.__setattr__(self, "generation_subsequences", subs)

    def validate_for(self, task: TaskSpec) -> None:
        hist = set(task.history)
        for term in self.terms:
            if not set(term.frames) <= hist:
                raise GuidanceError(
                    f"term frames {term.frames} not a subset of history {task.history}"
                )
        if self.generation_subsequences is not None:
            gen = set(task.generation)
            covered = set()
            for sub in self.generation_subsequences:
                if not set(sub) <= gen:
                    raise GuidanceError(f"generation subsequence {sub} not within G")
                covered |= set(sub)
            if covered != gen:
                raise GuidanceError(
                    f"generation subsequences cover {sorted(covered)}, need {sorted(gen)}"
                )


def scheme_vanilla(history, omega: float) -> GuidanceScheme:
    """Classic guidance on the full history: {(H, 0, omega)}."""
    history = tuple(sorted(set(history)))
    if not history and omega != 1.0:
        raise GuidanceError("guidance toward an empty history (omega != 1) is meaningless")
    return GuidanceScheme(terms=(GuidanceTerm(history, 0.0, omega),), name="vanilla")


def scheme_fractional(history, omega: float, mask_level: float) -> GuidanceScheme:
    """{(H, 0, 1), (H, k_H, omega - 1)}: guide with a partially masked history.

    mask_level=0 is permitted and degenerates to the vanilla scheme.
    """
    history = tuple(sorted(set(history)))
    validate_noise_level(mask_level)
    if mask_level >= 1.0:
        raise GuidanceError("fractional mask level must be < 1")
    if not history and omega != 1.0:
        raise GuidanceError("guidance toward an empty history (omega != 1) is meaningless")
    return GuidanceScheme(
        terms=(
            GuidanceTerm(history, 0.0, 1.0),
            GuidanceTerm(history, mask_level, omega - 1.0),
        ),
        name="fractional",
    )


def scheme_temporal(subsequences) -> GuidanceScheme:
    """{(H_i, 0, omega_i)} over history subsequences [(frames, omega), ...]."""
    terms = tuple(GuidanceTerm(tuple(frames), 0.0, float(w)) for frames, w in subsequences)
    if not terms:
        raise GuidanceError("temporal scheme needs at least one subsequence")
    return GuidanceScheme(terms=terms, name="temporal")


def scheme_extended(subsequences, generation_subsequences) -> GuidanceScheme:
    base = scheme_temporal(subsequences)
    return GuidanceScheme(
        terms=base.terms,
        generation_subsequences=tuple(tuple(s) for s in generation_subsequences),
        name="extended",
    )


def scheme_conditional(history) -> GuidanceScheme:
    """Plain conditional sampling: {(H, 0, 1)}."""
    return GuidanceScheme(
        terms=(GuidanceTerm(tuple(sorted(set(history))), 0.0, 1.0),), name="conditional"
    )


UNCONDITIONAL_TERM = GuidanceTerm(frames=(), mask_level=1.0, weight=0.0)


def build_model_input(
    task: TaskSpec,
    term: GuidanceTerm,
    current_k: float,
    x_g_current: np.ndarray,
    rng: np.random.Generator,
    schedule: NoiseSchedule,
    g_subset: tuple[int, ...] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Assemble one branch's full-sequence input and its noise-level vector.

    - frames in term.frames carry the history diffused to term.mask_level
      with noise drawn fresh on every call (none drawn at level 0);
    - other history frames carry pure standard-normal draws at k=1;
    - generation frames carry x_g_current at current_k; with ``g_subset``,
      generation frames outside the subset are fully masked like dropped
      history.

    x_g_current is (B, |G|, D); returns ((B, T, D), (T,)).
    """
    if not set(term.frames) <= set(task.history):
        raise GuidanceError(
            f"term frames {term.frames} not a subset of task history {task.history}"
        )
    x_g_current = np.asarray(x_g_current, dtype=np.float64)
    gen = task.generation
    batch = x_g_current.shape[0]
    dim = task.dim
    if x_g_current.shape[1:] != (len(gen), dim):
        raise GuidanceError(
            f"generation values shape {x_g_current.shape} != (B, {len(gen)}, {dim})"
        )
    out = np.empty((batch, task.n_frames, dim))
    k_vec = np.empty(task.n_frames)

    hist_pos = {t: j for j, t in enumerate(task.history)}
    active = [hist_pos[t] for t in term.frames]
    rest = [hist_pos[t] for t in task.history if t not in set(term.frames)]
    hist_frames = np.array(task.history, dtype=int)
    if active:
        idx = hist_frames[active]
        vals = task.history_values[active]
        if term.mask_level == 0.0:
            out[:, idx] = vals[None, :, :]
        else:
            alpha, sigma = schedule.alpha_sigma(term.mask_level)
            eps = rng.standard_normal((batch, len(active), dim))
            out[:, idx] = alpha * vals[None, :, :] + sigma * eps
        k_vec[idx] = term.mask_level
    if rest:
        idx = hist_frames[rest]
        out[:, idx] = rng.standard_normal((batch, len(rest), dim))
        k_vec[idx] = 1.0

    gen_arr = np.array(gen, dtype=int)
    if g_subset is None:
        out[:, gen_arr] = x_g_current
        k_vec[gen_arr] = current_k
    else:
        g_pos = {t: j for j, t in enumerate(gen)}
        inside = [g_pos[t] for t in g_subset]
        outside = [g_pos[t] for t in gen if t not in set(g_subset)]
        out[:, gen_arr[inside]] = x_g_current[:, inside]
        k_vec[gen_arr[inside]] = current_k
        if outside:
            out[:, gen_arr[outside]] = rng.standard_normal((batch, len(outside), dim))
            k_vec[gen_arr[outside]] = 1.0
    return out, k_vec


def compose_scores(unconditional: np.ndarray, conditionals) -> np.ndarray:
    """s_uncond + sum_i omega_i (s_i - s_uncond).

    The no-term and single-term-with-unit-weight cases return the relevant
    branch array unchanged (bitwise), which the reduction-chain identities
    rely on.
    """
    unconditional = np.asarray(unconditional, dtype=np.float64)
    conditionals = list(conditionals)
    for score, _ in conditionals:
        if np.asarray(score).shape != unconditional.shape:
            raise GuidanceError("branch score shapes differ")
    if not conditionals:
        return unconditional.copy()
    if len(conditionals) == 1 and conditionals[0][1] == 1.0:
        return np.asarray(conditionals[0][0], dtype=np.float64).copy()
    out = unconditional.copy()
    for score, omega in conditionals:
        out += omega * (np.asarray(score, dtype=np.float64) - unconditional)
    return out


def compose_extended(
    task: TaskSpec,
    scheme: GuidanceScheme,
    unconditional_by_sub: dict[int, np.ndarray],
    conditional_by_sub: dict[int, list[tuple[np.ndarray, float]]],
) -> np.ndarray:
    """Frame-wise average over generation subsequences of the inner compositions.

    Inputs are keyed by subsequence position j; arrays span that
    subsequence's frames, (B, |G_j|, D). Returns (B, |G|, D).
    """
    scheme.validate_for(task)
    subs = scheme.generation_subsequences
    if subs is None:
        raise GuidanceError("scheme has no generation subsequences")
    gen = task.generation
    g_pos = {t: j for j, t in enumerate(gen)}
    first = unconditional_by_sub[0]
    batch, _, dim = first.shape
    total = np.zeros((batch, len(gen), dim))
    counts = np.zeros(len(gen))
    for j, sub in enumerate(subs):
        inner = compose_scores(unconditional_by_sub[j], conditional_by_sub[j])
        cols = [g_pos[t] for t in sub]
        total[:, cols] += inner
        counts[cols] += 1.0
    if np.any(counts == 0):
        raise GuidanceError("a generation frame is not covered by any subsequence")
    return total / counts[None, :, None]


SCHEME_PRESETS = ("vanilla", "fractional", "temporal", "extended", "conditional")


def scheme_from_config(cfg: dict, history) -> GuidanceScheme:
    """Expand a config declaration into a scheme.

    Presets: {"preset": "vanilla", "omega": w}; {"preset": "fractional",
    "omega": w, "mask_level": kH}; {"preset": "temporal", "subsequences":
    [{"frames": [...], "weight": w}, ...]}; {"preset": "extended", ... plus
    "generation_subsequences": [[...], ...]}; {"preset": "conditional"}.
    Explicit form: {"terms": [{"history_indices": [...], "mask_level": k,
    "weight": w}, ...], "generation_subsequences": optional}.
    """
    preset = cfg.get("preset")
    if preset == "vanilla":
        return scheme_vanilla(history, float(cfg["omega"]))
    if preset == "fractional":
        return scheme_fractional(history, float(cfg["omega"]), float(cfg["mask_level"]))
    if preset == "temporal":
        pairs = [(tuple(s["frames"]), float(s["weight"])) for s in cfg["subsequences"]]
        return scheme_temporal(pairs)
    if preset == "extended":
        pairs = [(tuple(s["frames"]), float(s["weight"])) for s in cfg["subsequences"]]
        return scheme_extended(pairs, [tuple(s) for s in cfg["generation_subsequences"]])
    if preset == "conditional":
        return scheme_conditional(history)
    if preset is not None:
        raise GuidanceError(f"unknown scheme preset {preset!r}")
    terms = tuple(
        GuidanceTerm(tuple(t["history_indices"]), float(t["mask_level"]), float(t["weight"]))
        for t in cfg["terms"]
    )
    subs = cfg.get("generation_subsequences")
    return GuidanceScheme(
        terms=terms,
        generation_subsequences=tuple(tuple(s) for s in subs) if subs else None,
    )
