"""Training regimes and the training loop.

Four regimes over a T-frame window (frame indices are 0-based):

- ``dfot``: every frame draws an independent uniform level from the discrete
  grid {1/N, ..., 1}. All frames contribute to the loss.
- ``dfot-simplified(M)``: frames 0..M-1 draw independently, frames M..T-1
  share a single uniform level. All frames contribute.
- ``sd(H)``: frames in the fixed history set H are clean (k=0), the rest
  share one uniform level. Only non-history frames contribute.
- ``bd(p)``: a prefix history of random length L ~ U{0..T-1} is chosen; each
  history frame is kept clean with prob 1-p or dropped to full noise (k=1),
  the rest share one uniform level. Only non-history frames contribute.
- ``fs``: one uniform level shared by all frames; all contribute.

The loss is the weighted noise-prediction objective: mean over contributing
(batch, frame, dim) entries of w(k_t) * (eps - eps_hat)^2, with eps_hat
obtained from the model head via the parameterization identities.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import model as model_mod
from .model import Checkpoint, TinyDenoiserConfig, ema_update
from .schedules import (
    DiscreteNoiseGrid,
    LossWeighting,
    NoiseSchedule,
    Parameterization,
)

OBJECTIVE_KINDS = ("dfot", "dfot-simplified", "sd", "bd", "fs")


class TrainingError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class Objective:
    kind: str
    max_history: int | None = None  # dfot-simplified
    history: tuple[int, ...] = ()  # sd, 0-based frame indices
    drop_prob: float = 0.0  # bd

    def __post_init__(self):
        if self.kind not in OBJECTIVE_KINDS:
            raise TrainingError(f"unknown objective kind {self.kind!r}")
        if self.kind == "dfot-simplified" and (self.max_history is None or self.max_history < 1):
            raise TrainingError("dfot-simplified needs max_history >= 1")
        if self.kind == "sd" and not self.history:
            raise TrainingError("sd needs a fixed history index set")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise TrainingError("drop probability must lie in [0, 1]")
        object.__setattr__(self, "history", tuple(sorted(set(self.history))))


def sample_noise_levels(
    objective: Objective, n_frames: int, grid: DiscreteNoiseGrid, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """One draw of per-frame levels; returns (k, loss_mask) of shape (T,)."""
    k, mask = sample_noise_levels_batch(objective, 1, n_frames, grid, rng)
    return k[0], mask[0]


def sample_noise_levels_batch(
    objective: Objective,
    batch: int,
    n_frames: int,
    grid: DiscreteNoiseGrid,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized draws: (k, loss_mask) of shape (B, T)."""
    levels = grid.noised_levels()

    def draw(shape):
        return rng.choice(levels, size=shape)

    mask = np.ones((batch, n_frames), dtype=bool)
    if objective.kind == "dfot":
        k = draw((batch, n_frames))
    elif objective.kind == "dfot-simplified":
        m = min(objective.max_history, n_frames)
        k = np.empty((batch, n_frames))
        k[:, :m] = draw((batch, m))
        if m < n_frames:
            k[:, m:] = draw((batch, 1))
    elif objective.kind == "fs":
        k = np.broadcast_to(draw((batch, 1)), (batch, n_frames)).copy()
    elif objective.kind == "sd":
        hist = [t for t in objective.history if t < n_frames]
        gen = [t for t in range(n_frames) if t not in set(hist)]
        k = np.zeros((batch, n_frames))
        k[:, gen] = draw((batch, 1))
        mask[:, hist] = False
    else:  # bd
        k = np.empty((batch, n_frames))
        shared = draw((batch, 1))
        hist_len = rng.integers(0, n_frames, size=batch)
        dropped = rng.random((batch, n_frames)) < objective.drop_prob
        frame_idx = np.arange(n_frames)[None, :]
        is_hist = frame_idx < hist_len[:, None]
        k[:] = shared
        k[is_hist & ~dropped] = 0.0
        k[is_hist & dropped] = 1.0
        mask = ~is_hist
    return k, mask


def _eps_hat_coeffs(param: Parameterization, alpha, sigma):
    """eps_hat = a * prediction + b * x_k; also returns a for the backward pass.

    sigma is floored away from zero: k=0 frames only ever appear loss-masked,
    and a finite dummy coefficient keeps 0 * coeff from producing NaNs.
    """
    if param == Parameterization.V:
        return alpha, sigma
    if param == Parameterization.EPSILON:
        return np.ones_like(alpha), np.zeros_like(alpha)
    safe_sigma = np.where(sigma == 0.0, 1.0, sigma)
    if param == Parameterization.X0:
        return -alpha / safe_sigma, 1.0 / safe_sigma
    return -sigma, np.zeros_like(alpha)  # SCORE


def _loss_core(pred, x0, x_k, eps, k, mask, weighting, schedule, param):
    alpha, sigma = schedule.alpha_sigma(k)
    alpha, sigma = np.asarray(alpha)[..., None], np.asarray(sigma)[..., None]
    a_coef, b_coef = _eps_hat_coeffs(param, alpha, sigma)
    eps_hat = a_coef * pred + b_coef * x_k
    w = np.asarray(weighting.weight(k, schedule)) * mask
    count = mask.sum() * x0.shape[-1]
    if count == 0:
        return 0.0, np.zeros_like(pred)
    resid = eps_hat - eps
    loss = float((w[..., None] * resid**2).sum() / count)
    dpred = (2.0 / count) * w[..., None] * resid * a_coef
    return loss, dpred


def make_training_batch(x0, objective, grid, schedule, rng):
    """Diffuse a clean batch for one step: returns (x_k, k, eps, mask)."""
    batch, n_frames, _ = x0.shape
    k, mask = sample_noise_levels_batch(objective, batch, n_frames, grid, rng)
    eps = rng.standard_normal(x0.shape)
    alpha, sigma = schedule.alpha_sigma(k)
    x_k = np.asarray(alpha)[..., None] * x0 + np.asarray(sigma)[..., None] * eps
    return x_k, k, eps, mask


def loss_and_grads(
    config: TinyDenoiserConfig,
    params: dict,
    x0: np.ndarray,
    actions,
    objective: Objective,
    weighting: LossWeighting,
    grid: DiscreteNoiseGrid,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> tuple[float, dict]:
    """One stochastic evaluation of the training loss and parameter gradients."""
    x_k, k, eps, mask = make_training_batch(x0, objective, grid, schedule, rng)
    pred, cache = model_mod.forward(config, params, x_k, k, actions, with_cache=True)
    loss, dpred = _loss_core(
        pred, x0, x_k, eps, k, mask, weighting, schedule,
        Parameterization(config.parameterization),
    )
    grads, _ = model_mod.backward(config, params, cache, dpred)
    return loss, grads


def evaluate_loss(
    model,
    x0: np.ndarray,
    actions,
    objective: Objective,
    weighting: LossWeighting,
    grid: DiscreteNoiseGrid,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> float:
    """Loss only, for any denoiser exposing predict() and parameterization."""
    x_k, k, eps, mask = make_training_batch(x0, objective, grid, schedule, rng)
    pred = model.predict(x_k, k, actions)
    loss, _ = _loss_core(
        pred, x0, x_k, eps, k, mask, weighting, schedule,
        Parameterization(model.parameterization),
    )
    return loss


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    learning_rate: float = 3e-3
    warmup_steps: int = 100
    ema_decay: float = 0.999
    clip_norm: float = 1.0
    weight_decay: float = 0.0
    weighting: LossWeighting = field(default_factory=LossWeighting)
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise TrainingError("steps must be >= 0 and batch size positive")
        if self.clip_norm <= 0:
            raise TrainingError("gradient-clip norm must be positive")
        if not 0.0 <= self.ema_decay < 1.0:
            raise TrainingError("EMA decay must lie in [0, 1)")


def clip_gradients(grads: dict, clip_norm: float) -> tuple[dict, float]:
    total = math.sqrt(sum(float((g**2).sum()) for g in grads.values()))
    if total > clip_norm and total > 0:
        scale = clip_norm / total
        grads = {name: g * scale for name, g in grads.items()}
    return grads, total


class AdamW:
    """Decoupled-weight-decay Adam with linear warmup then a constant rate."""

    def __init__(self, params, lr, warmup_steps, weight_decay=0.0,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.warmup = max(1, warmup_steps)
        self.wd = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(v) for n, v in params.items()}
        self.v = {n: np.zeros_like(v) for n, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> dict:
        self.t += 1
        lr_t = self.lr * min(1.0, self.t / self.warmup)
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        out = {}
        for name, p in params.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g**2
            mhat = self.m[name] / b1c
            vhat = self.v[name] / b2c
            out[name] = p - lr_t * (mhat / (np.sqrt(vhat) + self.eps) + self.wd * p)
        return out


def train(
    dataset_x: np.ndarray,
    dataset_actions,
    objective: Objective,
    config: TrainConfig,
    model_config: TinyDenoiserConfig | None,
    grid: DiscreteNoiseGrid,
    schedule: NoiseSchedule,
    init_checkpoint: Checkpoint | None = None,
    curve_path=None,
) -> tuple[Checkpoint, list[tuple[int, float, float]]]:
    """Run the training loop; returns (checkpoint, curve rows (step, loss, ema_loss)).

    Deterministic under a fixed seed. Starting from ``init_checkpoint`` is
    the fine-tuning pathway; otherwise parameters are freshly initialized
    from ``model_config``.
    """
    if len(dataset_x) == 0:
        raise TrainingError("dataset is empty")
    if init_checkpoint is not None:
        ckpt = Checkpoint(
            config=init_checkpoint.config,
            params={n: v.copy() for n, v in init_checkpoint.params.items()},
            ema={n: v.copy() for n, v in init_checkpoint.ema.items()},
            step=init_checkpoint.step,
        )
    else:
        ckpt = Checkpoint.initialize(model_config)
    rng = np.random.default_rng(config.seed)
    opt = AdamW(ckpt.params, config.learning_rate, config.warmup_steps, config.weight_decay)
    curve: list[tuple[int, float, float]] = []
    smoothed = None
    for step in range(config.steps):
        idx = rng.integers(0, len(dataset_x), size=config.batch_size)
        batch_x = dataset_x[idx]
        batch_a = dataset_actions[idx] if dataset_actions is not None else None
        loss, grads = loss_and_grads(
            ckpt.config, ckpt.params, batch_x, batch_a,
            objective, config.weighting, grid, schedule, rng,
        )
        if not math.isfinite(loss):
            raise TrainingDivergedError(
                f"non-finite loss {loss} at step {step} (objective={objective.kind})"
            )
        grads, _ = clip_gradients(grads, config.clip_norm)
        ckpt.params = opt.step(ckpt.params, grads)
        ckpt.ema = ema_update(ckpt.params, ckpt.ema, config.ema_decay)
        ckpt.step += 1
        smoothed = loss if smoothed is None else 0.98 * smoothed + 0.02 * loss
        curve.append((ckpt.step, loss, smoothed))
    if curve_path is not None:
        with open(curve_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss", "ema_loss"])
            writer.writerows(curve)
    return ckpt, curve
