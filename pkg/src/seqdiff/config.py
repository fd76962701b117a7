"""Engine-wide JSON configuration.

One file fully specifies an experiment; there are no hidden defaults outside
this schema. Sections (all optional unless a command needs them):

- ``schedule``: {"family": "cosine" | "shifted-cosine", "shift": float}
- ``grid_steps``: int, the training/sampling level grid size N
- ``weighting``: {"scheme": "uniform" | "min-snr" | "sigmoid",
  "gamma": float, "bias": float}
- ``model``: TinyDenoiserConfig fields (data_dim, num_frames, embed_dim,
  num_heads, num_blocks, action_vocab, parameterization, seed)
- ``objective``: {"kind": "dfot" | "dfot-simplified" | "sd" | "bd" | "fs",
  "max_history": int, "history": [int], "drop_prob": float}
- ``train``: TrainConfig fields (steps, batch_size, learning_rate,
  warmup_steps, ema_decay, clip_norm, weight_decay, seed)
- ``dataset``: {"kind": "gaussian-ar1", "rho", "dim", "n_frames", "size",
  "seed"} or {"kind": "navigation2d", "n_frames", "size", "step_size",
  "turn_angle_deg", "forward_prob", "seed"}
- ``sampler``: {"kind": "ddim" | "ddpm", "steps": int, "eta": float,
  "seed": int}
- ``task``: {"n_frames": int, "history": [int],
  "history_values": [[float]] or null to draw from the dataset law}
- ``scheme``: a guidance scheme declaration; either a named preset
  ({"preset": "vanilla" | "fractional" | "temporal" | "extended" |
  "conditional", ...}) or explicit {"terms": [{"history_indices": [int],
  "mask_level": float, "weight": float}], "generation_subsequences": ...}
- ``rollout``: {"context_frames", "frames_per_window", "stabilization_k",
  "scheme_default", "scheme_escalation", "escalation_angle_deg",
  "diffuse_stabilized"}
- ``interpolation``: {"factor": int, "scheme": {...}}
- ``sweep``: {"omegas": [float], "fractional_mask": float,
  "n_samples": int}
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .datasets import Ar1DatasetConfig, NavDatasetConfig, NAV_VOCAB
from .model import TinyDenoiserConfig
from .sampler import RolloutConfig, SamplerConfig
from .schedules import DiscreteNoiseGrid, LossWeighting, NoiseSchedule
from .training import Objective, TrainConfig

DEFAULT_CONFIG: dict = {
    "schedule": {"family": "cosine"},
    "grid_steps": 16,
    "weighting": {"scheme": "uniform"},
    "model": {
        "data_dim": 1,
        "num_frames": 8,
        "embed_dim": 32,
        "num_heads": 4,
        "num_blocks": 2,
        "action_vocab": 0,
        "parameterization": "v",
        "seed": 0,
    },
    "objective": {"kind": "dfot"},
    "train": {
        "steps": 2000,
        "batch_size": 32,
        "learning_rate": 3e-3,
        "warmup_steps": 100,
        "ema_decay": 0.999,
        "clip_norm": 1.0,
        "weight_decay": 0.0,
        "seed": 0,
    },
    "dataset": {
        "kind": "gaussian-ar1",
        "rho": 0.8,
        "dim": 1,
        "n_frames": 8,
        "size": 4096,
        "seed": 0,
    },
    "sampler": {"kind": "ddim", "steps": 50, "eta": 0.0, "seed": 0},
    "task": {"n_frames": 8, "history": [0, 1], "history_values": None},
    "scheme": {"preset": "vanilla", "omega": 1.5},
    "rollout": {
        "context_frames": 4,
        "frames_per_window": 4,
        "stabilization_k": 0.02,
        "scheme_default": {"preset": "fractional", "omega": 4.0, "mask_level": 0.4},
        "scheme_escalation": {"preset": "vanilla", "omega": 4.0},
        "escalation_angle_deg": 30.0,
        "diffuse_stabilized": False,
    },
    "interpolation": {"factor": 4, "scheme": {"preset": "vanilla", "omega": 1.5}},
    "sweep": {
        "omegas": [1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0],
        "fractional_mask": 0.8,
        "n_samples": 2048,
    },
}


class ConfigError(ValueError):
    pass


class EngineConfig:
    """Typed accessors over the merged (defaults <- file) config dict."""

    def __init__(self, data: dict | None = None):
        self.data = _merge(copy.deepcopy(DEFAULT_CONFIG), data or {})

    @classmethod
    def load(cls, path) -> "EngineConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls(raw)

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule.from_config(self.data["schedule"])

    def grid(self) -> DiscreteNoiseGrid:
        return DiscreteNoiseGrid(self.schedule(), int(self.data["grid_steps"]))

    def weighting(self) -> LossWeighting:
        return LossWeighting.from_config(self.data["weighting"])

    def model_config(self) -> TinyDenoiserConfig:
        return TinyDenoiserConfig.from_dict(self.data["model"])

    def objective(self) -> Objective:
        cfg = self.data["objective"]
        return Objective(
            kind=cfg["kind"],
            max_history=cfg.get("max_history"),
            history=tuple(cfg.get("history", ())),
            drop_prob=cfg.get("drop_prob", 0.0),
        )

    def train_config(self) -> TrainConfig:
        cfg = dict(self.data["train"])
        return TrainConfig(weighting=self.weighting(), **cfg)

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(**self.data["sampler"])

    def rollout_config(self) -> RolloutConfig:
        return RolloutConfig(**self.data["rollout"])

    def dataset_config(self):
        cfg = dict(self.data["dataset"])
        kind = cfg.pop("kind")
        if kind == "gaussian-ar1":
            return Ar1DatasetConfig(**cfg)
        if kind == "navigation2d":
            nav = NavDatasetConfig(**cfg)
            model_vocab = self.data["model"].get("action_vocab", 0)
            if model_vocab and model_vocab != NAV_VOCAB:
                raise ConfigError(
                    f"model action_vocab {model_vocab} != navigation vocab {NAV_VOCAB}"
                )
            return nav
        raise ConfigError(f"unknown dataset kind {kind!r}")


def _merge(base: dict, override: dict) -> dict:
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(base.get(key), dict):
            base[key] = _merge(base[key], val)
        else:
            base[key] = val
    return base
