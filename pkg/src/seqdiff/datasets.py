"""Toy datasets: an exactly-known Gaussian AR(1) law for oracle-backed
evaluation, and a 2-D navigation world with discrete actions for steered
rollout.

Navigation frames are (dx, dy, cos dtheta, sin dtheta): pose relative to the
first frame of the window, rotated into that frame's heading. Relative
coordinates keep every window the model sees inside one bounded data range
regardless of how far a rollout travels; the absolute trajectory is
reconstructed outside the model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .gaussian import GaussianSeqSpec
from .sampler import SteeringInput

NAV_ACTIONS = ("none", "forward", "left", "right")
NAV_VOCAB = len(NAV_ACTIONS)
ACTION_INDEX = {name: i for i, name in enumerate(NAV_ACTIONS)}


@dataclass(frozen=True)
class Ar1DatasetConfig:
    rho: float = 0.8
    dim: int = 1
    n_frames: int = 8
    size: int = 4096
    seed: int = 0


def make_ar1_dataset(cfg: Ar1DatasetConfig) -> tuple[np.ndarray, GaussianSeqSpec]:
    """Draw (size, T, D) sequences from the stationary AR(1) law."""
    spec = GaussianSeqSpec.ar1(cfg.rho, cfg.dim, cfg.n_frames)
    rng = np.random.default_rng(cfg.seed)
    return spec.sample(rng, cfg.size), spec


@dataclass(frozen=True)
class NavDatasetConfig:
    n_frames: int = 8
    size: int = 4096
    step_size: float = 0.5
    turn_angle_deg: float = 15.0
    forward_prob: float = 0.6
    seed: int = 0


def nav_step(pos: np.ndarray, heading: float, action: int, cfg: NavDatasetConfig):
    """Deterministic world dynamics for one action."""
    turn = math.radians(cfg.turn_angle_deg)
    if action == ACTION_INDEX["forward"]:
        pos = pos + cfg.step_size * np.array([math.cos(heading), math.sin(heading)])
    elif action == ACTION_INDEX["left"]:
        heading += turn
    elif action == ACTION_INDEX["right"]:
        heading -= turn
    return pos, heading


def rollout_nav_states(
    start_pos: np.ndarray, start_heading: float, actions, cfg: NavDatasetConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Apply actions in sequence; actions[0] is a placeholder for the start
    frame. Returns (positions (T, 2), headings (T,))."""
    pos, heading = np.asarray(start_pos, dtype=np.float64), float(start_heading)
    positions, headings = [pos.copy()], [heading]
    for action in actions[1:]:
        pos, heading = nav_step(pos, heading, int(action), cfg)
        positions.append(pos.copy())
        headings.append(heading)
    return np.asarray(positions), np.asarray(headings)


def relative_frames(positions: np.ndarray, headings: np.ndarray) -> np.ndarray:
    """Encode poses relative to the first frame: (dx, dy, cos d, sin d)."""
    p0, h0 = positions[0], headings[0]
    c, s = math.cos(-h0), math.sin(-h0)
    rot = np.array([[c, -s], [s, c]])
    rel = (positions - p0) @ rot.T
    d = headings - h0
    return np.column_stack([rel, np.cos(d), np.sin(d)])


def absolute_states(frames: np.ndarray, anchor_pos: np.ndarray, anchor_heading: float):
    """Invert relative_frames given the anchor pose; headings renormalized."""
    c, s = math.cos(anchor_heading), math.sin(anchor_heading)
    rot = np.array([[c, -s], [s, c]])
    positions = anchor_pos[None, :] + frames[:, :2] @ rot.T
    norms = np.hypot(frames[:, 2], frames[:, 3])
    safe = np.where(norms < 1e-6, 1.0, norms)
    d = np.arctan2(frames[:, 3] / safe, frames[:, 2] / safe)
    d = np.where(norms < 1e-6, 0.0, d)
    return positions, anchor_heading + d


def make_nav_dataset(cfg: NavDatasetConfig) -> tuple[np.ndarray, np.ndarray]:
    """Returns (frames (size, T, 4), actions (size, T) int labels)."""
    rng = np.random.default_rng(cfg.seed)
    p_other = (1.0 - cfg.forward_prob) / 2.0
    probs = [0.0, cfg.forward_prob, p_other, p_other]
    frames = np.empty((cfg.size, cfg.n_frames, 4))
    actions = np.zeros((cfg.size, cfg.n_frames), dtype=np.int64)
    for row in range(cfg.size):
        acts = rng.choice(NAV_VOCAB, size=cfg.n_frames, p=probs)
        acts[0] = ACTION_INDEX["none"]
        start = rng.uniform(-5, 5, size=2)
        heading = rng.uniform(-math.pi, math.pi)
        positions, headings = rollout_nav_states(start, heading, acts, cfg)
        frames[row] = relative_frames(positions, headings)
        actions[row] = acts
    return frames, actions


def data_scale(frames: np.ndarray) -> float:
    """The largest frame norm in a dataset; rollout stability is judged
    against a multiple of this."""
    return float(np.linalg.norm(frames.reshape(-1, frames.shape[-1]), axis=1).max())


class NavWindowCodec:
    """Converts between absolute pose frames and the window-relative
    encoding the model is trained on."""

    def encode(self, history_abs: np.ndarray):
        positions = history_abs[:, :2]
        norms = np.hypot(history_abs[:, 2], history_abs[:, 3])
        safe = np.where(norms < 1e-6, 1.0, norms)
        headings = np.arctan2(history_abs[:, 3] / safe, history_abs[:, 2] / safe)
        anchor = (positions[0].copy(), float(headings[0]))
        return relative_frames(positions, headings), anchor

    def decode(self, generated_rel: np.ndarray, anchor) -> np.ndarray:
        anchor_pos, anchor_heading = anchor
        positions, headings = absolute_states(generated_rel, anchor_pos, anchor_heading)
        return np.column_stack([positions, np.cos(headings), np.sin(headings)])


def steering_to_actions(
    steering: SteeringInput | None, cfg: NavDatasetConfig, n_new: int
) -> np.ndarray:
    """Plan the next n_new per-frame actions for a steering request.

    Turns are executed first (as many discrete turn steps as the requested
    angle covers), then forward moves fill the remaining frames.
    """
    acts = np.full(n_new, ACTION_INDEX["forward"], dtype=np.int64)
    if steering is None:
        return acts
    if steering.action is not None:
        if steering.action not in ACTION_INDEX:
            raise ValueError(f"unknown action {steering.action!r}")
        return np.full(n_new, ACTION_INDEX[steering.action], dtype=np.int64)
    n_turns = min(n_new, int(round(abs(steering.turn_angle_deg) / cfg.turn_angle_deg)))
    turn = ACTION_INDEX["left"] if steering.turn_angle_deg > 0 else ACTION_INDEX["right"]
    acts[:n_turns] = turn
    if steering.distance <= 0:
        acts[n_turns:] = ACTION_INDEX["none"]
    return acts
