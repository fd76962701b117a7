"""Noise schedules, the forward (noising) process, output parameterizations,
and loss reweighting.

Conventions, shared by every module built on top of this one:

- A noise level ``k`` lives in [0, 1]: k=0 is clean data, k=1 is pure noise.
  A frame at level k doubles as a *partially masked* conditioning slot; k=1 is
  a fully masked slot carrying no information.
- All schedules are variance preserving: x^k = alpha(k) x^0 + sigma(k) eps
  with alpha^2 + sigma^2 = 1.
- ``cosine``: alpha(k) = cos(pi k / 2), sigma(k) = sin(pi k / 2).
- ``shifted-cosine(shift)`` is *defined* by scaling the cosine schedule's
  signal-to-noise ratio: SNR_shifted(k) = shift^2 * SNR_cosine(k), then
  renormalizing to variance-preserving form. shift < 1 makes every level
  noisier.
- Endpoints are clamped exactly: (alpha, sigma) is (1, 0) at k=0 and (0, 1)
  at k=1, so "clean" and "fully masked" are exact semantics rather than
  floating-point approximations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np


class ScheduleError(ValueError):
    pass


class SingularConversionError(ZeroDivisionError):
    """Raised when a parameterization conversion would divide by alpha=0 or sigma=0."""


def validate_noise_level(k) -> np.ndarray:
    """Check k (scalar or array) lies in [0, 1] and return it as float64."""
    arr = np.asarray(k, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ScheduleError("noise level must be finite")
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ScheduleError(f"noise level outside [0, 1]: {arr}")
    return arr


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance-preserving schedule; family 'cosine' or 'shifted-cosine'."""

    family: str = "cosine"
    shift: float = 1.0

    def __post_init__(self):
        if self.family not in ("cosine", "shifted-cosine"):
            raise ScheduleError(f"unknown schedule family: {self.family!r}")
        if self.family == "shifted-cosine" and not self.shift > 0:
            raise ScheduleError("shift must be a positive real")

    def alpha_sigma(self, k) -> tuple[np.ndarray, np.ndarray]:
        """Signal/noise coefficients (alpha_k, sigma_k); exact at the endpoints."""
        k = validate_noise_level(k)
        theta = 0.5 * math.pi * k
        c, s = np.cos(theta), np.sin(theta)
        if self.family == "cosine":
            alpha, sigma = c, s
        else:
            # alpha^2 = shift^2 c^2 / (shift^2 c^2 + s^2), variance preserving.
            norm = np.sqrt(self.shift**2 * c**2 + s**2)
            alpha = self.shift * c / norm
            sigma = s / norm
        alpha = np.where(k == 0.0, 1.0, np.where(k == 1.0, 0.0, alpha))
        sigma = np.where(k == 0.0, 0.0, np.where(k == 1.0, 1.0, sigma))
        if alpha.ndim == 0:
            return float(alpha), float(sigma)
        return alpha, sigma

    def snr(self, k) -> np.ndarray:
        """alpha^2 / sigma^2; +inf at k=0, 0 at k=1."""
        alpha, sigma = self.alpha_sigma(k)
        alpha, sigma = np.asarray(alpha), np.asarray(sigma)
        with np.errstate(divide="ignore"):
            out = np.where(sigma == 0.0, np.inf, (alpha / np.where(sigma == 0, 1.0, sigma)) ** 2)
        return out if out.ndim else float(out)

    def log_snr(self, k) -> np.ndarray:
        with np.errstate(divide="ignore"):
            out = np.log(self.snr(k))
        return out if np.ndim(out) else float(out)

    def to_config(self) -> dict:
        cfg = {"family": self.family}
        if self.family == "shifted-cosine":
            cfg["shift"] = self.shift
        return cfg

    @classmethod
    def from_config(cls, cfg: dict) -> "NoiseSchedule":
        return cls(family=cfg.get("family", "cosine"), shift=cfg.get("shift", 1.0))


def alpha_sigma(schedule: NoiseSchedule, k):
    return schedule.alpha_sigma(k)


def forward_diffuse(x0: np.ndarray, k, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """x^k = alpha_k x0 + sigma_k eps.

    ``k`` may be a scalar or an array broadcastable against the *leading*
    axes of x0 (e.g. per-frame levels of shape (T,) against frames (T, D)).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ScheduleError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    alpha, sigma = schedule.alpha_sigma(k)
    alpha, sigma = _expand_right(alpha, x0.ndim), _expand_right(sigma, x0.ndim)
    return alpha * x0 + sigma * eps


def _expand_right(coef, ndim: int):
    """Append trailing singleton axes so a per-frame coefficient broadcasts."""
    coef = np.asarray(coef, dtype=np.float64)
    while coef.ndim < ndim:
        coef = coef[..., None]
    return coef


class Parameterization(str, Enum):
    EPSILON = "epsilon"
    X0 = "x0"
    V = "v"
    SCORE = "score"


_SIGMA_FLOOR = 1e-12


def convert_param(
    value: np.ndarray,
    src: Parameterization,
    dst: Parameterization,
    x_k: np.ndarray,
    k,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """Convert a prediction between parameterizations at noise level(s) k.

    Identities, with x_k = alpha x0 + sigma eps:
        v = alpha eps - sigma x0      score = -eps / sigma

    epsilon <-> v <-> x0 conversions are affine in (value, x_k); the only
    singular directions are recovering x0 when alpha=0, recovering eps from
    x0 when sigma=0, and producing a score when sigma=0.
    """
    src, dst = Parameterization(src), Parameterization(dst)
    value = np.asarray(value, dtype=np.float64)
    x_k = np.asarray(x_k, dtype=np.float64)
    if value.shape != x_k.shape:
        raise ScheduleError(f"shape mismatch: value {value.shape} vs x_k {x_k.shape}")
    alpha, sigma = schedule.alpha_sigma(k)
    alpha = _expand_right(alpha, value.ndim)
    sigma = _expand_right(sigma, value.ndim)
    if src == dst:
        return value.copy()

    def need_div(coef, what):
        if np.any(np.abs(coef) < _SIGMA_FLOOR):
            raise SingularConversionError(
                f"conversion {src.value} -> {dst.value} is singular: {what} = 0"
            )

    # Recover eps, and lazily x0, from the source representation.
    if src == Parameterization.EPSILON:
        eps = value
    elif src == Parameterization.X0:
        need_div(sigma, "sigma")
        eps = (x_k - alpha * value) / sigma
    elif src == Parameterization.V:
        eps = sigma * x_k + alpha * value
    else:  # SCORE
        eps = -sigma * value

    if dst == Parameterization.EPSILON:
        return eps
    if dst == Parameterization.SCORE:
        need_div(sigma, "sigma")
        return -eps / sigma
    if src == Parameterization.X0:
        x0 = value
    elif src == Parameterization.V:
        x0 = alpha * x_k - sigma * value
    else:
        need_div(alpha, "alpha")
        x0 = (x_k - sigma * eps) / alpha
    if dst == Parameterization.X0:
        return x0
    return alpha * eps - sigma * x0  # V


@dataclass(frozen=True)
class LossWeighting:
    """Per-level loss weight for the noise-prediction objective.

    uniform:        w(k) = 1
    min-snr(gamma): w(k) = min(SNR(k), gamma) / SNR(k)
    sigmoid(bias):  w(k) = sigmoid(bias - logSNR(k))
    """

    scheme: str = "uniform"
    gamma: float = 5.0
    bias: float = 0.0

    def __post_init__(self):
        if self.scheme not in ("uniform", "min-snr", "sigmoid"):
            raise ScheduleError(f"unknown weighting scheme: {self.scheme!r}")
        if self.scheme == "min-snr" and not self.gamma > 0:
            raise ScheduleError("min-snr gamma must be positive")

    def weight(self, k, schedule: NoiseSchedule) -> np.ndarray:
        k = validate_noise_level(k)
        if self.scheme == "uniform":
            out = np.ones_like(k)
        elif self.scheme == "min-snr":
            snr = np.asarray(schedule.snr(k))
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = self.gamma / snr  # 0 at snr=inf, inf at snr=0
            out = np.minimum(1.0, ratio)
        else:
            logsnr = np.asarray(schedule.log_snr(k))
            out = 1.0 / (1.0 + np.exp(-(self.bias - logsnr)))
        return out if np.ndim(out) else float(out)

    def to_config(self) -> dict:
        cfg = {"scheme": self.scheme}
        if self.scheme == "min-snr":
            cfg["gamma"] = self.gamma
        elif self.scheme == "sigmoid":
            cfg["bias"] = self.bias
        return cfg

    @classmethod
    def from_config(cls, cfg: dict) -> "LossWeighting":
        return cls(
            scheme=cfg.get("scheme", "uniform"),
            gamma=cfg.get("gamma", 5.0),
            bias=cfg.get("bias", 0.0),
        )


def loss_weight(weighting: LossWeighting, k, schedule: NoiseSchedule):
    return weighting.weight(k, schedule)


class DiscreteNoiseGrid:
    """The N-step view {0, 1/N, ..., 1} of a continuous schedule.

    Per-step quantities follow the DDPM convention derived from the
    continuous schedule: abar_n = alpha(n/N)^2 and beta_n = 1 - abar_n/abar_{n-1},
    so abar_n = prod_{j<=n} (1 - beta_j) holds by construction.
    """

    def __init__(self, schedule: NoiseSchedule, n_steps: int):
        if n_steps < 1:
            raise ScheduleError("n_steps must be a positive integer")
        self.schedule = schedule
        self.n_steps = int(n_steps)
        self.levels = np.arange(self.n_steps + 1, dtype=np.float64) / self.n_steps
        alpha, _ = schedule.alpha_sigma(self.levels)
        self.alpha_bar = np.asarray(alpha, dtype=np.float64) ** 2  # abar_0 = 1, abar_N = 0
        if np.any(np.diff(self.alpha_bar) >= 0):
            raise ScheduleError("alpha_bar must be strictly decreasing on the grid")
        self.beta = np.empty(self.n_steps + 1, dtype=np.float64)
        self.beta[0] = 0.0
        self.beta[1:] = 1.0 - self.alpha_bar[1:] / self.alpha_bar[:-1]

    def level(self, n: int) -> float:
        return float(self.levels[n])

    def noised_levels(self) -> np.ndarray:
        """The training grid {1/N, ..., 1}; exact 0 is reserved for conditioning."""
        return self.levels[1:]
