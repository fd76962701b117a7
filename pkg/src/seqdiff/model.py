"""A tiny trainable attention denoiser with per-frame noise-level conditioning.

Each frame is a token: a linear embedding of the frame features plus a
learned absolute position embedding, an additive embedding of that frame's
own noise level, and (optionally) an additive action embedding. Full
self-attention over the T frames is what lets history inform generation.
Forward and backward passes are written out explicitly in numpy (float64),
which keeps gradients exact enough to check against finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .schedules import Parameterization
from . import tensorfile

_LN_EPS = 1e-6
_NOISE_FREQS = np.array([1.0, 2.0, 4.0, 8.0])


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class TinyDenoiserConfig:
    data_dim: int
    num_frames: int
    embed_dim: int = 32
    num_heads: int = 4
    num_blocks: int = 2
    action_vocab: int = 0  # 0 disables action conditioning
    parameterization: str = "v"
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim % self.num_heads != 0:
            raise ModelError("embed_dim must be divisible by num_heads")
        for name in ("data_dim", "num_frames", "embed_dim", "num_heads", "num_blocks"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be a positive integer")
        Parameterization(self.parameterization)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TinyDenoiserConfig":
        return cls(**d)


def noise_features(k: np.ndarray) -> np.ndarray:
    """Fixed sinusoidal features of a noise level, shape (..., 8)."""
    ang = np.pi * k[..., None] * _NOISE_FREQS
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def init_params(config: TinyDenoiserConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(config.seed)
    e, d, t = config.embed_dim, config.data_dim, config.num_frames
    hidden = 4 * e
    scale = 0.2

    def w(*shape):
        return rng.standard_normal(shape) * scale / math.sqrt(shape[0])

    params = {
        "w_in": w(d, e),
        "b_in": np.zeros(e),
        "pos": rng.standard_normal((t, e)) * 0.02,
        "w_noise": w(8, e),
        "b_noise": np.zeros(e),
        "ln_f_g": np.ones(e),
        "ln_f_b": np.zeros(e),
        # zero head: a freshly initialized model predicts exactly zero
        "w_out": np.zeros((e, d)),
        "b_out": np.zeros(d),
    }
    if config.action_vocab:
        params["act_emb"] = rng.standard_normal((config.action_vocab, e)) * 0.02
    for i in range(config.num_blocks):
        params.update(
            {
                f"blk{i}_ln1_g": np.ones(e),
                f"blk{i}_ln1_b": np.zeros(e),
                f"blk{i}_w_qkv": w(e, 3 * e),
                f"blk{i}_b_qkv": np.zeros(3 * e),
                f"blk{i}_w_proj": w(e, e),
                f"blk{i}_b_proj": np.zeros(e),
                f"blk{i}_ln2_g": np.ones(e),
                f"blk{i}_ln2_b": np.zeros(e),
                f"blk{i}_w_ff1": w(e, hidden),
                f"blk{i}_b_ff1": np.zeros(hidden),
                f"blk{i}_w_ff2": w(hidden, e),
                f"blk{i}_b_ff2": np.zeros(e),
            }
        )
    return params


def _layer_norm(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mu) * inv
    return gamma * xhat + beta, (xhat, inv, gamma)


def _layer_norm_bwd(dy, cache):
    xhat, inv, gamma = cache
    dgamma = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    dbeta = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * inv
    return dx, dgamma, dbeta


def _silu(x):
    """x * sigmoid(x); smooth, so finite-difference gradient checks behave."""
    s = np.exp(np.negative(x))
    s += 1.0
    np.reciprocal(s, out=s)
    return x * s, (x, s)


def _silu_bwd(dy, cache):
    x, s = cache
    d = 1.0 - s
    d *= x
    d += 1.0
    d *= s
    d *= dy
    return d


def _attention(u, p, i, num_heads):
    b, t, e = u.shape
    hd = e // num_heads
    qkv = u @ p[f"blk{i}_w_qkv"] + p[f"blk{i}_b_qkv"]
    q, k_, v = np.split(qkv, 3, axis=-1)

    def heads(z):  # (B, T, E) -> (B, h, T, hd)
        return z.reshape(b, t, num_heads, hd).transpose(0, 2, 1, 3)

    qh, kh, vh = heads(q), heads(k_), heads(v)
    logits = qh @ kh.transpose(0, 1, 3, 2) / math.sqrt(hd)
    logits -= logits.max(axis=-1, keepdims=True)
    expm = np.exp(logits)
    attn = expm / expm.sum(axis=-1, keepdims=True)
    ctx = attn @ vh  # (B, h, T, hd)
    merged = ctx.transpose(0, 2, 1, 3).reshape(b, t, e)
    out = merged @ p[f"blk{i}_w_proj"] + p[f"blk{i}_b_proj"]
    cache = (u, qh, kh, vh, attn, merged)
    return out, cache


def _attention_bwd(dout, cache, p, i, num_heads, grads):
    u, qh, kh, vh, attn, merged = cache
    b, t, e = u.shape
    hd = e // num_heads
    grads[f"blk{i}_w_proj"] += merged.reshape(-1, e).T @ dout.reshape(-1, e)
    grads[f"blk{i}_b_proj"] += dout.sum(axis=(0, 1))
    dmerged = dout @ p[f"blk{i}_w_proj"].T
    dctx = dmerged.reshape(b, t, num_heads, hd).transpose(0, 2, 1, 3)
    dattn = dctx @ vh.transpose(0, 1, 3, 2)
    dvh = attn.transpose(0, 1, 3, 2) @ dctx
    dlogits = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    dlogits /= math.sqrt(hd)
    dqh = dlogits @ kh
    dkh = dlogits.transpose(0, 1, 3, 2) @ qh

    def unheads(z):  # (B, h, T, hd) -> (B, T, E)
        return z.transpose(0, 2, 1, 3).reshape(b, t, e)

    dqkv = np.concatenate([unheads(dqh), unheads(dkh), unheads(dvh)], axis=-1)
    grads[f"blk{i}_w_qkv"] += u.reshape(-1, e).T @ dqkv.reshape(-1, 3 * e)
    grads[f"blk{i}_b_qkv"] += dqkv.sum(axis=(0, 1))
    return dqkv @ p[f"blk{i}_w_qkv"].T


def _prepare_inputs(config, x, k, actions):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ModelError(f"expected (B, T, D) input, got shape {x.shape}")
    b, t, d = x.shape
    if d != config.data_dim:
        raise ModelError(f"feature dim {d} != configured {config.data_dim}")
    if t > config.num_frames:
        raise ModelError(f"{t} frames exceed configured capacity {config.num_frames}")
    k = np.asarray(k, dtype=np.float64)
    if k.ndim == 0:
        k = np.full((b, t), float(k))
    elif k.shape == (t,):
        k = np.broadcast_to(k, (b, t)).copy()
    elif k.shape != (b, t):
        raise ModelError(f"noise level shape {k.shape} incompatible with ({b}, {t})")
    if actions is not None:
        if not config.action_vocab:
            raise ModelError("model has no action vocabulary")
        actions = np.asarray(actions, dtype=np.int64)
        if actions.shape != (b, t):
            raise ModelError(f"actions shape {actions.shape} != ({b}, {t})")
        if actions.min() < 0 or actions.max() >= config.action_vocab:
            raise ModelError("action label outside vocabulary")
    elif config.action_vocab:
        actions = np.zeros((b, t), dtype=np.int64)
    return x, k, actions


def forward(
    config: TinyDenoiserConfig,
    params: dict,
    x: np.ndarray,
    k,
    actions=None,
    with_cache: bool = False,
):
    """Run the denoiser; returns (B, T, D) predictions (and a backward cache)."""
    x, k, actions = _prepare_inputs(config, x, k, actions)
    b, t, d = x.shape
    feats = noise_features(k)
    h = x @ params["w_in"] + params["b_in"]
    h = h + params["pos"][None, :t, :]
    h = h + feats @ params["w_noise"] + params["b_noise"]
    if actions is not None:
        h = h + params["act_emb"][actions]
    blocks = []
    for i in range(config.num_blocks):
        u, ln1 = _layer_norm(h, params[f"blk{i}_ln1_g"], params[f"blk{i}_ln1_b"])
        att, att_cache = _attention(u, params, i, config.num_heads)
        h = h + att
        u2, ln2 = _layer_norm(h, params[f"blk{i}_ln2_g"], params[f"blk{i}_ln2_b"])
        f1 = u2 @ params[f"blk{i}_w_ff1"] + params[f"blk{i}_b_ff1"]
        g1, act_cache = _silu(f1)
        ff = g1 @ params[f"blk{i}_w_ff2"] + params[f"blk{i}_b_ff2"]
        h = h + ff
        blocks.append((ln1, att_cache, ln2, u2, act_cache, g1))
    hf, lnf = _layer_norm(h, params["ln_f_g"], params["ln_f_b"])
    y = hf @ params["w_out"] + params["b_out"]
    if not with_cache:
        return y
    cache = {"x": x, "k": k, "feats": feats, "actions": actions, "blocks": blocks,
             "hf": hf, "lnf": lnf}
    return y, cache


def backward(config: TinyDenoiserConfig, params: dict, cache: dict, dy: np.ndarray):
    """Backpropagate upstream gradients dy; returns (param grads, input grads)."""
    x, feats, actions = cache["x"], cache["feats"], cache["actions"]
    b, t, d = x.shape
    e = config.embed_dim
    grads = {name: np.zeros_like(val) for name, val in params.items()}
    grads["w_out"] += cache["hf"].reshape(-1, e).T @ dy.reshape(-1, d)
    grads["b_out"] += dy.sum(axis=(0, 1))
    dhf = dy @ params["w_out"].T
    dh, dg, db = _layer_norm_bwd(dhf, cache["lnf"])
    grads["ln_f_g"] += dg
    grads["ln_f_b"] += db
    for i in reversed(range(config.num_blocks)):
        ln1, att_cache, ln2, u2, act_cache, g1 = cache["blocks"][i]
        hidden = 4 * e
        dff = dh  # residual passthrough plus branch
        grads[f"blk{i}_w_ff2"] += g1.reshape(-1, hidden).T @ dff.reshape(-1, e)
        grads[f"blk{i}_b_ff2"] += dff.sum(axis=(0, 1))
        dg1 = dff @ params[f"blk{i}_w_ff2"].T
        df1 = _silu_bwd(dg1, act_cache)
        grads[f"blk{i}_w_ff1"] += u2.reshape(-1, e).T @ df1.reshape(-1, hidden)
        grads[f"blk{i}_b_ff1"] += df1.sum(axis=(0, 1))
        du2 = df1 @ params[f"blk{i}_w_ff1"].T
        dh2, dg, db = _layer_norm_bwd(du2, ln2)
        grads[f"blk{i}_ln2_g"] += dg
        grads[f"blk{i}_ln2_b"] += db
        dh = dh + dh2
        datt = dh
        du = _attention_bwd(datt, att_cache, params, i, config.num_heads, grads)
        dh1, dg, db = _layer_norm_bwd(du, ln1)
        grads[f"blk{i}_ln1_g"] += dg
        grads[f"blk{i}_ln1_b"] += db
        dh = dh + dh1
    grads["w_in"] += x.reshape(-1, d).T @ dh.reshape(-1, e)
    grads["b_in"] += dh.sum(axis=(0, 1))
    grads["pos"][:t] += dh.sum(axis=0)
    grads["w_noise"] += feats.reshape(-1, 8).T @ dh.reshape(-1, e)
    grads["b_noise"] += dh.sum(axis=(0, 1))
    if actions is not None:
        np.add.at(grads["act_emb"], actions.reshape(-1), dh.reshape(-1, e))
    dx = dh @ params["w_in"].T
    return grads, dx


class TinyDenoiser:
    """Inference-facing wrapper around a parameter set."""

    def __init__(self, config: TinyDenoiserConfig, params: dict):
        self.config = config
        self.params = params
        self.parameterization = Parameterization(config.parameterization)

    def predict(self, x, k, actions=None) -> np.ndarray:
        return forward(self.config, self.params, x, k, actions)


def ema_update(params: dict, shadow: dict, decay: float) -> dict:
    """shadow <- decay * shadow + (1 - decay) * params, elementwise."""
    if not 0.0 <= decay < 1.0:
        raise ModelError("EMA decay must satisfy 0 <= decay < 1")
    return {
        name: decay * shadow[name] + (1.0 - decay) * params[name] for name in params
    }


@dataclass
class Checkpoint:
    """Named parameter tensors plus config, EMA shadow, and step counter."""

    config: TinyDenoiserConfig
    params: dict
    ema: dict
    step: int = 0

    def __post_init__(self):
        if set(self.params) != set(self.ema):
            raise ModelError("EMA shadow names do not match parameters")
        for name in self.params:
            if self.params[name].shape != self.ema[name].shape:
                raise ModelError(f"EMA shadow shape mismatch for {name!r}")

    @classmethod
    def initialize(cls, config: TinyDenoiserConfig) -> "Checkpoint":
        params = init_params(config)
        ema = {name: val.copy() for name, val in params.items()}
        return cls(config=config, params=params, ema=ema, step=0)

    def model(self, use_ema: bool = True) -> TinyDenoiser:
        """Sampling uses the EMA weights by default; training uses raw weights."""
        return TinyDenoiser(self.config, self.ema if use_ema else self.params)

    def save(self, path) -> None:
        tensors = {f"param/{n}": v for n, v in self.params.items()}
        tensors.update({f"ema/{n}": v for n, v in self.ema.items()})
        meta = {"kind": "checkpoint", "config": self.config.to_dict(), "step": self.step}
        tensorfile.save_tensors(path, tensors, meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        tensors, meta = tensorfile.load_tensors(path)
        if meta.get("kind") != "checkpoint":
            raise ModelError(f"{path} is not a checkpoint container")
        config = TinyDenoiserConfig.from_dict(meta["config"])
        params = {n[len("param/"):]: v for n, v in tensors.items() if n.startswith("param/")}
        ema = {n[len("ema/"):]: v for n, v in tensors.items() if n.startswith("ema/")}
        return cls(config=config, params=params, ema=ema, step=int(meta["step"]))
