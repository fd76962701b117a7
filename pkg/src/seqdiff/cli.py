"""Command-line entry points.

Every command reads one engine config (see config.py for the schema) and
writes its outputs under --out-dir. Models are either tiny-denoiser
checkpoints (--checkpoint) or, for Gaussian datasets, the exact posterior
denoiser when no checkpoint is given.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import tensorfile
from .config import EngineConfig
from .datasets import (
    Ar1DatasetConfig,
    NavDatasetConfig,
    NavWindowCodec,
    NAV_VOCAB,
    make_ar1_dataset,
    make_nav_dataset,
    steering_to_actions,
)
from .gaussian import GaussianPosteriorDenoiser, GaussianSeqSpec
from .guidance import TaskSpec, scheme_from_config
from .model import Checkpoint
from .oracle import (
    elbo,
    elbo_coefficients,
    fourier_attenuation,
    FourierSpec,
    make_path,
    partition_example_mse,
    random_path,
)
from .sampler import (
    InterpolationConfig,
    SteeringInput,
    interpolate,
    rollout,
    sample,
)
from .service import ModelEntry, create_app
from .sweeps import plot_sweep, run_sweep
from .training import train


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_dataset(cfg: EngineConfig):
    ds_cfg = cfg.dataset_config()
    if isinstance(ds_cfg, Ar1DatasetConfig):
        data, spec = make_ar1_dataset(ds_cfg)
        return data, None, spec, ds_cfg
    data, actions = make_nav_dataset(ds_cfg)
    return data, actions, None, ds_cfg


def _resolve_model(cfg: EngineConfig, checkpoint_path, spec):
    if checkpoint_path:
        ckpt = Checkpoint.load(checkpoint_path)
        return ckpt.model(use_ema=True)
    if spec is None:
        raise SystemExit("a checkpoint is required for non-Gaussian datasets")
    return GaussianPosteriorDenoiser(spec, cfg.schedule())


def cmd_train(args) -> int:
    cfg = EngineConfig.load(args.config)
    out = _out_dir(args)
    data, actions, _, _ = _load_dataset(cfg)
    train_cfg = cfg.train_config()
    if args.seed is not None:
        train_cfg.seed = args.seed
    init = Checkpoint.load(args.init_checkpoint) if args.init_checkpoint else None
    ckpt, curve = train(
        data,
        actions,
        cfg.objective(),
        train_cfg,
        cfg.model_config(),
        cfg.grid(),
        cfg.schedule(),
        init_checkpoint=init,
        curve_path=out / "curve.csv",
    )
    ckpt.save(out / "checkpoint.sqtf")
    print(f"trained {ckpt.step} steps; final smoothed loss {curve[-1][2]:.6f}"
          if curve else "trained 0 steps")
    print(f"wrote {out / 'checkpoint.sqtf'} and {out / 'curve.csv'}")
    return 0


def _task_from_config(cfg: EngineConfig, spec):
    task_cfg = cfg.data["task"]
    history = tuple(task_cfg["history"])
    values = task_cfg.get("history_values")
    if values is None:
        if spec is None:
            raise SystemExit("task.history_values required for non-Gaussian datasets")
        seed = int(cfg.data["sampler"].get("seed", 0))
        draw = spec.sample(np.random.default_rng(np.random.SeedSequence([seed, 101])), 1)[0]
        values = draw[list(history)]
    return TaskSpec(
        n_frames=int(task_cfg["n_frames"]),
        history=history,
        history_values=np.asarray(values, dtype=np.float64),
    )


def cmd_sample(args) -> int:
    cfg = EngineConfig.load(args.config)
    out = _out_dir(args)
    _, _, spec, _ = _load_dataset(cfg)
    model = _resolve_model(cfg, args.checkpoint, spec)
    task = _task_from_config(cfg, spec)
    scheme = scheme_from_config(cfg.data["scheme"], task.history)
    sampler_cfg = cfg.sampler_config()
    seed = args.seed if args.seed is not None else sampler_cfg.seed
    draws = sample(
        task, scheme, model, sampler_cfg, cfg.schedule(),
        seed=seed, batch_size=args.batch,
    )
    tensorfile.save_tensors(
        out / "samples.sqtf",
        {"samples": draws},
        meta={"kind": "samples", "task": cfg.data["task"], "scheme": cfg.data["scheme"]},
    )
    if args.csv:
        with open(out / "samples.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample", "frame", *[f"x{i}" for i in range(draws.shape[2])]])
            for b in range(draws.shape[0]):
                for t in range(draws.shape[1]):
                    writer.writerow([b, t, *draws[b, t]])
    print(f"wrote {draws.shape[0]} samples to {out / 'samples.sqtf'}")
    return 0


def _nav_plumbing(cfg: EngineConfig, ds_cfg):
    codec = NavWindowCodec()

    def plan(steering, n_new):
        return steering_to_actions(steering, ds_cfg, n_new)

    return codec, plan


def cmd_rollout(args) -> int:
    cfg = EngineConfig.load(args.config)
    out = _out_dir(args)
    data, _, spec, ds_cfg = _load_dataset(cfg)
    model = _resolve_model(cfg, args.checkpoint, spec)
    rollout_cfg = cfg.rollout_config()
    codec = plan = None
    if isinstance(ds_cfg, NavDatasetConfig):
        codec, plan = _nav_plumbing(cfg, ds_cfg)
    steering_script = None
    if args.steering:
        steering_script = [
            SteeringInput(**item) for item in json.loads(Path(args.steering).read_text())
        ]

    def provider(w, seq):
        if steering_script is None:
            return SteeringInput(turn_angle_deg=0.0, distance=1.0)
        return steering_script[w % len(steering_script)]

    initial = data[0][: rollout_cfg.context_frames]
    seed = args.seed if args.seed is not None else 0
    seq = rollout(
        initial, args.windows, provider, rollout_cfg, model,
        cfg.sampler_config(), cfg.schedule(), seed=seed,
        window_codec=codec, plan_actions=plan,
    )
    tensorfile.save_tensors(out / "rollout.sqtf", {"sequence": seq},
                            meta={"kind": "rollout", "windows": args.windows})
    with open(out / "rollout.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", *[f"x{i}" for i in range(seq.shape[1])]])
        for t, row in enumerate(seq):
            writer.writerow([t, *row])
    print(f"rolled out {args.windows} windows -> {seq.shape[0]} frames")
    return 0


def cmd_interpolate(args) -> int:
    cfg = EngineConfig.load(args.config)
    out = _out_dir(args)
    _, _, spec, ds_cfg = _load_dataset(cfg)
    model = _resolve_model(cfg, args.checkpoint, spec)
    tensors, _ = tensorfile.load_tensors(args.frames)
    name = "sequence" if "sequence" in tensors else next(iter(tensors))
    frames = tensors[name]
    if frames.ndim == 3:
        frames = frames[0]
    interp_cfg = cfg.data["interpolation"]
    codec = None
    if isinstance(ds_cfg, NavDatasetConfig):
        codec = NavWindowCodec()
    dense = interpolate(
        frames,
        InterpolationConfig(factor=int(interp_cfg["factor"])),
        model,
        cfg.sampler_config(),
        cfg.schedule(),
        scheme_config=interp_cfg.get("scheme"),
        seed=args.seed if args.seed is not None else 0,
        window_codec=codec,
    )
    tensorfile.save_tensors(out / "interpolated.sqtf", {"sequence": dense},
                            meta={"kind": "interpolated", "factor": interp_cfg["factor"]})
    print(f"interpolated {len(frames)} -> {len(dense)} frames")
    return 0


def cmd_sweep(args) -> int:
    cfg = EngineConfig.load(args.config)
    out = _out_dir(args)
    _, _, spec, _ = _load_dataset(cfg)
    if spec is None:
        raise SystemExit("sweeps are scored against the Gaussian oracle; use gaussian-ar1")
    model = _resolve_model(cfg, args.checkpoint, spec)
    task = _task_from_config(cfg, spec)
    sweep_cfg = cfg.data["sweep"]
    report = run_sweep(
        model, spec, task, cfg.schedule(), cfg.sampler_config(),
        omegas=tuple(sweep_cfg["omegas"]),
        fractional_mask=float(sweep_cfg["fractional_mask"]),
        n_samples=int(sweep_cfg["n_samples"]),
        seed=args.seed if args.seed is not None else 0,
    )
    report.write_csv(out / "sweep.csv")
    plot_sweep(report, out / "sweep.png")
    print(f"wrote {out / 'sweep.csv'} and {out / 'sweep.png'}")
    return 0


def cmd_oracle_verify(args) -> int:
    cfg = EngineConfig.load(args.config)
    out = _out_dir(args)
    schedule = cfg.schedule()
    seed = args.seed if args.seed is not None else 0
    rng = np.random.default_rng(seed)
    rows = []
    failures = 0
    for trial in range(args.trials):
        n_frames = int(rng.integers(1, 4))
        dim = int(rng.integers(1, 3))
        levels = int(rng.integers(2, 6))
        grid_t = cfg.grid().__class__(schedule, levels)
        n = n_frames * dim
        a = rng.standard_normal((n, n + 2))
        spec = GaussianSeqSpec(
            n_frames=n_frames, dim=dim,
            mean=rng.standard_normal(n) * 0.3,
            cov=a @ a.T / (n + 2) + 0.2 * np.eye(n),
        )
        data = spec.sample(rng, 1)[0]
        ll = spec.log_likelihood(data)
        for kind in ("full-sequence", "autoregressive", "random"):
            path = (
                random_path(n_frames, levels, rng)
                if kind == "random"
                else make_path(kind, n_frames, levels)
            )
            res = elbo(spec, data, path, grid_t)
            ok = res.bound <= ll + 1e-6
            failures += 0 if ok else 1
            rows.append(
                {"trial": trial, "path": kind, "bound": res.bound,
                 "log_likelihood": ll, "gap": ll - res.bound, "ok": ok}
            )
    with open(out / "elbo_verify.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    grid = cfg.grid()
    with open(out / "elbo_coefficients.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["level", "c_i"])
        for i, c in enumerate(elbo_coefficients(grid), start=1):
            writer.writerow([i, c])
    fspec = FourierSpec(d=16, power_law_scale=1.0, power_law_exponent=2.0)
    with open(out / "fourier_attenuation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        sigmas = [0.0, 0.1, 0.5, 1.0]
        writer.writerow(["frequency", *[f"sigma={s}" for s in sigmas]])
        table = np.column_stack([fourier_attenuation(fspec, s) for s in sigmas])
        for i, row in enumerate(table, start=1):
            writer.writerow([i, *row])
    with open(out / "mle_partition.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n", "individual_mse", "averaged_mse", "expected", "expected_sq"])
        for n in (1, 2, 4, 10):
            ind, avg = partition_example_mse(n, rng=np.random.default_rng(seed + n))
            writer.writerow([n, ind, avg, 1.0 / n, 1.0 / n**2])
    print(f"oracle-verify: {len(rows)} bound checks, {failures} failures")
    return 0 if failures == 0 else 1


def cmd_serve(args) -> int:
    import uvicorn

    cfg = EngineConfig.load(args.config)
    data, _, spec, ds_cfg = _load_dataset(cfg)
    model = _resolve_model(cfg, args.checkpoint, spec)
    codec = plan = None
    frame_layout = {"columns": [f"x{i}" for i in range(data.shape[2])]}
    if isinstance(ds_cfg, NavDatasetConfig):
        codec, plan = _nav_plumbing(cfg, ds_cfg)
        frame_layout = {"position": [0, 1], "heading": [2, 3],
                        "columns": ["dx", "dy", "cos", "sin"]}
    entry = ModelEntry(
        model=model,
        rollout_config=cfg.rollout_config(),
        schedule=cfg.schedule(),
        sampler=cfg.sampler_config(),
        frame_layout=frame_layout,
        window_codec=codec,
        plan_actions=plan,
        description=f"{cfg.data['dataset']['kind']} model",
    )
    app = create_app({args.model_id: entry})
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="seqdiff")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=True):
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out-dir", default="out")
        if checkpoint:
            p.add_argument("--checkpoint", default=None)

    p = sub.add_parser("train", help="train a denoiser per the config")
    common(p, checkpoint=False)
    p.add_argument("--init-checkpoint", default=None,
                   help="fine-tune from an existing checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="guided sampling for the configured task")
    common(p)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--csv", action="store_true")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("rollout", help="sliding-window rollout")
    common(p)
    p.add_argument("--windows", type=int, default=8)
    p.add_argument("--steering", default=None, help="JSON file of steering inputs")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("interpolate", help="densify a generated sequence")
    common(p)
    p.add_argument("--frames", required=True, help="tensor file with a sequence")
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("sweep", help="guidance-scale sweep against the oracle")
    common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("oracle-verify", help="run the exactness battery, emit CSVs")
    common(p, checkpoint=False)
    p.add_argument("--trials", type=int, default=20)
    p.set_defaults(func=cmd_oracle_verify)

    p = sub.add_parser("serve", help="run the interactive rollout service")
    common(p)
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--model-id", default="default")
    p.set_defaults(func=cmd_serve)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
