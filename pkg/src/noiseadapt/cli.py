"""Command-line entry point: train toy models, run streaming evaluations,
ablation sweeps, and the best-of-k oracle. Outputs are CSV and key-value
text files only; plotting is left to external tools."""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import RunConfig, echo_config, parse_config, with_overrides
from .data import (
    StreamSpec,
    default_stream_spec,
    generate_stream,
    stream_clips,
    write_csv,
    write_tensor,
)
from .diffusion import build_schedule
from .errors import NoiseAdaptError
from .models import (
    Autoencoder,
    Denoiser,
    FeatureNet,
    ModelBundle,
    ModelDims,
    reconstruction_l1,
    train_autoencoder,
    train_denoiser,
)
from .stream import (
    CSV_COLUMNS,
    VARIANT_FROZEN,
    VARIANT_PIXEL_FEATURE,
    VARIANTS,
    StreamConfig,
    autoencoder_upper_bound,
    oracle_best_of_k,
    run_stream,
)

SWEEPS = {
    "p": [0.0, 0.25, 0.5, 0.75, 0.9, 1.0],
    "lambda": [0.0, 0.002, 0.005, 0.01, 0.1],
    "every_k": [1, 2, 5, 10],
    "steps": [5, 10, 20],
    "eta": [0.0, 1.0],
}

ABLATE_COLUMNS = ["sweep", "value", "variant", "seed", "mean_ssim",
                  "mean_psnr", "frechet", "mean_boundary",
                  "mean_predict_seconds", "mean_adapt_seconds"]


def _fmt_value(v) -> str:
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)


def write_summary(path, summary: dict):
    with open(path, "w") as fh:
        for key, value in summary.items():
            fh.write(f"{key} = {_fmt_value(value)}\n")


def eval_stream_spec(cfg: RunConfig) -> StreamSpec:
    seed = cfg.stream_seed if cfg.stream_seed >= 0 else cfg.seed + 20000
    return default_stream_spec(
        seed=seed, kind=cfg.stream_kind, length=cfg.stream_length,
        drift_clip=cfg.drift_clip,
        velocity_scale=cfg.drift_velocity_scale,
        size_scale=cfg.drift_size_scale,
        frequency_scale=cfg.drift_frequency_scale,
        background_shift=cfg.drift_background_shift)


def stream_config_from(cfg: RunConfig, variant: str | None = None) -> StreamConfig:
    return StreamConfig(
        variant=variant or cfg.variant,
        every_k=cfg.every_k, warmup_steps=cfg.warmup_steps,
        warmup_repeats=cfg.warmup_repeats, p=cfg.p, lr=cfg.lr, lam=cfg.lam,
        num_steps=cfg.sampler_steps, eta=cfg.eta, n_inner=cfg.n_inner,
        clip_norm=cfg.clip_norm if cfg.clip_norm > 0 else None,
        log_noise=cfg.log_noise)


def load_bundle(cfg: RunConfig, dims: ModelDims = ModelDims()) -> ModelBundle:
    root = cfg.model_dir
    return ModelBundle(
        autoencoder=Autoencoder.load(os.path.join(root, "autoencoder"), dims),
        denoiser=Denoiser.load(os.path.join(root, "denoiser"), dims,
                               t_max=cfg.schedule_T),
        feature_net=FeatureNet.load(os.path.join(root, "feature_net"), dims))


# -- train ------------------------------------------------------------------

def cmd_train(cfg: RunConfig) -> int:
    os.makedirs(cfg.model_dir, exist_ok=True)
    os.makedirs(cfg.out_dir, exist_ok=True)
    echo_config(cfg, os.path.join(cfg.out_dir, "config.txt"))
    dims = ModelDims()
    schedule = build_schedule(cfg.schedule_T, cfg.beta_start, cfg.beta_end)

    # training streams share the evaluation generator but carry no drift
    streams = [stream_clips(StreamSpec(kind=cfg.stream_kind,
                                       length=cfg.train_stream_length,
                                       seed=cfg.seed * 1000 + i))
               for i in range(cfg.train_streams)]
    holdout = streams[-1]
    train_streams = streams[:-1] if len(streams) > 1 else streams
    all_train = np.concatenate(train_streams)

    rng = np.random.default_rng(cfg.seed)
    ae = Autoencoder.init(rng, dims)
    ae_curve = train_autoencoder(ae, all_train, cfg.ae_iters, cfg.ae_lr,
                                 cfg.batch_size, rng)
    recon = reconstruction_l1(ae, holdout)

    dn = Denoiser.init(rng, dims, t_max=cfg.schedule_T)
    dn_curve = train_denoiser(dn, ae, train_streams, schedule, cfg.dn_iters,
                              cfg.dn_lr, cfg.batch_size, cfg.cond_dropout, rng)
    fnet = FeatureNet.init(rng, dims)

    ae.save(os.path.join(cfg.model_dir, "autoencoder"))
    dn.save(os.path.join(cfg.model_dir, "denoiser"))
    fnet.save(os.path.join(cfg.model_dir, "feature_net"))
    if ae_curve:
        write_csv(os.path.join(cfg.out_dir, "ae_curve.csv"), ["iter", "l1_loss"],
                  [(i, v) for i, v in enumerate(ae_curve)])
    if dn_curve:
        write_csv(os.path.join(cfg.out_dir, "dn_curve.csv"), ["iter", "mse_loss"],
                  [(i, v) for i, v in enumerate(dn_curve)])
    write_summary(os.path.join(cfg.model_dir, "train_meta.txt"), {
        "holdout_recon_l1": recon,
        "ae_final_loss": ae_curve[-1] if ae_curve else float("nan"),
        "dn_final_loss": dn_curve[-1] if dn_curve else float("nan"),
        "autoencoder_sha256": ae.checksum(),
        "denoiser_sha256": dn.checksum(),
        "feature_net_sha256": fnet.checksum(),
    })
    print(f"trained models -> {cfg.model_dir} (holdout recon L1 {recon:.4f})")
    return 0


# -- stream -----------------------------------------------------------------

def cmd_stream(cfg: RunConfig) -> int:
    os.makedirs(cfg.out_dir, exist_ok=True)
    echo_config(cfg, os.path.join(cfg.out_dir, "config.txt"))
    models = load_bundle(cfg)
    schedule = build_schedule(cfg.schedule_T, cfg.beta_start, cfg.beta_end)
    spec = eval_stream_spec(cfg)
    result = run_stream(models, schedule, generate_stream(spec),
                        stream_config_from(cfg), np.random.default_rng(cfg.seed))
    write_csv(os.path.join(cfg.out_dir, "steps.csv"), CSV_COLUMNS,
              [r.to_row() for r in result.records])
    write_summary(os.path.join(cfg.out_dir, "summary.txt"), result.summary)
    if result.noise_trajectory is not None:
        write_tensor(os.path.join(cfg.out_dir, "noise_trajectory.nft"),
                     result.noise_trajectory)
    print(f"{cfg.variant}: mean SSIM {result.summary['mean_ssim']:.4f}, "
          f"frechet {result.summary['frechet']:.2f} -> {cfg.out_dir}")
    return 0


# -- ablate -----------------------------------------------------------------

def _ablate_worker(args):
    cfg, sweep, value, variant, seed = args
    overrides = {"seed": seed, "variant": variant}
    if value is None:
        # baseline reference row; the swept knob stays at its default
        pass
    elif sweep == "p":
        overrides["p"] = value
    elif sweep == "lambda":
        overrides["lam"] = value
    elif sweep == "every_k":
        overrides["every_k"] = int(value)
    elif sweep == "steps":
        overrides["sampler_steps"] = int(value)
    elif sweep == "eta":
        overrides["eta"] = value
    run_cfg = with_overrides(cfg, **overrides)
    models = load_bundle(run_cfg)
    schedule = build_schedule(run_cfg.schedule_T, run_cfg.beta_start,
                              run_cfg.beta_end)
    spec = eval_stream_spec(run_cfg)
    result = run_stream(models, schedule, generate_stream(spec),
                        stream_config_from(run_cfg),
                        np.random.default_rng(run_cfg.seed))
    s = result.summary
    value = -1.0 if value is None else value
    return (sweep, value, variant, seed, s["mean_ssim"], s["mean_psnr"],
            s["frechet"], s["mean_boundary"], s["mean_predict_seconds"],
            s["mean_adapt_seconds"])


def _ablate_tasks(cfg: RunConfig, sweep: str):
    seeds = [cfg.seed + i for i in range(cfg.ablate_seeds)]
    savi = cfg.variant if cfg.variant.startswith("savi_dno") else VARIANT_PIXEL_FEATURE
    tasks = []
    for seed in seeds:
        if sweep == "eta":
            # gradient adaptation needs eta = 0; the eta sweep covers the
            # frozen baseline plus the deterministic adaptation reference
            for value in SWEEPS["eta"]:
                tasks.append((cfg, sweep, value, VARIANT_FROZEN, seed))
            tasks.append((cfg, sweep, 0.0, savi, seed))
        else:
            for value in SWEEPS[sweep]:
                tasks.append((cfg, sweep, value, savi, seed))
                if sweep == "steps":
                    tasks.append((cfg, sweep, value, VARIANT_FROZEN, seed))
            if sweep in ("p", "lambda", "every_k"):
                tasks.append((cfg, sweep, None, VARIANT_FROZEN, seed))
    return tasks


def cmd_ablate(cfg: RunConfig, sweep: str) -> int:
    if sweep not in SWEEPS:
        raise NoiseAdaptError(f"unknown sweep {sweep!r} (choose from {list(SWEEPS)})")
    os.makedirs(cfg.out_dir, exist_ok=True)
    echo_config(cfg, os.path.join(cfg.out_dir, "config.txt"))
    tasks = _ablate_tasks(cfg, sweep)
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            rows = list(pool.map(_ablate_worker, tasks))
    else:
        rows = [_ablate_worker(t) for t in tasks]
    rows.sort(key=lambda r: (r[1], r[2], r[3]))
    out = os.path.join(cfg.out_dir, f"ablate_{sweep}.csv")
    write_csv(out, ABLATE_COLUMNS, rows)
    print(f"{len(rows)} runs -> {out}")
    return 0


# -- oracle -----------------------------------------------------------------

def cmd_oracle(cfg: RunConfig) -> int:
    os.makedirs(cfg.out_dir, exist_ok=True)
    echo_config(cfg, os.path.join(cfg.out_dir, "config.txt"))
    models = load_bundle(cfg)
    schedule = build_schedule(cfg.schedule_T, cfg.beta_start, cfg.beta_end)
    sampler = stream_config_from(cfg, variant=VARIANT_FROZEN).sampler_config()
    clips = stream_clips(eval_stream_spec(cfg))
    n = min(cfg.oracle_steps, len(clips) - 1)
    rng = np.random.default_rng(cfg.seed)
    rows = []
    with ad.no_grad():
        for s in range(n):
            z_cond = models.autoencoder.encode(Tensor(clips[s][None])).detach()
            target = clips[s + 1]
            _, single = oracle_best_of_k(models, schedule, sampler, z_cond,
                                         target, 1, rng)
            _, best = oracle_best_of_k(models, schedule, sampler, z_cond,
                                       target, cfg.oracle_k, rng)
            rows.append((s + 1, single["ssim"], best["ssim"],
                         single["psnr"], best["psnr"]))
    upper = autoencoder_upper_bound(models, clips[:n + 1])
    write_csv(os.path.join(cfg.out_dir, "oracle.csv"),
              ["step", "ssim_single", "ssim_best", "psnr_single", "psnr_best"],
              rows)
    frac = float(np.mean([r[2] > r[1] for r in rows]))
    write_summary(os.path.join(cfg.out_dir, "oracle_summary.txt"), {
        "k": cfg.oracle_k,
        "n_steps": n,
        "mean_ssim_single": float(np.mean([r[1] for r in rows])),
        "mean_ssim_best": float(np.mean([r[2] for r in rows])),
        "fraction_best_above_single": frac,
        "autoencoder_mean_ssim": upper["mean_ssim"],
        "autoencoder_mean_psnr": upper["mean_psnr"],
    })
    print(f"best-of-{cfg.oracle_k} beats single on {frac:.0%} of {n} steps")
    return 0


# -- argument parsing -------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="noiseadapt")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "stream", "ablate", "oracle"):
        p = sub.add_parser(name)
        p.add_argument("--config", metavar="PATH", default=None)
        p.add_argument("--out", metavar="DIR", default=None)
        p.add_argument("--seed", metavar="N", type=int, default=None)
        if name == "stream":
            p.add_argument("--variant", metavar="NAME", choices=VARIANTS,
                           default=None)
        if name == "ablate":
            p.add_argument("--sweep", metavar="NAME", required=True,
                           choices=sorted(SWEEPS))
            p.add_argument("--jobs", metavar="N", type=int, default=None)
    return parser


def _resolve_config(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else RunConfig()
    overrides = {}
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "variant", None) is not None:
        overrides["variant"] = args.variant
    if getattr(args, "jobs", None) is not None:
        overrides["jobs"] = args.jobs
    return with_overrides(cfg, **overrides)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "stream":
            return cmd_stream(cfg)
        if args.command == "ablate":
            return cmd_ablate(cfg, args.sweep)
        return cmd_oracle(cfg)
    except NoiseAdaptError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
