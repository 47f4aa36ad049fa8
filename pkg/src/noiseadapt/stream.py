"""The continuous-stream protocol: predict the next clip, observe it, score
the prediction, then (per schedule) adapt. Predictions are always finalized
before their target clip is read from the stream.

Variants
  frozen                  fresh noise each step, no adaptation
  savi_dno_pixel          noise optimization on the pixel L1 loss
  savi_dno_pixel_feature  pixel L1 plus weighted feature loss
  savi_dno_latent         noise optimization on the latent L1 loss
  ddim_inverse            noise from DDIM inversion of each observation
  finetune                denoiser-weight fine-tuning on the denoiser loss
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .diffusion import NoiseSchedule, SamplerConfig, ddim_invert, finetune_step, sample
from .errors import ConfigError, StreamTooShort
from .metrics import boundary_consistency, frechet_distance, gaussian_fit, psnr, ssim
from .noiseopt import (
    MODE_LATENT,
    MODE_PIXEL,
    MODE_PIXEL_FEATURE,
    NoiseState,
    OptimConfig,
    adapt_from_graph,
    interpolate_noise,
    predict_with_noise,
)

VARIANT_FROZEN = "frozen"
VARIANT_PIXEL = "savi_dno_pixel"
VARIANT_PIXEL_FEATURE = "savi_dno_pixel_feature"
VARIANT_LATENT = "savi_dno_latent"
VARIANT_INVERSE = "ddim_inverse"
VARIANT_FINETUNE = "finetune"

VARIANTS = (VARIANT_FROZEN, VARIANT_PIXEL, VARIANT_PIXEL_FEATURE,
            VARIANT_LATENT, VARIANT_INVERSE, VARIANT_FINETUNE)

_VARIANT_MODE = {
    VARIANT_PIXEL: MODE_PIXEL,
    VARIANT_PIXEL_FEATURE: MODE_PIXEL_FEATURE,
    VARIANT_LATENT: MODE_LATENT,
}


@dataclass(frozen=True)
class StreamConfig:
    variant: str = VARIANT_PIXEL_FEATURE
    every_k: int = 1          # 0 = never optimize after warmup
    warmup_steps: int = 0
    warmup_repeats: int = 1
    p: float = 0.9
    lr: float = 0.01
    lam: float = 0.002
    num_steps: int = 10
    eta: float = 0.0
    n_inner: int = 1          # finetune variant only
    clip_norm: float | None = 10.0
    log_noise: bool = False

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.every_k < 0 or self.warmup_steps < 0 or self.warmup_repeats < 1:
            raise ConfigError("every_k/warmup fields out of range")
        if self.variant == VARIANT_FINETUNE and self.n_inner < 1:
            raise ConfigError("finetune needs n_inner >= 1")

    def optim_config(self) -> OptimConfig:
        return OptimConfig(lr=self.lr, lam=self.lam, p=self.p,
                           clip_norm=self.clip_norm)

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(num_steps=self.num_steps, eta=self.eta)


@dataclass
class StepRecord:
    step: int
    ssim: float
    psnr: float
    loss_pixel: float
    loss_feature: float
    loss_latent: float
    loss_total: float
    boundary: float
    predict_seconds: float
    adapt_seconds: float
    adapted: int

    def to_row(self) -> tuple:
        return (self.step, self.ssim, self.psnr, self.loss_pixel,
                self.loss_feature, self.loss_latent, self.loss_total,
                self.boundary, self.predict_seconds, self.adapt_seconds,
                self.adapted)


CSV_COLUMNS = ["step", "ssim", "psnr", "loss_pixel", "loss_feature",
               "loss_latent", "loss_total", "boundary_consistency",
               "predict_seconds", "adapt_seconds", "adapted"]


@dataclass
class StreamResult:
    records: list[StepRecord]
    summary: dict
    noise_trajectory: np.ndarray | None = None


def should_optimize(s: int, every_k: int, warmup_steps: int,
                    warmup_repeats: int = 1) -> tuple[bool, int]:
    """Adaptation schedule for prediction step s (1-based).

    During warmup every step optimizes with the configured inner repeats;
    afterwards every k-th step optimizes once. every_k = 0 is the sentinel
    for "never optimize after warmup"."""
    if s < 1:
        raise ConfigError(f"step index {s} must be >= 1")
    if s <= warmup_steps:
        return True, warmup_repeats
    if every_k == 0:
        return False, 0
    return (s % every_k == 0), 1


def _split_mean(values: list[float]) -> tuple[float, float]:
    """Mean over the first and last 100 steps (halves for short streams)."""
    n = len(values)
    span = min(100, n // 2) if n < 200 else 100
    if span == 0:
        return float(values[0]), float(values[-1])
    return float(np.mean(values[:span])), float(np.mean(values[-span:]))


def run_stream(models, schedule: NoiseSchedule, clips, config: StreamConfig,
               rng, on_predict=None) -> StreamResult:
    """Run one (variant, seed) stream pass.

    clips is an iterable yielding (S, H, W) arrays; it is advanced only
    after the prediction for the incoming clip is finalized (on_predict, if
    given, is called with (step, x_pred) at that point)."""
    config.validate()
    ae, dn, fnet = models.autoencoder, models.denoiser, models.feature_net
    sampler = config.sampler_config()
    opt_cfg = config.optim_config()
    latent_shape = (1,) + models.dims.latent_shape

    it = iter(clips)
    try:
        x_prev = np.asarray(next(it))
    except StopIteration:
        raise StreamTooShort("stream yielded no clips") from None

    state = NoiseState.init(rng, latent_shape)
    finetune_dn = dn.copy() if config.variant == VARIANT_FINETUNE else None
    active_dn = finetune_dn if finetune_dn is not None else dn
    mode = _VARIANT_MODE.get(config.variant)

    records: list[StepRecord] = []
    pred_feats: list[np.ndarray] = []
    targ_feats: list[np.ndarray] = []
    noise_log: list[np.ndarray] = []
    s = 0
    while True:
        s += 1
        with ad.no_grad():
            z_cond = ae.encode(Tensor(x_prev[None])).detach()
        opt_now, repeats = should_optimize(s, config.every_k,
                                           config.warmup_steps,
                                           config.warmup_repeats)

        t0 = time.perf_counter()
        graph = None
        if config.variant in _VARIANT_MODE:
            if opt_now:
                graph = predict_with_noise(models, schedule, sampler, z_cond,
                                           state, opt_cfg, rng, mode)
                x_pred = graph.x_pred
            else:
                eps_fresh = rng.standard_normal(latent_shape)
                with ad.no_grad():
                    eps_used = interpolate_noise(opt_cfg.p, Tensor(state.eps),
                                                 Tensor(eps_fresh))
                    z_pred = sample(active_dn, schedule, sampler, z_cond, eps_used)
                    x_pred = ae.decode(z_pred).data[0]
        elif config.variant == VARIANT_INVERSE:
            with ad.no_grad():
                z_pred = sample(active_dn, schedule, sampler, z_cond,
                                Tensor(state.eps), rng=rng)
                x_pred = ae.decode(z_pred).data[0]
        else:  # frozen, finetune
            eps = rng.standard_normal(latent_shape)
            with ad.no_grad():
                z_pred = sample(active_dn, schedule, sampler, z_cond,
                                Tensor(eps), rng=rng)
                x_pred = ae.decode(z_pred).data[0]
        predict_seconds = time.perf_counter() - t0

        if on_predict is not None:
            on_predict(s, x_pred)
        try:
            x_obs = np.asarray(next(it))
        except StopIteration:
            if s == 1:
                raise StreamTooShort("stream needs at least 2 clips") from None
            break

        # score the already-finalized prediction
        step_ssim = ssim(x_pred, x_obs)
        step_psnr = psnr(x_pred, x_obs)
        step_boundary = boundary_consistency(x_prev, x_pred)
        pix = float(np.mean(np.abs(x_pred - x_obs)))
        feat = lat = tot = 0.0

        t1 = time.perf_counter()
        adapted = 0
        if config.variant in _VARIANT_MODE and opt_now:
            state, breakdown = adapt_from_graph(graph, models, x_obs, state, opt_cfg)
            for _ in range(repeats - 1):
                extra = predict_with_noise(models, schedule, sampler, z_cond,
                                           state, opt_cfg, rng, mode,
                                           eps_fresh=graph.eps_fresh)
                state, breakdown = adapt_from_graph(extra, models, x_obs,
                                                    state, opt_cfg)
            feat, lat, tot = breakdown.feature, breakdown.latent, breakdown.total
            adapted = 1
        elif config.variant == VARIANT_INVERSE and opt_now:
            # invert under the conditioning the next prediction will use
            # (the observation's own latent), so the reused noise replays
            # the observation when resampled
            with ad.no_grad():
                z_obs = ae.encode(Tensor(x_obs[None])).detach()
            eps_inv = ddim_invert(active_dn, schedule, sampler, z_obs, z_obs)
            state = NoiseState(eps=eps_inv.data, adam_m=state.adam_m,
                               adam_v=state.adam_v, step_count=state.step_count)
            adapted = 1
        elif config.variant == VARIANT_FINETUNE and opt_now:
            with ad.no_grad():
                z_obs = ae.encode(Tensor(x_obs[None])).detach()
            finetune_step(active_dn, schedule, z_obs, z_cond,
                          config.n_inner, config.lr, rng)
            adapted = 1
        adapt_seconds = time.perf_counter() - t1

        with ad.no_grad():
            pred_feats.append(fnet(Tensor(x_pred[None])).data[0])
            targ_feats.append(fnet(Tensor(x_obs[None])).data[0])
        if config.log_noise:
            noise_log.append(state.eps.ravel().copy())

        records.append(StepRecord(
            step=s, ssim=step_ssim, psnr=step_psnr, loss_pixel=pix,
            loss_feature=feat, loss_latent=lat,
            loss_total=tot if adapted else pix, boundary=step_boundary,
            predict_seconds=predict_seconds, adapt_seconds=adapt_seconds,
            adapted=adapted))
        x_prev = x_obs

    ssims = [r.ssim for r in records]
    first, last = _split_mean(ssims)
    fvd = frechet_distance(gaussian_fit(np.stack(pred_feats)),
                           gaussian_fit(np.stack(targ_feats)))
    summary = {
        "variant": config.variant,
        "n_steps": len(records),
        "adapt_calls": sum(r.adapted for r in records),
        "mean_ssim": float(np.mean(ssims)),
        "mean_psnr": float(np.mean([r.psnr for r in records])),
        "mean_boundary": float(np.mean([r.boundary for r in records])),
        "frechet": fvd,
        "mean_predict_seconds": float(np.mean([r.predict_seconds for r in records])),
        "mean_adapt_seconds": float(np.mean([r.adapt_seconds for r in records])),
        "ssim_first": first,
        "ssim_last": last,
    }
    trajectory = np.stack(noise_log) if noise_log else None
    return StreamResult(records=records, summary=summary,
                        noise_trajectory=trajectory)


# -- oracle and upper bound -------------------------------------------------

def oracle_best_of_k(models, schedule: NoiseSchedule, sampler: SamplerConfig,
                     z_cond, x_target, k: int, rng):
    """Draw k fresh noises, sample k predictions, keep the one with the best
    SSIM against the (ground-truth) target."""
    if k < 1:
        raise ConfigError(f"k={k} must be >= 1")
    ae = models.autoencoder
    latent_shape = (1,) + models.dims.latent_shape
    best = None
    with ad.no_grad():
        for _ in range(k):
            eps = rng.standard_normal(latent_shape)
            z = sample(models.denoiser, schedule, sampler, z_cond,
                       Tensor(eps), rng=rng)
            x_pred = ae.decode(z).data[0]
            score = ssim(x_pred, x_target)
            if best is None or score > best[1]:
                best = (x_pred, score)
    x_best, best_ssim = best
    return x_best, {"ssim": best_ssim, "psnr": psnr(x_best, x_target), "k": k}


def autoencoder_upper_bound(models, clips) -> dict:
    """Metrics of decode(encode(x)) against x for every target clip: the
    ceiling no predictor sharing this autoencoder can beat."""
    ae, fnet = models.autoencoder, models.feature_net
    clips = [np.asarray(c) for c in clips]
    if len(clips) < 2:
        raise StreamTooShort("need at least 2 clips")
    targets = clips[1:]
    ssims, psnrs = [], []
    rec_feats, targ_feats = [], []
    with ad.no_grad():
        for x in targets:
            recon = ae.decode(ae.encode(Tensor(x[None]))).data[0]
            ssims.append(ssim(recon, x))
            psnrs.append(psnr(recon, x))
            rec_feats.append(fnet(Tensor(recon[None])).data[0])
            targ_feats.append(fnet(Tensor(x[None])).data[0])
    summary = {
        "n_steps": len(targets),
        "mean_ssim": float(np.mean(ssims)),
        "mean_psnr": float(np.mean(psnrs)),
        "per_step_ssim": ssims,
    }
    if len(targets) >= 2:
        summary["frechet"] = frechet_distance(gaussian_fit(np.stack(rec_feats)),
                                              gaussian_fit(np.stack(targ_feats)))
    return summary
