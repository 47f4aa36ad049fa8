"""Sampling-noise optimization: prediction losses, the variance-preserving
noise interpolation, and the persistent per-stream Adam update on the noise.

The noise being optimized lives in a NoiseState together with its Adam
moments; the moments persist across the whole stream rather than resetting
per observation, so a single continuing optimizer tracks the slowly moving
objective.

The predict phase and the adapt phase are split so a streaming harness can
finalize the prediction before the observation is read; predict_and_adapt
composes the two for the common case.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .diffusion import NoiseSchedule, SamplerConfig, sample
from .errors import (
    EtaNonZero,
    ModeMismatch,
    NonFiniteGradient,
    POutOfRange,
    ShapeMismatch,
)

MODE_PIXEL = "pixel"
MODE_PIXEL_FEATURE = "pixel_feature"
MODE_LATENT = "latent"
MODES = (MODE_PIXEL, MODE_PIXEL_FEATURE, MODE_LATENT)


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.01
    lam: float = 0.002        # feature-loss weight
    p: float = 0.9            # optimized-vs-fresh noise interpolation
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float | None = 10.0  # global L2 gradient cap; None disables

    def validate(self):
        if not 0.0 <= self.p <= 1.0:
            raise POutOfRange(f"p={self.p} outside [0, 1]")
        if self.lr <= 0 or self.lam < 0:
            raise POutOfRange("need lr > 0 and lambda >= 0")


@dataclass(frozen=True)
class NoiseState:
    eps: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray
    step_count: int = 0

    @classmethod
    def init(cls, rng, shape) -> "NoiseState":
        eps = rng.standard_normal(shape)
        return cls(eps=eps, adam_m=np.zeros(shape), adam_v=np.zeros(shape))


@dataclass(frozen=True)
class LossBreakdown:
    pixel: float = 0.0
    feature: float = 0.0
    latent: float = 0.0
    total: float = 0.0


# -- loss functions ---------------------------------------------------------

def _pair(a, b, what):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{what}: {a.shape} vs {b.shape}")
    return a, b


def loss_pixel(x_obs, x_pred) -> Tensor:
    """Mean absolute pixel error (L1 normalized by the pixel count)."""
    x_obs, x_pred = _pair(x_obs, x_pred, "loss_pixel")
    return ad.tmean(ad.tabs(x_obs - x_pred))


def loss_feature(x_obs, x_pred, feature_net) -> Tensor:
    """Mean squared distance between frozen-network feature vectors."""
    x_obs, x_pred = _pair(x_obs, x_pred, "loss_feature")
    return ad.tmean(ad.square(feature_net(x_obs) - feature_net(x_pred)))


def loss_latent(z_obs, z_pred) -> Tensor:
    """Mean absolute latent error (L1 normalized by the latent dimension)."""
    z_obs, z_pred = _pair(z_obs, z_pred, "loss_latent")
    return ad.tmean(ad.tabs(z_obs - z_pred))


def total_loss(x_obs, x_pred, config: OptimConfig, feature_net=None,
               mode: str = MODE_PIXEL_FEATURE) -> tuple[Tensor, LossBreakdown]:
    """Combined objective; in latent mode the inputs are latents."""
    if mode not in MODES:
        raise ModeMismatch(f"unknown mode {mode!r}")
    if mode == MODE_LATENT:
        lat = loss_latent(x_obs, x_pred)
        return lat, LossBreakdown(latent=lat.item(), total=lat.item())
    pix = loss_pixel(x_obs, x_pred)
    if mode == MODE_PIXEL:
        return pix, LossBreakdown(pixel=pix.item(), total=pix.item())
    if feature_net is None:
        raise ModeMismatch("pixel_feature mode needs a feature network")
    if config.lam == 0.0:
        # bitwise-identical to pixel mode when the weight is zero
        return pix, LossBreakdown(pixel=pix.item(), total=pix.item())
    feat = loss_feature(x_obs, x_pred, feature_net)
    tot = pix + config.lam * feat
    return tot, LossBreakdown(pixel=pix.item(), feature=feat.item(), total=tot.item())


# -- noise interpolation ----------------------------------------------------

def interpolate_noise(p: float, eps_opt, eps_fresh):
    """(p * eps_opt + (1-p) * eps_fresh) / sqrt(p^2 + (1-p)^2).

    Variance preserving for independent standard-normal inputs; p = 1
    returns the optimized noise bitwise, p = 0 the fresh noise bitwise.
    """
    if not 0.0 <= p <= 1.0:
        raise POutOfRange(f"p={p} outside [0, 1]")
    eps_opt, eps_fresh = _pair(eps_opt, eps_fresh, "interpolate_noise")
    norm = math.sqrt(p * p + (1.0 - p) * (1.0 - p))
    return (p * eps_opt + (1.0 - p) * eps_fresh) * (1.0 / norm)


# -- the noise update -------------------------------------------------------

def optimize_noise_step(state: NoiseState, grad: np.ndarray,
                        config: OptimConfig) -> NoiseState:
    """One Adam update (bias-corrected) applied to the noise."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.eps.shape:
        raise ShapeMismatch(f"grad shape {grad.shape} vs eps {state.eps.shape}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient("noise gradient has NaN/Inf")
    if config.clip_norm is not None:
        norm = float(np.sqrt(np.sum(grad * grad)))
        if norm > config.clip_norm:
            grad = grad * (config.clip_norm / norm)
    t = state.step_count + 1
    m = config.adam_beta1 * state.adam_m + (1.0 - config.adam_beta1) * grad
    v = config.adam_beta2 * state.adam_v + (1.0 - config.adam_beta2) * grad * grad
    m_hat = m / (1.0 - config.adam_beta1 ** t)
    v_hat = v / (1.0 - config.adam_beta2 ** t)
    eps = state.eps - config.lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    return NoiseState(eps=eps, adam_m=m, adam_v=v, step_count=t)


# -- two-phase prediction / adaptation --------------------------------------

@dataclass
class PredictionGraph:
    """A finished prediction plus the live tape needed to adapt the noise."""
    x_pred: np.ndarray          # pixel clip (S, H, W), detached
    z_pred: Tensor              # predicted latent (1, C, h, w)
    x_pred_tensor: Tensor | None  # decoded pixels on the tape (pixel modes)
    eps_leaf: Tensor
    eps_fresh: np.ndarray
    mode: str


def predict_with_noise(models, schedule: NoiseSchedule, sampler: SamplerConfig,
                       z_cond, state: NoiseState, config: OptimConfig, rng,
                       mode: str = MODE_PIXEL_FEATURE,
                       eps_fresh: np.ndarray | None = None) -> PredictionGraph:
    """Sample a prediction from h(p, optimized, fresh) with the tape alive."""
    config.validate()
    if mode not in MODES:
        raise ModeMismatch(f"unknown mode {mode!r}")
    if sampler.eta != 0.0:
        raise EtaNonZero("noise optimization requires deterministic sampling")
    if eps_fresh is None:
        eps_fresh = rng.standard_normal(state.eps.shape)

    eps_leaf = Tensor(state.eps, requires_grad=True)
    eps_used = interpolate_noise(config.p, eps_leaf, Tensor(eps_fresh))
    z_pred = sample(models.denoiser, schedule, sampler, z_cond, eps_used)
    if mode == MODE_LATENT:
        with ad.no_grad():
            x_pred = models.autoencoder.decode(z_pred.detach()).data[0]
        x_pred_tensor = None
    else:
        x_pred_tensor = models.autoencoder.decode(z_pred)
        x_pred = x_pred_tensor.data[0]
    return PredictionGraph(x_pred=x_pred, z_pred=z_pred,
                           x_pred_tensor=x_pred_tensor, eps_leaf=eps_leaf,
                           eps_fresh=np.asarray(eps_fresh), mode=mode)


def adapt_from_graph(graph: PredictionGraph, models, x_next_obs,
                     state: NoiseState, config: OptimConfig
                     ) -> tuple[NoiseState, LossBreakdown]:
    """Score the finished prediction against the observation and take one
    noise-optimization step; consumes the graph's tape."""
    if graph.mode == MODE_LATENT:
        with ad.no_grad():
            z_obs = models.autoencoder.encode(Tensor(np.asarray(x_next_obs)[None]))
        total, breakdown = total_loss(z_obs.detach(), graph.z_pred, config,
                                      mode=graph.mode)
    else:
        obs = Tensor(np.asarray(x_next_obs)[None])
        total, breakdown = total_loss(obs, graph.x_pred_tensor, config,
                                      feature_net=models.feature_net,
                                      mode=graph.mode)
    ad.backward(total)
    grad = graph.eps_leaf.grad
    if grad is None:
        grad = np.zeros_like(state.eps)
    new_state = optimize_noise_step(state, grad, config)
    return new_state, breakdown


def predict_and_adapt(models, schedule: NoiseSchedule, sampler: SamplerConfig,
                      z_cond, x_next_obs, state: NoiseState,
                      config: OptimConfig, rng, mode: str = MODE_PIXEL_FEATURE,
                      eps_fresh: np.ndarray | None = None):
    """Predict the next clip, then use the arriving observation for one
    noise-optimization step. Returns (x_pred, new_state, breakdown); the
    returned prediction is the one made before the observation was seen. The
    gradient reaches the optimized noise through the interpolation (the
    fresh noise is a constant)."""
    graph = predict_with_noise(models, schedule, sampler, z_cond, state,
                               config, rng, mode, eps_fresh)
    new_state, breakdown = adapt_from_graph(graph, models, x_next_obs, state, config)
    return graph.x_pred, new_state, breakdown
