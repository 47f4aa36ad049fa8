"""Noise schedule, DDIM sampling/inversion, and the denoiser-loss baseline.

The sampler uses the standard DDIM update: starting estimate
x0_hat = (z_t - sqrt(1-a_t) * eps_hat) / sqrt(a_t), then
z_prev = sqrt(a_prev) * x0_hat + sqrt(1 - a_prev - sigma^2) * eps_hat
       + sigma * eps_rand,
with sigma(eta) = eta * sqrt((1-a_prev)/(1-a_t)) * sqrt(1 - a_t/a_prev).
With eta = 0 the whole chain is a deterministic function of (z_cond,
eps_init). Each sampling step is wrapped as a checkpoint segment so that a
backward pass through the chain stores only per-step inputs; all randomness
(eta > 0) is drawn outside the segments and passed in explicitly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, checkpoint
from .errors import (
    DivergedTraining,
    EtaNonZero,
    InvalidRange,
    InvalidTimesteps,
    NegativeRadicand,
    ShapeMismatch,
)
from .optim import Adam


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray       # beta[t-1] is beta_t, t = 1..T
    alpha_bar: np.ndarray  # alpha_bar[t-1] = prod_{i<=t} (1 - beta_i)

    def alpha(self, t: int) -> float:
        """Cumulative alpha at timestep t, with alpha(0) = 1 (clean data)."""
        if not 0 <= t <= self.T:
            raise InvalidTimesteps(f"t={t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])


def build_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if T < 1:
        raise InvalidRange(f"T={T} must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise InvalidRange(f"need 0 < beta_start <= beta_end < 1, "
                           f"got ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T)
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(T=T, beta=beta, alpha_bar=alpha_bar)


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 10
    eta: float = 0.0

    def timesteps(self, T: int) -> list[int]:
        """Strictly increasing subsequence of 1..T ending at T."""
        if not 1 <= self.num_steps <= T:
            raise InvalidTimesteps(f"num_steps={self.num_steps} outside [1, {T}]")
        if not 0.0 <= self.eta <= 1.0:
            raise InvalidRange(f"eta={self.eta} outside [0, 1]")
        ts = [round(T * (i + 1) / self.num_steps) for i in range(self.num_steps)]
        if len(set(ts)) != len(ts) or any(t < 1 for t in ts):
            raise InvalidTimesteps(f"degenerate step subsequence {ts}")
        return ts


def ddim_sigma(schedule: NoiseSchedule, t: int, t_prev: int, eta: float) -> float:
    if not (t > t_prev >= 0) or t > schedule.T:
        raise InvalidTimesteps(f"need T >= t > t_prev >= 0, got ({t}, {t_prev})")
    if not 0.0 <= eta <= 1.0:
        raise InvalidRange(f"eta={eta} outside [0, 1]")
    if eta == 0.0:
        return 0.0
    a_t = schedule.alpha(t)
    a_prev = schedule.alpha(t_prev)
    return eta * math.sqrt((1.0 - a_prev) / (1.0 - a_t)) * math.sqrt(1.0 - a_t / a_prev)


def ddim_step(z_t, eps_hat, schedule: NoiseSchedule, t: int, t_prev: int,
              eta: float = 0.0, eps_rand=None):
    """One deterministic-or-stochastic DDIM update; differentiable in
    z_t and eps_hat. eps_rand must be supplied when sigma > 0 (randomness is
    always injected explicitly so checkpoint replay stays deterministic)."""
    z_t = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
    eps_hat = eps_hat if isinstance(eps_hat, Tensor) else Tensor(eps_hat)
    if z_t.shape != eps_hat.shape:
        raise ShapeMismatch(f"ddim_step: {z_t.shape} vs {eps_hat.shape}")
    sigma = ddim_sigma(schedule, t, t_prev, eta)
    a_t = schedule.alpha(t)
    a_prev = schedule.alpha(t_prev)
    radicand = 1.0 - a_prev - sigma * sigma
    if radicand < -1e-12:
        raise NegativeRadicand(f"1 - alpha_prev - sigma^2 = {radicand}")
    radicand = max(radicand, 0.0)
    x0_hat = (z_t - math.sqrt(1.0 - a_t) * eps_hat) * (1.0 / math.sqrt(a_t))
    out = math.sqrt(a_prev) * x0_hat + math.sqrt(radicand) * eps_hat
    if sigma > 0.0:
        if eps_rand is None:
            raise ShapeMismatch("eps_rand required when sigma > 0")
        eps_rand = eps_rand if isinstance(eps_rand, Tensor) else Tensor(eps_rand)
        if eps_rand.shape != z_t.shape:
            raise ShapeMismatch("eps_rand shape mismatch")
        out = out + sigma * eps_rand
    return out


def _step_pairs(schedule: NoiseSchedule, config: SamplerConfig) -> list[tuple[int, int]]:
    ts = config.timesteps(schedule.T)
    pairs = []
    for i in range(len(ts) - 1, -1, -1):
        t = ts[i]
        t_prev = ts[i - 1] if i > 0 else 0
        pairs.append((t, t_prev))
    return pairs


def sample(denoiser, schedule: NoiseSchedule, config: SamplerConfig,
           z_cond, eps_init, rng=None, use_checkpoint: bool = True) -> Tensor:
    """Run the DDIM chain from pure noise down to the clean-latent estimate.

    With eta = 0 the output is a deterministic function of (z_cond,
    eps_init); rng is consulted only when eta > 0.
    """
    z_cond = z_cond if isinstance(z_cond, Tensor) else Tensor(z_cond)
    z = eps_init if isinstance(eps_init, Tensor) else Tensor(eps_init)
    for t, t_prev in _step_pairs(schedule, config):
        sigma = ddim_sigma(schedule, t, t_prev, config.eta)
        if sigma > 0.0:
            if rng is None:
                raise InvalidRange("rng required for eta > 0 sampling")
            eps_rand = Tensor(rng.standard_normal(z.shape))
        else:
            eps_rand = None

        def step_fn(z_in, cond_in, *rand, _t=t, _tp=t_prev):
            eps_hat = denoiser(z_in, _t, cond_in)
            return ddim_step(z_in, eps_hat, schedule, _t, _tp, config.eta,
                             rand[0] if rand else None)

        args = (z, z_cond) + ((eps_rand,) if eps_rand is not None else ())
        if use_checkpoint:
            z = checkpoint(step_fn, *args)
        else:
            z = step_fn(*args)
    return z


def ddim_invert(denoiser, schedule: NoiseSchedule, config: SamplerConfig,
                z_cond, z_target, n_refine: int = 4) -> Tensor:
    """DDIM inversion: run the update reversed (t_prev -> t) to recover an
    approximate timestep-T noise for z_target. Requires eta = 0.

    The forward step evaluates the noise estimate at the noisier latent, so
    the exact inverse is a fixed-point problem in that latent; each reversed
    step runs n_refine extra re-evaluations of the noise estimate at the
    current solution, which shrinks the round-trip error by roughly an order
    of magnitude per refinement. n_refine = 0 gives the plain first-order
    inversion."""
    if config.eta != 0.0:
        raise EtaNonZero("DDIM inversion requires eta = 0")
    if n_refine < 0:
        raise InvalidRange(f"n_refine={n_refine} must be >= 0")
    z_cond = z_cond if isinstance(z_cond, Tensor) else Tensor(z_cond)
    z = z_target if isinstance(z_target, Tensor) else Tensor(z_target)
    with ad.no_grad():
        for t, t_prev in reversed(_step_pairs(schedule, config)):
            a_t = schedule.alpha(t)
            a_prev = schedule.alpha(t_prev)
            z_prev, z_t = z, z
            for _ in range(n_refine + 1):
                eps_hat = denoiser(z_t, t, z_cond)
                x0_hat = (z_prev - math.sqrt(1.0 - a_prev) * eps_hat) \
                    * (1.0 / math.sqrt(a_prev))
                z_t = math.sqrt(a_t) * x0_hat + math.sqrt(1.0 - a_t) * eps_hat
            z = z_t
    return z


def ddpm_training_loss(denoiser, schedule: NoiseSchedule, z_future, z_cond,
                       rng, t: int | None = None, eps: np.ndarray | None = None) -> Tensor:
    """Noise-prediction MSE at a uniformly drawn timestep.

    t and eps may be pinned for tests; by default both are drawn from rng.
    """
    z_future = z_future if isinstance(z_future, Tensor) else Tensor(z_future)
    z_cond = z_cond if isinstance(z_cond, Tensor) else Tensor(z_cond)
    if z_future.shape != z_cond.shape:
        raise ShapeMismatch(f"latent shapes {z_future.shape} vs {z_cond.shape}")
    if t is None:
        t = int(rng.integers(1, schedule.T + 1))
    if eps is None:
        eps = rng.standard_normal(z_future.shape)
    a_bar = schedule.alpha(int(t))
    z_t = math.sqrt(a_bar) * z_future + math.sqrt(1.0 - a_bar) * Tensor(eps)
    pred = denoiser(z_t, int(t), z_cond)
    return ad.tmean(ad.square(pred - Tensor(eps)))


def finetune_step(denoiser, schedule: NoiseSchedule, z_future, z_cond,
                  n_inner: int, lr: float, rng, optimizer: Adam | None = None):
    """Weight-fine-tuning baseline: n_inner denoiser-loss gradient steps on a
    copy of the denoiser parameters. Returns the updated denoiser. Mutually
    exclusive with noise optimization within a run."""
    if n_inner < 1:
        raise InvalidRange(f"n_inner={n_inner} must be >= 1")
    denoiser.set_trainable(True)
    opt = optimizer if optimizer is not None else Adam(denoiser.params, lr)
    try:
        for _ in range(n_inner):
            loss = ddpm_training_loss(denoiser, schedule, z_future, z_cond, rng)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            if not math.isfinite(loss.item()):
                raise DivergedTraining("fine-tune loss is non-finite")
    finally:
        denoiser.set_trainable(False)
    return denoiser
