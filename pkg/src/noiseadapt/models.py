"""The three toy networks: autoencoder (encoder/decoder), conditional
denoiser, and a frozen random feature network.

Pixel clips are (N, S, H, W) with S frames as channels (grayscale); latents
are (N, C_lat, h, w) where C_lat folds per-frame latent channels and frames
together. All networks are pure functions of (params, inputs).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import load_param_dict, save_param_dict
from .errors import DivergedTraining, NonFiniteValue, ShapeMismatch, TimestepOutOfRange
from .optim import Adam


@dataclass(frozen=True)
class ModelDims:
    frame_size: int = 32
    clip_len: int = 4
    latent_size: int = 4
    latent_channels_per_frame: int = 2
    feature_dim: int = 32

    @property
    def latent_channels(self) -> int:
        return self.clip_len * self.latent_channels_per_frame

    @property
    def pixel_shape(self) -> tuple:
        return (self.clip_len, self.frame_size, self.frame_size)

    @property
    def latent_shape(self) -> tuple:
        return (self.latent_channels, self.latent_size, self.latent_size)


def _conv_params(rng, out_ch, in_ch, k, gain=1.0):
    fan_in = in_ch * k * k
    w = rng.standard_normal((out_ch, in_ch, k, k)) * gain * math.sqrt(2.0 / fan_in)
    b = np.zeros(out_ch)
    return w, b


def _as_batch(x, expected_tail, what: str) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.ndim == len(expected_tail):
        t = ad.reshape(t, (1,) + tuple(t.shape))
    if t.ndim != len(expected_tail) + 1 or t.shape[1:] != expected_tail:
        raise ShapeMismatch(f"{what}: got {t.shape}, expected (N,)+{expected_tail}")
    return t


class _Net:
    """Shared param-dict plumbing."""

    def __init__(self, params: dict[str, Tensor], dims: ModelDims):
        self.params = params
        self.dims = dims

    def set_trainable(self, flag: bool):
        for p in self.params.values():
            p.requires_grad = bool(flag)
            p.grad = None

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.params):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return digest.hexdigest()

    def save(self, dirpath):
        save_param_dict(dirpath, self.param_arrays())

    @classmethod
    def _load_params(cls, dirpath) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in load_param_dict(dirpath).items()}

    def copy(self):
        clone = object.__new__(type(self))
        clone.params = {k: Tensor(p.data.copy()) for k, p in self.params.items()}
        clone.dims = self.dims
        for extra in ("t_max",):
            if hasattr(self, extra):
                setattr(clone, extra, getattr(self, extra))
        return clone


class Autoencoder(_Net):
    """Strided conv encoder 32 -> 4 and upsampling conv decoder 4 -> 32.

    The decoder ends in a sigmoid, which keeps outputs inside [0, 1] while
    staying differentiable everywhere (a hard clamp would zero the gradient
    at the rails and break the finite-difference oracle).
    """

    @classmethod
    def init(cls, rng, dims: ModelDims = ModelDims()) -> "Autoencoder":
        s = dims.clip_len
        c = dims.latent_channels
        p = {}
        for name, (co, ci, gain) in {
            "e0": (24, s, 1.0), "e1": (48, 24, 1.0), "e2": (48, 48, 1.0),
            "e3": (c, 48, 1.0),
            "d0": (48, c, 1.0), "d1": (48, 48, 1.0), "d2": (32, 48, 1.0),
            "d3": (24, 32, 1.0), "d4": (s, 24, 1.0),
        }.items():
            w, b = _conv_params(rng, co, ci, 3, gain)
            p[name + "_w"] = Tensor(w)
            p[name + "_b"] = Tensor(b)
        return cls(p, dims)

    @classmethod
    def load(cls, dirpath, dims: ModelDims = ModelDims()) -> "Autoencoder":
        return cls(cls._load_params(dirpath), dims)

    def encode(self, x) -> Tensor:
        x = _as_batch(x, self.dims.pixel_shape, "encode")
        p = self.params
        h = ad.silu(ad.conv2d(x, p["e0_w"], p["e0_b"], stride=2, pad=1))
        h = ad.silu(ad.conv2d(h, p["e1_w"], p["e1_b"], stride=2, pad=1))
        h = ad.silu(ad.conv2d(h, p["e2_w"], p["e2_b"], stride=2, pad=1))
        return ad.conv2d(h, p["e3_w"], p["e3_b"], stride=1, pad=1)

    def decode(self, z) -> Tensor:
        z = _as_batch(z, self.dims.latent_shape, "decode")
        p = self.params
        h = ad.silu(ad.conv2d(z, p["d0_w"], p["d0_b"], stride=1, pad=1))
        h = ad.upsample_nearest(h, 2)
        h = ad.silu(ad.conv2d(h, p["d1_w"], p["d1_b"], stride=1, pad=1))
        h = ad.upsample_nearest(h, 2)
        h = ad.silu(ad.conv2d(h, p["d2_w"], p["d2_b"], stride=1, pad=1))
        h = ad.upsample_nearest(h, 2)
        h = ad.silu(ad.conv2d(h, p["d3_w"], p["d3_b"], stride=1, pad=1))
        return ad.sigmoid(ad.conv2d(h, p["d4_w"], p["d4_b"], stride=1, pad=1))


def timestep_embedding(t: int, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


class Denoiser(_Net):
    """Small conv net predicting the noise component of a noisy latent,
    conditioned on the previous clip's latent (channel concat) and a
    sinusoidal timestep embedding added as a per-channel bias."""

    EMB_DIM = 32
    HIDDEN = 64

    def __init__(self, params, dims, t_max: int = 100):
        super().__init__(params, dims)
        self.t_max = t_max

    @classmethod
    def init(cls, rng, dims: ModelDims = ModelDims(), t_max: int = 100) -> "Denoiser":
        c = dims.latent_channels
        h = cls.HIDDEN
        p = {}
        for name, (co, ci, gain) in {
            "c0": (h, 2 * c, 1.0), "c1": (h, h, 1.0), "c2": (c, h, 0.1),
        }.items():
            w, b = _conv_params(rng, co, ci, 3, gain)
            p[name + "_w"] = Tensor(w)
            p[name + "_b"] = Tensor(b)
        p["t_w"] = Tensor(rng.standard_normal((cls.EMB_DIM, h)) * (1.0 / math.sqrt(cls.EMB_DIM)))
        p["t_b"] = Tensor(np.zeros(h))
        return cls(p, dims, t_max)

    @classmethod
    def load(cls, dirpath, dims: ModelDims = ModelDims(), t_max: int = 100) -> "Denoiser":
        return cls(cls._load_params(dirpath), dims, t_max)

    def __call__(self, z_t, t: int, z_cond) -> Tensor:
        if not 1 <= int(t) <= self.t_max:
            raise TimestepOutOfRange(f"t={t} outside [1, {self.t_max}]")
        z_t = _as_batch(z_t, self.dims.latent_shape, "denoise z_t")
        z_cond = _as_batch(z_cond, self.dims.latent_shape, "denoise z_cond")
        if z_t.shape[0] != z_cond.shape[0]:
            raise ShapeMismatch("denoise: batch sizes differ")
        p = self.params
        h = ad.concat([z_t, z_cond], axis=1)
        h = ad.silu(ad.conv2d(h, p["c0_w"], p["c0_b"], stride=1, pad=1))
        emb = Tensor(timestep_embedding(int(t), self.EMB_DIM).reshape(1, -1))
        tb = ad.matmul(emb, p["t_w"]) + ad.reshape(p["t_b"], (1, self.HIDDEN))
        h = h + ad.reshape(tb, (1, self.HIDDEN, 1, 1))
        h = ad.silu(ad.conv2d(h, p["c1_w"], p["c1_b"], stride=1, pad=1))
        return ad.conv2d(h, p["c2_w"], p["c2_b"], stride=1, pad=1)


class FeatureNet(_Net):
    """Fixed randomly-initialized spatiotemporal conv net mapping a pixel
    clip to a flat feature vector. Weights never train; the checksum guards
    against accidental mutation."""

    @classmethod
    def init(cls, rng, dims: ModelDims = ModelDims()) -> "FeatureNet":
        s = dims.clip_len
        p = {}
        for name, (co, ci) in {"f0": (8, s), "f1": (16, 8), "f2": (16, 16)}.items():
            w, b = _conv_params(rng, co, ci, 3)
            b = rng.standard_normal(co) * 0.1
            p[name + "_w"] = Tensor(w)
            p[name + "_b"] = Tensor(b)
        flat = 16 * (dims.frame_size // 8) ** 2
        # output scale chosen so the squared feature distance is comparable
        # to the pixel loss divided by its default weight
        p["fc_w"] = Tensor(rng.standard_normal((flat, dims.feature_dim))
                           * (40.0 / math.sqrt(flat)))
        return cls(p, dims)

    @classmethod
    def load(cls, dirpath, dims: ModelDims = ModelDims()) -> "FeatureNet":
        return cls(cls._load_params(dirpath), dims)

    def __call__(self, x) -> Tensor:
        x = _as_batch(x, self.dims.pixel_shape, "features")
        p = self.params
        h = ad.silu(ad.conv2d(x, p["f0_w"], p["f0_b"], stride=2, pad=1))
        h = ad.silu(ad.conv2d(h, p["f1_w"], p["f1_b"], stride=2, pad=1))
        h = ad.silu(ad.conv2d(h, p["f2_w"], p["f2_b"], stride=2, pad=1))
        n = h.shape[0]
        h = ad.reshape(h, (n, h.shape[1] * h.shape[2] * h.shape[3]))
        return ad.matmul(h, p["fc_w"])


@dataclass
class ModelBundle:
    autoencoder: Autoencoder
    denoiser: Denoiser
    feature_net: FeatureNet

    @property
    def dims(self) -> ModelDims:
        return self.autoencoder.dims


# -- training ---------------------------------------------------------------

def train_autoencoder(model: Autoencoder, clips: np.ndarray, iters: int,
                      lr: float, batch_size: int, rng) -> list[float]:
    """L1 reconstruction training; returns the per-iteration loss curve."""
    if iters == 0:
        return []
    model.set_trainable(True)
    opt = Adam(model.params, lr)
    history = []
    try:
        for _ in range(iters):
            idx = rng.integers(0, len(clips), size=batch_size)
            x = Tensor(clips[idx])
            recon = model.decode(model.encode(x))
            loss = ad.tmean(ad.tabs(recon - x))
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            history.append(loss.item())
    except NonFiniteValue as e:
        raise DivergedTraining(str(e)) from None
    finally:
        model.set_trainable(False)
    return history


def reconstruction_l1(model: Autoencoder, clips: np.ndarray) -> float:
    with ad.no_grad():
        total = 0.0
        for i in range(0, len(clips), 16):
            x = Tensor(clips[i:i + 16])
            recon = model.decode(model.encode(x))
            total += float(np.abs(recon.data - x.data).mean()) * len(clips[i:i + 16])
    return total / len(clips)


def _encode_all(autoencoder: Autoencoder, clips: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        return np.concatenate([
            autoencoder.encode(Tensor(clips[i:i + 16])).data
            for i in range(0, len(clips), 16)])


def train_denoiser(model: Denoiser, autoencoder: Autoencoder, streams,
                   schedule, iters: int, lr: float, batch_size: int,
                   cond_dropout: float, rng) -> list[float]:
    """Noise-prediction training on consecutive latent pairs.

    streams is a list of continuous clip arrays; pairs are formed within
    each stream only. Condition dropout zeroes the conditioning latent per
    sample (trained in, but no guidance is applied at inference).
    """
    if iters == 0:
        return []
    if isinstance(streams, np.ndarray):
        streams = [streams]
    conds, futures = [], []
    for clips in streams:
        latents = _encode_all(autoencoder, np.asarray(clips))
        conds.append(latents[:-1])
        futures.append(latents[1:])
    z_cond_all = np.concatenate(conds)
    z_future_all = np.concatenate(futures)
    model.set_trainable(True)
    opt = Adam(model.params, lr)
    history = []
    try:
        for _ in range(iters):
            idx = rng.integers(0, len(z_cond_all), size=batch_size)
            t = int(rng.integers(1, schedule.T + 1))
            eps = rng.standard_normal(z_future_all[idx].shape)
            keep = (rng.random(batch_size) >= cond_dropout).astype(np.float64)
            a_bar = schedule.alpha(t)
            z_t = math.sqrt(a_bar) * z_future_all[idx] + math.sqrt(1.0 - a_bar) * eps
            z_cond = z_cond_all[idx] * keep[:, None, None, None]
            pred = model(Tensor(z_t), t, Tensor(z_cond))
            loss = ad.tmean(ad.square(pred - Tensor(eps)))
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            history.append(loss.item())
    except NonFiniteValue as e:
        raise DivergedTraining(str(e)) from None
    finally:
        model.set_trainable(False)
    return history
