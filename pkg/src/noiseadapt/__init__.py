"""Sequence-adaptive video prediction by optimizing diffusion sampling noise
against a continuously observed stream. Everything runs on float64 numpy via
a small built-in reverse-mode autodiff engine."""

__version__ = "0.1.0"

from .config import RunConfig, parse_config
from .diffusion import NoiseSchedule, SamplerConfig, build_schedule
from .errors import NoiseAdaptError
from .models import Autoencoder, Denoiser, FeatureNet, ModelBundle, ModelDims
from .noiseopt import NoiseState, OptimConfig
from .stream import VARIANTS, StreamConfig, run_stream

__all__ = [
    "RunConfig", "parse_config", "NoiseSchedule", "SamplerConfig",
    "build_schedule", "NoiseAdaptError", "Autoencoder", "Denoiser",
    "FeatureNet", "ModelBundle", "ModelDims", "NoiseState", "OptimConfig",
    "VARIANTS", "StreamConfig", "run_stream", "__version__",
]
