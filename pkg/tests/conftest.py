import hashlib
import os

import numpy as np
import pytest

from noiseadapt.cli import cmd_train, load_bundle
from noiseadapt.config import RunConfig
from noiseadapt.diffusion import build_schedule
from noiseadapt.models import (
    Autoencoder,
    Denoiser,
    FeatureNet,
    ModelBundle,
    ModelDims,
)

CACHE_ROOT = os.path.join(os.path.dirname(__file__), "_model_cache")

# fields that determine the trained weights; changing any of these
# invalidates the on-disk cache
_TRAIN_KEYS = ("seed", "schedule_T", "beta_start", "beta_end", "stream_kind",
               "train_streams", "train_stream_length", "ae_iters", "ae_lr",
               "dn_iters", "dn_lr", "batch_size", "cond_dropout")


def _base_config() -> RunConfig:
    return RunConfig()


def _cache_key(cfg: RunConfig) -> str:
    blob = ",".join(f"{k}={getattr(cfg, k)}" for k in _TRAIN_KEYS)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@pytest.fixture(scope="session")
def run_config() -> RunConfig:
    cfg = _base_config()
    root = os.path.join(CACHE_ROOT, _cache_key(cfg))
    return RunConfig(model_dir=os.path.join(root, "models"),
                     out_dir=os.path.join(root, "train_out"))


@pytest.fixture(scope="session")
def models(run_config) -> ModelBundle:
    """Trained toy models, cached on disk across test sessions."""
    meta = os.path.join(run_config.model_dir, "train_meta.txt")
    if not os.path.exists(meta):
        cmd_train(run_config)
    return load_bundle(run_config)


@pytest.fixture(scope="session")
def schedule(run_config):
    return build_schedule(run_config.schedule_T, run_config.beta_start,
                          run_config.beta_end)


# small untrained networks for mechanics tests (gradients, shapes, sampling
# plumbing); quality does not matter here, size does
@pytest.fixture(scope="session")
def tiny_dims() -> ModelDims:
    return ModelDims(frame_size=16, latent_size=2)


@pytest.fixture(scope="session")
def tiny_models(tiny_dims) -> ModelBundle:
    rng = np.random.default_rng(7)
    return ModelBundle(autoencoder=Autoencoder.init(rng, tiny_dims),
                       denoiser=Denoiser.init(rng, tiny_dims, t_max=10),
                       feature_net=FeatureNet.init(rng, tiny_dims))


@pytest.fixture(scope="session")
def tiny_schedule():
    return build_schedule(10, 0.02, 0.2)
