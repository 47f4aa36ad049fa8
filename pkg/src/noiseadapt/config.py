"""Plain-text key-value run configuration.

Files hold `key = value` lines (# starts a comment). Every key must be
known; the fully resolved configuration is echoed into the output directory
so each run is reproducible from its echo plus the seed.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields, replace

from .errors import ConfigError


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/out"
    model_dir: str = "runs/models"

    # diffusion schedule
    schedule_T: int = 100
    beta_start: float = 0.002
    beta_end: float = 0.1

    # sampler
    sampler_steps: int = 10
    eta: float = 0.0

    # stream variant / adaptation
    variant: str = "savi_dno_pixel_feature"
    every_k: int = 1
    warmup_steps: int = 0
    warmup_repeats: int = 1
    p: float = 0.9
    lr: float = 0.01
    lam: float = 0.002           # config key: lambda
    n_inner: int = 1
    clip_norm: float = 10.0      # <= 0 disables clipping
    log_noise: bool = False

    # evaluation stream
    stream_kind: str = "bouncing_sprites"
    stream_length: int = 300
    stream_seed: int = -1        # -1: derived from seed
    drift_clip: int = 150        # -1: no drift event
    drift_velocity_scale: float = 2.5
    drift_size_scale: float = 1.5
    drift_frequency_scale: float = 1.6
    drift_background_shift: float = 0.0

    # training
    train_streams: int = 4
    train_stream_length: int = 150
    ae_iters: int = 3000
    ae_lr: float = 0.002
    dn_iters: int = 3000
    dn_lr: float = 0.002
    batch_size: int = 8
    cond_dropout: float = 0.3

    # oracle command
    oracle_k: int = 10
    oracle_steps: int = 100

    # ablation sweeps
    ablate_seeds: int = 3
    jobs: int = 1


# config-file key -> dataclass field ("lambda" is a Python keyword)
_KEY_TO_FIELD = {f.name: f.name for f in fields(RunConfig)}
_KEY_TO_FIELD["lambda"] = "lam"
del _KEY_TO_FIELD["lam"]
_FIELD_TO_KEY = {v: k for k, v in _KEY_TO_FIELD.items()}
_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(field_name: str, raw: str):
    kind = _FIELD_TYPES[field_name]
    raw = raw.strip()
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{_FIELD_TO_KEY[field_name]}: not a boolean: {raw!r}")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{_FIELD_TO_KEY[field_name]}: bad value {raw!r}") from None
    return raw


def parse_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from None
    values = {}
    for lineno, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in text.split("=", 1))
        if key not in _KEY_TO_FIELD:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        field_name = _KEY_TO_FIELD[key]
        if field_name in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        values[field_name] = _coerce(field_name, raw)
    return RunConfig(**values)


def echo_config(cfg: RunConfig, path):
    """Write the fully resolved configuration (all defaults filled in)."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        for field_name, value in asdict(cfg).items():
            fh.write(f"{_FIELD_TO_KEY[field_name]} = {value}\n")


def with_overrides(cfg: RunConfig, **overrides) -> RunConfig:
    return replace(cfg, **overrides)
