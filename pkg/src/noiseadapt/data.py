"""Synthetic clip streams, the binary tensor container, and CSV emission.

Clips are float64 arrays of shape (S, H, W) with values in [0, 1]; frame
index runs along axis 0 (grayscale, one channel). Two generators are
provided: bouncing sprites (structured object motion) and a drifting
sinusoidal texture (slow global change). Both are pure functions of their
StreamSpec and keep the underlying dynamics continuous across clip
boundaries, so frame S of clip i immediately precedes frame 1 of clip i+1.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import BadMagic, EmptyRecords, InvalidSpec, IoError, ShapeOverflow

# -- stream specification ---------------------------------------------------

GENERATOR_KINDS = ("bouncing_sprites", "drifting_texture")


@dataclass(frozen=True)
class DriftEvent:
    """A change of dynamics parameters applied from a given clip onward."""
    clip_index: int
    velocity_scale: float = 1.0     # sprites: multiplies sprite velocities
    size_scale: float = 1.0         # sprites: multiplies sprite radii
    background_shift: float = 0.0   # added to the background level
    frequency_scale: float = 1.0    # texture: multiplies the wave vector
    direction_delta: float = 0.0    # texture: rotates the wave vector (radians)


@dataclass(frozen=True)
class StreamSpec:
    kind: str = "bouncing_sprites"
    length: int = 300
    seed: int = 0
    frame_size: int = 32
    clip_len: int = 4
    drift: tuple[DriftEvent, ...] = field(default_factory=tuple)
    speed: float = 1.2              # base sprite speed, pixels per frame

    def validate(self):
        if self.kind not in GENERATOR_KINDS:
            raise InvalidSpec(f"unknown generator kind {self.kind!r}")
        if self.length < 1 or self.frame_size < 8 or self.clip_len < 1:
            raise InvalidSpec("length/frame_size/clip_len out of range")
        if self.speed < 0:
            raise InvalidSpec("speed must be >= 0")
        idx = [e.clip_index for e in self.drift]
        if idx != sorted(idx) or len(set(idx)) != len(idx):
            raise InvalidSpec("drift indices must be strictly increasing")
        if idx and (idx[0] < 0 or idx[-1] >= self.length):
            raise InvalidSpec("drift index outside stream length")


def default_stream_spec(seed: int = 0, kind: str = "bouncing_sprites",
                        length: int = 300, drift_clip: int = 150,
                        velocity_scale: float = 2.5, size_scale: float = 1.5,
                        frequency_scale: float = 1.6,
                        background_shift: float = 0.0) -> StreamSpec:
    """The default evaluation stream: one drift event halfway through."""
    events = ()
    if 0 <= drift_clip < length:
        events = (DriftEvent(clip_index=drift_clip,
                             velocity_scale=velocity_scale,
                             size_scale=size_scale,
                             background_shift=background_shift,
                             frequency_scale=frequency_scale,
                             direction_delta=0.5),)
    return StreamSpec(kind=kind, length=length, seed=seed, drift=events)


# -- bouncing sprites -------------------------------------------------------

class _Sprite:
    def __init__(self, x, y, vx, vy, radius, value, square):
        self.x, self.y = x, y
        self.vx, self.vy = vx, vy
        self.radius = radius
        self.value = value
        self.square = square


def _render_sprites(sprites, size, background, edge=1.0):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    frame = np.full((size, size), background)
    for s in sprites:
        if s.square:
            d = np.maximum(np.abs(xx - s.x), np.abs(yy - s.y))
        else:
            d = np.hypot(xx - s.x, yy - s.y)
        mask = 1.0 / (1.0 + np.exp((d - s.radius) / edge))
        frame = frame * (1.0 - mask) + s.value * mask
    return np.clip(frame, 0.0, 1.0)


def _bounce(s: _Sprite, size: int):
    s.x += s.vx
    s.y += s.vy
    lo, hi = s.radius, size - 1 - s.radius
    if s.x < lo:
        s.x = 2 * lo - s.x
        s.vx = -s.vx
    elif s.x > hi:
        s.x = 2 * hi - s.x
        s.vx = -s.vx
    if s.y < lo:
        s.y = 2 * lo - s.y
        s.vy = -s.vy
    elif s.y > hi:
        s.y = 2 * hi - s.y
        s.vy = -s.vy


def _gen_sprites(spec: StreamSpec):
    rng = np.random.default_rng(spec.seed)
    size = spec.frame_size
    background = 0.08
    sprites = []
    for i, square in enumerate((False, True)):
        angle = rng.uniform(0, 2 * math.pi)
        speed = spec.speed * rng.uniform(0.8, 1.2)
        radius = rng.uniform(4.0, 5.5)
        sprites.append(_Sprite(
            x=rng.uniform(radius + 1, size - radius - 2),
            y=rng.uniform(radius + 1, size - radius - 2),
            vx=speed * math.cos(angle), vy=speed * math.sin(angle),
            radius=radius, value=0.95 - 0.3 * i, square=square))
    events = {e.clip_index: e for e in spec.drift}
    for clip_idx in range(spec.length):
        ev = events.get(clip_idx)
        if ev is not None:
            background = float(np.clip(background + ev.background_shift, 0.0, 0.6))
            for s in sprites:
                s.vx *= ev.velocity_scale
                s.vy *= ev.velocity_scale
                s.radius = float(np.clip(s.radius * ev.size_scale, 2.0, size / 3))
        frames = np.empty((spec.clip_len, size, size))
        for f in range(spec.clip_len):
            frames[f] = _render_sprites(sprites, size, background)
            for s in sprites:
                _bounce(s, size)
        yield frames


# -- drifting texture -------------------------------------------------------

def _gen_texture(spec: StreamSpec):
    rng = np.random.default_rng(spec.seed)
    size = spec.frame_size
    freq = rng.uniform(0.8, 1.2) * 2.0 / size
    theta = rng.uniform(0, 2 * math.pi)
    omega = rng.uniform(0.15, 0.3)
    phase = rng.uniform(0, 2 * math.pi)
    level_shift = 0.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    events = {e.clip_index: e for e in spec.drift}
    t = 0
    for clip_idx in range(spec.length):
        ev = events.get(clip_idx)
        if ev is not None:
            freq *= ev.frequency_scale
            theta += ev.direction_delta
            level_shift += ev.background_shift
        kx = 2 * math.pi * freq * math.cos(theta)
        ky = 2 * math.pi * freq * math.sin(theta)
        frames = np.empty((spec.clip_len, size, size))
        for f in range(spec.clip_len):
            wave = np.sin(kx * xx + ky * yy + omega * t + phase)
            second = np.sin(0.5 * (ky * xx - kx * yy) - 0.7 * omega * t)
            frames[f] = np.clip(0.5 + level_shift + 0.32 * wave + 0.12 * second,
                                0.0, 1.0)
            t += 1
        yield frames


def generate_stream(spec: StreamSpec):
    """Yield the clips of a stream; deterministic given the spec."""
    spec.validate()
    if spec.kind == "bouncing_sprites":
        yield from _gen_sprites(spec)
    else:
        yield from _gen_texture(spec)


def stream_clips(spec: StreamSpec) -> np.ndarray:
    """Materialize the whole stream as an array of shape (N, S, H, W)."""
    return np.stack(list(generate_stream(spec)))


def sprite_motion_bound(spec: StreamSpec) -> float:
    """Upper bound on mean per-pixel change across one frame step.

    A sprite moving v pixels changes at most ~2 * area_fraction * v of the
    image mass; summed over sprites with maximum speed and radius.
    """
    size = spec.frame_size
    max_radius = 5.5
    scale = 1.0
    for e in spec.drift:
        scale *= e.velocity_scale
        max_radius *= max(1.0, e.size_scale)
    max_speed = spec.speed * 1.2 * max(scale, 1.0)
    # generous area including the soft edge
    area_frac = 2 * (math.pi * (max_radius + 2.5) ** 2) / (size * size)
    return 2.0 * max_speed * area_frac


# -- binary tensor container ------------------------------------------------

_MAGIC = b"NFT1"
_DTYPE_F64 = 1
_MAX_DIM = 2 ** 32


def write_tensor(path, array: np.ndarray):
    """Write a float64 tensor: magic, dtype code, rank, shape, LE payload."""
    # np.ascontiguousarray would promote rank-0 arrays to rank 1
    arr = np.asarray(array, dtype=np.float64)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = arr.copy(order="C")
    if any(d >= _MAX_DIM for d in arr.shape):
        raise ShapeOverflow(f"dimension too large in shape {arr.shape}")
    header = _MAGIC + struct.pack("<BB", _DTYPE_F64, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(arr.astype("<f8").tobytes())
    except OSError as e:
        raise IoError(str(e)) from None


def read_tensor(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise IoError(str(e)) from None
    if len(blob) < 6 or blob[:4] != _MAGIC:
        raise BadMagic(f"not a tensor file: {path}")
    dtype_code, rank = struct.unpack_from("<BB", blob, 4)
    if dtype_code != _DTYPE_F64:
        raise BadMagic(f"unsupported dtype code {dtype_code}")
    offset = 6
    if len(blob) < offset + 8 * rank:
        raise BadMagic(f"truncated header: {path}")
    shape = struct.unpack_from(f"<{rank}Q", blob, offset)
    offset += 8 * rank
    count = 1
    for d in shape:
        count *= d
    if len(blob) != offset + 8 * count:
        raise BadMagic(f"payload length mismatch: {path}")
    data = np.frombuffer(blob, dtype="<f8", offset=offset, count=count)
    return data.astype(np.float64).reshape(shape)


def save_param_dict(dirpath, params: dict[str, np.ndarray]):
    """One tensor file per entry plus a manifest fixing the order."""
    import os
    os.makedirs(dirpath, exist_ok=True)
    names = list(params)
    try:
        with open(os.path.join(dirpath, "manifest.txt"), "w") as fh:
            fh.write("\n".join(names) + "\n")
    except OSError as e:
        raise IoError(str(e)) from None
    for name in names:
        write_tensor(os.path.join(dirpath, name + ".nft"), params[name])


def load_param_dict(dirpath) -> dict[str, np.ndarray]:
    import os
    manifest = os.path.join(dirpath, "manifest.txt")
    try:
        with open(manifest) as fh:
            names = [line.strip() for line in fh if line.strip()]
    except OSError as e:
        raise IoError(str(e)) from None
    return {name: read_tensor(os.path.join(dirpath, name + ".nft"))
            for name in names}


# -- CSV emission -----------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.9g}"


def write_csv(path, header: list[str], rows: list[tuple]):
    """Header plus one row per record; floats printed with 9 significant digits."""
    if not rows:
        raise EmptyRecords("refusing to write a CSV with no records")
    try:
        with open(path, "w") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(_fmt(v) for v in row) + "\n")
    except OSError as e:
        raise IoError(str(e)) from None
