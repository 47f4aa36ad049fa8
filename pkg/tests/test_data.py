"""Stream generators, the binary tensor container, and CSV output."""

import numpy as np
import pytest

from noiseadapt.data import (
    DriftEvent,
    StreamSpec,
    default_stream_spec,
    generate_stream,
    load_param_dict,
    read_tensor,
    save_param_dict,
    sprite_motion_bound,
    stream_clips,
    write_csv,
    write_tensor,
)
from noiseadapt.errors import BadMagic, EmptyRecords, InvalidSpec, IoError

RNG = np.random.default_rng(77)


# -- stream generators -------------------------------------------------------

def test_stream_shapes_and_range():
    for kind in ("bouncing_sprites", "drifting_texture"):
        clips = stream_clips(StreamSpec(kind=kind, length=5, seed=1))
        assert clips.shape == (5, 4, 32, 32)
        assert clips.min() >= 0.0 and clips.max() <= 1.0


def test_stream_deterministic_given_spec():
    spec = StreamSpec(length=4, seed=9)
    assert np.array_equal(stream_clips(spec), stream_clips(spec))
    other = StreamSpec(length=4, seed=10)
    assert not np.array_equal(stream_clips(spec), stream_clips(other))


def test_stream_continuous_across_clip_boundaries():
    """Motion continues between clips: the jump from the last frame of one
    clip to the first frame of the next is no larger than typical in-clip
    frame-to-frame change."""
    for kind in ("bouncing_sprites", "drifting_texture"):
        clips = stream_clips(StreamSpec(kind=kind, length=8, seed=2))
        within = np.mean([np.abs(c[1:] - c[:-1]).mean() for c in clips])
        across = np.mean([np.abs(clips[i + 1][0] - clips[i][-1]).mean()
                          for i in range(7)])
        assert across <= 2.0 * within


def test_sprite_motion_respects_bound():
    spec = default_stream_spec(seed=3, length=20)
    bound = sprite_motion_bound(spec)
    clips = stream_clips(spec)
    frames = clips.reshape(-1, 32, 32)
    worst = np.max(np.abs(frames[1:] - frames[:-1]).mean(axis=(1, 2)))
    assert worst <= bound


def test_drift_changes_dynamics():
    calm = StreamSpec(length=10, seed=5)
    drifted = StreamSpec(length=10, seed=5, drift=(
        DriftEvent(clip_index=5, velocity_scale=2.0, size_scale=1.4),))
    a, b = stream_clips(calm), stream_clips(drifted)
    assert np.array_equal(a[:5], b[:5])  # identical before the event
    assert not np.array_equal(a[5:], b[5:])


def test_default_spec_has_midpoint_drift():
    spec = default_stream_spec(seed=0)
    assert spec.length == 300
    assert len(spec.drift) == 1 and spec.drift[0].clip_index == 150
    none = default_stream_spec(seed=0, drift_clip=-1)
    assert none.drift == ()


def test_spec_validation():
    with pytest.raises(InvalidSpec):
        StreamSpec(kind="wat").validate()
    with pytest.raises(InvalidSpec):
        StreamSpec(length=0).validate()
    with pytest.raises(InvalidSpec):
        StreamSpec(drift=(DriftEvent(clip_index=500),)).validate()
    with pytest.raises(InvalidSpec):
        list(generate_stream(StreamSpec(frame_size=4)))


# -- binary tensor container -------------------------------------------------

@pytest.mark.parametrize("shape", [(3,), (2, 5), (2, 3, 4, 5), ()])
def test_tensor_round_trip(tmp_path, shape):
    arr = RNG.standard_normal(shape)
    path = tmp_path / "t.nft"
    write_tensor(path, arr)
    back = read_tensor(path)
    assert back.shape == arr.shape
    assert np.array_equal(back, arr)  # bit exact
    assert back.dtype == np.float64


def test_tensor_header_layout(tmp_path):
    path = tmp_path / "t.nft"
    write_tensor(path, np.zeros((2, 3)))
    blob = path.read_bytes()
    assert blob[:4] == b"NFT1"
    assert blob[4] == 1        # float64 code
    assert blob[5] == 2        # rank
    assert len(blob) == 6 + 2 * 8 + 6 * 8


def test_tensor_rejects_corruption(tmp_path):
    path = tmp_path / "t.nft"
    write_tensor(path, np.ones(4))
    blob = path.read_bytes()
    bad = tmp_path / "bad.nft"
    bad.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(BadMagic):
        read_tensor(bad)
    bad.write_bytes(blob[:-8])  # truncated payload
    with pytest.raises(BadMagic):
        read_tensor(bad)
    with pytest.raises(IoError):
        read_tensor(tmp_path / "missing.nft")


def test_param_dict_round_trip(tmp_path):
    params = {"w": RNG.standard_normal((3, 3)), "b": RNG.standard_normal(3)}
    save_param_dict(tmp_path / "m", params)
    back = load_param_dict(tmp_path / "m")
    assert set(back) == {"w", "b"}
    for k in params:
        assert np.array_equal(back[k], params[k])


# -- CSV ---------------------------------------------------------------------

def test_csv_round_trip_at_nine_significant_digits(tmp_path):
    path = tmp_path / "out.csv"
    rows = [(1, 0.123456789123, 3.0), (2, 1e-7, -42.5)]
    write_csv(path, ["step", "a", "b"], rows)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "step,a,b"
    parsed = [line.split(",") for line in lines[1:]]
    assert parsed[0][0] == "1"
    assert float(parsed[0][1]) == pytest.approx(0.123456789123, rel=1e-9)
    assert float(parsed[1][1]) == pytest.approx(1e-7, rel=1e-9)


def test_csv_requires_records(tmp_path):
    with pytest.raises(EmptyRecords):
        write_csv(tmp_path / "x.csv", ["a"], [])
