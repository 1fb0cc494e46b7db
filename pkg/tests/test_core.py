import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from paintlapse.core import (
    ChangeMap,
    Frame,
    Medium,
    PaintingVideo,
    ShapeMismatchError,
    apply_delta,
    blank_frame,
    frame_delta,
    is_blank,
    video_from_array,
)
from paintlapse.video_io import VideoFormatError, load_video, save_video


def test_apply_delta_identity():
    white = blank_frame(2, 2)
    zero = ChangeMap(np.zeros((2, 2, 3)))
    assert apply_delta(white, zero) == white


def test_apply_delta_scalar_arithmetic():
    prev = Frame(np.full((3, 3, 3), 1.0))
    delta = ChangeMap(np.full((3, 3, 3), -0.4))
    out = apply_delta(prev, delta)
    np.testing.assert_allclose(out.pixels, 0.6, rtol=0, atol=1e-15)


def test_apply_delta_clamps():
    prev = Frame(np.full((3, 3, 3), 0.9))
    delta = ChangeMap(np.full((3, 3, 3), 0.5))
    out = apply_delta(prev, delta)
    np.testing.assert_array_equal(out.pixels, 1.0)


def test_apply_delta_adversarial_bounds():
    rng = np.random.default_rng(0)
    prev = Frame(rng.uniform(0, 1, (5, 5, 3)))
    for sign in (1.0, -1.0):
        out = apply_delta(prev, ChangeMap(np.full((5, 5, 3), sign)))
        assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0


def test_apply_delta_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeMismatchError, match=r"\(2, 2, 3\).*\(3, 3, 3\)"):
        apply_delta(blank_frame(2, 2), ChangeMap(np.zeros((3, 3, 3))))


def test_frame_delta_identity_and_scalar():
    a = Frame(np.full((2, 2, 3), 0.2))
    b = Frame(np.full((2, 2, 3), 0.7))
    assert np.array_equal(frame_delta(a, a).values, 0.0 * a.pixels)
    np.testing.assert_allclose(frame_delta(a, b).values, -0.5, atol=1e-15)


@given(
    arrays(np.float64, (4, 4, 3), elements=st.floats(0, 1)),
    arrays(np.float64, (4, 4, 3), elements=st.floats(0, 1)),
)
@settings(max_examples=200, deadline=None)
def test_round_trip_apply_frame_delta(a, b):
    curr, prev = Frame(a), Frame(b)
    recovered = apply_delta(prev, frame_delta(curr, prev))
    np.testing.assert_allclose(recovered.pixels, curr.pixels, atol=1e-12)


def test_constructors_reject_nan_inf():
    bad = np.ones((2, 2, 3))
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        Frame(bad)
    bad[0, 0, 0] = np.inf
    with pytest.raises(ValueError):
        Frame(bad)
    with pytest.raises(ValueError):
        ChangeMap(bad)


def test_frame_bounds_enforced():
    with pytest.raises(ValueError):
        Frame(np.full((2, 2, 3), 1.5))
    with pytest.raises(ValueError):
        ChangeMap(np.full((2, 2, 3), -1.5))


def test_blank_frame_is_white():
    f = blank_frame(4, 6)
    assert f.shape == (4, 6, 3)
    assert np.all(f.pixels == 1.0)
    assert is_blank(f)


def test_frame_is_immutable():
    f = blank_frame(2, 2)
    with pytest.raises(ValueError):
        f.pixels[0, 0, 0] = 0.0


def test_video_invariants():
    arr = np.ones((3, 4, 4, 3)) * 0.5
    v = video_from_array(arr, "v0", medium=Medium.DIGITAL)
    assert len(v) == 3
    assert v.final == Frame(arr[-1])
    with pytest.raises(ValueError):
        PaintingVideo(frames=(), id="empty")
    mixed = (blank_frame(2, 2), blank_frame(3, 3))
    with pytest.raises(ShapeMismatchError):
        PaintingVideo(frames=mixed, id="mixed")


def test_video_io_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(7)
    arr = rng.integers(0, 256, size=(3, 8, 9, 3)).astype(np.float64) / 255.0
    video = video_from_array(arr, "rt", medium=Medium.WATERCOLOR, frame_period=2.5)
    save_video(video, tmp_path / "rt")
    loaded = load_video(tmp_path / "rt")
    assert loaded.id == "rt"
    assert loaded.medium == Medium.WATERCOLOR
    assert loaded.frame_period == 2.5
    assert len(loaded) == 3
    for a, b in zip(video.frames, loaded.frames):
        np.testing.assert_array_equal(a.pixels, b.pixels)


def test_video_io_gap_names_missing_index(tmp_path):
    rng = np.random.default_rng(7)
    arr = rng.integers(0, 256, size=(4, 4, 4, 3)).astype(np.float64) / 255.0
    save_video(video_from_array(arr, "gap"), tmp_path / "gap")
    (tmp_path / "gap" / "frame_00002.png").unlink()
    with pytest.raises(VideoFormatError, match="index 2"):
        load_video(tmp_path / "gap")


def test_video_io_corrupt_frame_named(tmp_path):
    arr = np.zeros((2, 4, 4, 3))
    save_video(video_from_array(arr, "bad"), tmp_path / "bad")
    (tmp_path / "bad" / "frame_00001.png").write_bytes(b"not a png")
    with pytest.raises(VideoFormatError, match="index 1"):
        load_video(tmp_path / "bad")


def test_video_io_directory_of_three_frames(tmp_path):
    arr = np.full((3, 4, 4, 3), 0.25)
    save_video(video_from_array(arr, "v3"), tmp_path / "v3")
    assert len(load_video(tmp_path / "v3")) == 3
