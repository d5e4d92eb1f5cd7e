import io

import numpy as np
import pytest
from PIL import Image

from bendlab import ReductionSpec, make_grid, normalize_to_image, reduce_channels, write_png
from bendlab.errors import ChannelOutOfRange, NonFiniteInput, SizeMismatch
from bendlab.featureviz import capture_sidecar, png_bytes, to_uint8_minmax

from conftest import random_activation


# --- reduce_channels ----------------------------------------------------------

def test_mean_of_single_channel_is_that_channel(rng) -> None:
    x = rng.standard_normal((2, 1, 4, 4)).astype(np.float32)
    assert np.array_equal(reduce_channels(x, ReductionSpec("mean")), x[:, 0])


def test_channel_selection_is_verbatim(rng) -> None:
    x = rng.standard_normal((1, 5, 3, 3)).astype(np.float32)
    got = reduce_channels(x, ReductionSpec("channel", channel_index=3))
    assert np.array_equal(got, x[:, 3])


def test_l2_norm_hand_arithmetic() -> None:
    x = np.array([[[[3.0]], [[4.0]]]], dtype=np.float32)  # two 1x1 channels
    got = reduce_channels(x, ReductionSpec("l2_norm"))
    assert got.shape == (1, 1, 1)
    assert got[0, 0, 0] == pytest.approx(5.0)


def test_abs_mean(rng) -> None:
    x = rng.standard_normal((1, 3, 2, 2)).astype(np.float32)
    got = reduce_channels(x, ReductionSpec("abs_mean"))
    assert np.allclose(got, np.abs(x).mean(axis=1))


def test_spatial_dims_always_preserved(rng) -> None:
    for _ in range(10):
        x = random_activation(rng)
        for spec in (ReductionSpec("mean"), ReductionSpec("abs_mean"),
                     ReductionSpec("l2_norm"),
                     ReductionSpec("channel", channel_index=0)):
            assert reduce_channels(x, spec).shape == (x.shape[0], x.shape[2], x.shape[3])


def test_channel_out_of_range(rng) -> None:
    x = random_activation(rng)
    with pytest.raises(ChannelOutOfRange):
        reduce_channels(x, ReductionSpec("channel", channel_index=x.shape[1]))


def test_reduction_spec_validation() -> None:
    with pytest.raises(ValueError):
        ReductionSpec("pca")
    with pytest.raises(ValueError):
        ReductionSpec("channel")


# --- normalize_to_image -----------------------------------------------------------

def test_constant_map_maps_to_128() -> None:
    assert (normalize_to_image(np.full((4, 4), 7.5)) == 128).all()


def test_minmax_endpoints() -> None:
    got = normalize_to_image(np.array([[0.0, 1.0]]))
    assert np.array_equal(got, np.array([[0, 255]], dtype=np.uint8))


def test_minmax_hits_0_and_255(rng) -> None:
    v = rng.standard_normal((8, 8))
    img = normalize_to_image(v)
    assert img.min() == 0 and img.max() == 255
    assert img[np.unravel_index(v.argmin(), v.shape)] == 0
    assert img[np.unravel_index(v.argmax(), v.shape)] == 255


def test_percentile_clips_outlier() -> None:
    v = np.linspace(0.0, 1.0, 10000).reshape(100, 100).copy()
    v[0, 0] = 1e6  # single extreme outlier
    lo, hi = np.percentile(v, [1.0, 99.0])  # oracle: explicit percentile computation
    expected = to_uint8_minmax(np.clip(v, lo, hi))
    got = normalize_to_image(v, mode="percentile", p_lo=1.0, p_hi=99.0)
    assert np.array_equal(got, expected)
    assert got[0, 0] == 255
    # the mid-range is spread instead of crushed against the outlier
    assert 100 < got[50, 50] < 200
    plain = normalize_to_image(v, mode="minmax")
    assert plain[50, 50] == 0  # minmax would crush it


def test_nonfinite_input_rejected() -> None:
    bad = np.array([[1.0, np.nan]])
    with pytest.raises(NonFiniteInput):
        normalize_to_image(bad)


def test_output_range(rng) -> None:
    img = normalize_to_image(rng.standard_normal((6, 6)) * 100)
    assert img.dtype == np.uint8
    assert img.min() >= 0 and img.max() <= 255


# --- make_grid ------------------------------------------------------------------------

def test_single_tile_single_column(rng) -> None:
    img = (rng.integers(0, 256, (5, 7))).astype(np.uint8)
    assert np.array_equal(make_grid([img], 1), img)


def test_four_tiles_two_columns(rng) -> None:
    tiles = [(rng.integers(0, 256, (16, 16))).astype(np.uint8) for _ in range(4)]
    grid = make_grid(tiles, 2)
    assert grid.shape == (32, 32)


def test_five_tiles_three_columns_pads_black(rng) -> None:
    tiles = [(rng.integers(1, 256, (4, 4))).astype(np.uint8) for _ in range(5)]
    grid = make_grid(tiles, 3)
    assert grid.shape == (8, 12)
    assert not grid[4:8, 8:12].any()  # sixth tile is black


def test_grid_is_lossless_over_tiles(rng) -> None:
    tiles = [(rng.integers(0, 256, (6, 5))).astype(np.uint8) for _ in range(7)]
    columns = 3
    grid = make_grid(tiles, columns)
    for i, tile in enumerate(tiles):
        r, c = divmod(i, columns)
        assert np.array_equal(grid[r * 6:(r + 1) * 6, c * 5:(c + 1) * 5], tile)


def test_mismatched_tiles_rejected(rng) -> None:
    with pytest.raises(SizeMismatch):
        make_grid([np.zeros((4, 4), np.uint8), np.zeros((4, 5), np.uint8)], 2)


# --- PNG export ---------------------------------------------------------------------------

def test_png_roundtrip_greyscale(tmp_path, rng) -> None:
    img = (rng.integers(0, 256, (9, 11))).astype(np.uint8)
    out = tmp_path / "map.png"
    write_png(img, out)
    back = np.asarray(Image.open(out))
    assert np.array_equal(back, img)


def test_png_roundtrip_rgb(rng) -> None:
    img = (rng.integers(0, 256, (8, 8, 3))).astype(np.uint8)
    back = np.asarray(Image.open(io.BytesIO(png_bytes(img))))
    assert np.array_equal(back, img)


def test_png_bytes_are_deterministic(rng) -> None:
    img = (rng.integers(0, 256, (8, 8))).astype(np.uint8)
    assert png_bytes(img) == png_bytes(img)


def test_sidecar_shape() -> None:
    sc = capture_sidecar("diffusion_model.middle_block.0.in_layers", 3, "post_bend",
                         ReductionSpec("channel", channel_index=2))
    assert sc == {
        "path": "diffusion_model.middle_block.0.in_layers",
        "step": 3,
        "phase": "post_bend",
        "reduction": {"method": "channel", "channel_index": 2},
    }
