import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from fabseg.data import (RawTile, SegmentationDataset, crop_tiles, generate_synthetic_scene, load_dataset,
                         read_manifest, read_mask, render_bands, split_dataset, write_image, write_manifest,
                         write_mask)
from fabseg.exceptions import DataError, EmptyInput, InvalidRange, ShapeError


@pytest.mark.parametrize("value,expected", [(3000, 255), (0, 0), (4000, 255), (1500, 128)])
def test_render_bands_examples(value, expected):
    assert render_bands(RawTile(np.full((2, 2, 3), value, dtype=np.uint16))).max() == expected


def test_render_bands_float_input_matches_integer_path():
    raw = np.arange(0, 3001, 7, dtype=np.int64).reshape(-1, 1, 1)
    assert np.array_equal(render_bands(raw), render_bands(raw.astype(np.float64)))


@given(st.integers(0, 10_000), st.integers(0, 2000), st.integers(1, 5000))
def test_render_bands_matches_exact_rational_rounding(v, lo, span):
    hi = lo + span
    got = int(render_bands(np.array([[[v]]]), lo, hi)[0, 0, 0])
    clipped = min(max(v, lo), hi) - lo
    # round-half-up of 255 * clipped / span, in exact integers
    assert got == (2 * 255 * clipped + span) // (2 * span)
    assert 0 <= got <= 255


def test_render_bands_monotone():
    out = render_bands(np.arange(0, 3500, dtype=np.int64).reshape(1, -1, 1))
    assert np.all(np.diff(out.ravel().astype(int)) >= 0)


def test_render_bands_rejects_bad_range_and_negative_tiles():
    with pytest.raises(InvalidRange):
        render_bands(np.zeros((1, 1, 1)), 10, 10)
    with pytest.raises(InvalidRange):
        RawTile(np.full((1, 1, 1), -1))


def test_crop_identity_and_quadrants():
    img = np.random.default_rng(0).integers(0, 255, (512, 512, 3), dtype=np.uint8)
    g1 = crop_tiles(img[:256, :256], 256)
    assert (g1.rows, g1.cols) == (1, 1) and np.array_equal(g1.tiles[0], img[:256, :256])
    g = crop_tiles(img, 256)
    assert (g.rows, g.cols) == (2, 2)
    quads = [img[:256, :256], img[:256, 256:], img[256:, :256], img[256:, 256:]]
    assert all(np.array_equal(t, q) for t, q in zip(g.tiles, quads))


def test_crop_pads_remainder():
    img = np.ones((300, 300), dtype=np.uint8)
    g = crop_tiles(img, 256, pad_value=7)
    assert (g.rows, g.cols, g.source_shape) == (2, 2, (300, 300))
    last = g.tiles[3]
    assert last[:44, :44].min() == 1 and (last[44:] == 7).all() and (last[:, 44:] == 7).all()
    assert (last == 7).sum() == 256 * 256 - 44 * 44


def test_crop_rejects_empty():
    with pytest.raises(EmptyInput):
        crop_tiles(np.zeros((0, 5)), 4)


def test_split_sizes_and_determinism():
    ids = [f"t{i}" for i in range(20)]
    s = split_dataset(ids, (0.7, 0.15, 0.15), seed=3)
    assert (len(s.train), len(s.val), len(s.test)) == (14, 3, 3)
    again = split_dataset(ids, (0.7, 0.15, 0.15), seed=3)
    assert (s.train, s.val, s.test) == (again.train, again.val, again.test)
    one = split_dataset(["x"], (0.7, 0.15, 0.15))
    assert (one.train, one.val, one.test) == (["x"], [], [])


@given(st.integers(1, 200), st.integers(0, 2**31))
def test_split_is_a_partition(n, seed):
    s = split_dataset(range(n), (0.7, 0.15, 0.15), seed)
    assert sorted(s.train + s.val + s.test) == list(range(n))
    assert len(s.train) >= len(s.val) and len(s.train) >= len(s.test)


def test_split_rejects_bad_ratios():
    with pytest.raises(InvalidRange):
        split_dataset([1, 2], (0.5, 0.5, 0.5))
    with pytest.raises(EmptyInput):
        split_dataset([], (0.7, 0.15, 0.15))


def test_synthetic_scene_is_deterministic():
    a, b = generate_synthetic_scene(5, 9, 96), generate_synthetic_scene(5, 9, 96)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 16), st.sampled_from([64, 96, 128]))
def test_synthetic_scene_invariants(seed, n_parcels, size):
    image, region, boundary = generate_synthetic_scene(seed, n_parcels, size)
    assert image.shape == (size, size, 3) and image.dtype == np.uint8
    assert 0.2 <= region.mean() <= 0.8
    assert set(np.unique(boundary)) <= {0, 1}
    assert np.all(boundary <= region)
    # boundary pixels sit on the edge of the farmland: within one dilation step of background or a neighbour
    edge_zone = ndimage.binary_dilation(region == 0) | (boundary == 1)
    assert np.all(edge_zone[boundary == 1])


def test_dataset_validation():
    imgs = np.zeros((2, 8, 8, 3), np.uint8)
    with pytest.raises(ShapeError):
        SegmentationDataset([0, 1], imgs, np.zeros((2, 8, 7), np.uint8))
    ds = SegmentationDataset([0, 1], imgs, np.zeros((2, 8, 8), np.uint8))
    with pytest.raises(DataError):
        ds.labels("boundary")


def test_manifest_round_trip_and_tiled_loading(tmp_path):
    image, region, boundary = generate_synthetic_scene(1, 4, 64)
    write_image(tmp_path / "s.png", image)
    write_mask(tmp_path / "s_region.png", region)
    write_mask(tmp_path / "s_boundary.png", boundary)
    write_manifest(tmp_path / "m.tsv", [(tmp_path / "s.png", tmp_path / "s_region.png", tmp_path / "s_boundary.png")])
    assert (tmp_path / "m.tsv").read_text() == "s.png\ts_region.png\ts_boundary.png\n"
    rows = read_manifest(tmp_path / "m.tsv")
    assert rows[0][0] == str(tmp_path / "s.png")
    assert np.array_equal(read_mask(tmp_path / "s_region.png"), region)
    ds = load_dataset(tmp_path / "m.tsv", 32)
    assert len(ds) == 4 and ds.ids[0] == "s_r0_c0"
    assert np.array_equal(ds.images[1], image[:32, 32:])
    assert np.array_equal(ds.boundary[2], boundary[32:, :32])


def test_read_mask_rejects_non_binary(tmp_path):
    from PIL import Image

    Image.fromarray(np.array([[0, 17]], np.uint8)).save(tmp_path / "bad.png")
    with pytest.raises(DataError):
        read_mask(tmp_path / "bad.png")
