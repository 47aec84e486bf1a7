import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from fabseg.data import TileGrid, crop_tiles
from fabseg.exceptions import InvalidGrid, ShapeError
from fabseg.postprocess import binarize, extract_parcels, stitch_tiles, symmetric_difference


def test_binarize_examples():
    assert binarize(np.zeros((3, 3))).sum() == 0
    assert binarize(np.full((2, 2), 4.0)).all()
    assert binarize(np.full((2, 2), 50.0), threshold=1.0).sum() == 0


def test_symmetric_difference_examples():
    m = np.array([1, 1, 0, 0])
    assert symmetric_difference(m, m).sum() == 0
    assert symmetric_difference(m, np.array([0, 1, 1, 0])).tolist() == [1, 0, 1, 0]
    assert symmetric_difference(np.array([1, 0, 0]), np.array([0, 0, 1])).tolist() == [1, 0, 1]
    with pytest.raises(ShapeError):
        symmetric_difference(np.zeros(2), np.zeros(3))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 90), st.integers(1, 90), st.sampled_from([8, 16, 32]), st.sampled_from([0, 3]))
def test_stitch_inverts_crop(h, w, ts, channels):
    shape = (h, w, channels) if channels else (h, w)
    img = np.random.default_rng(h * 1000 + w).integers(0, 256, shape).astype(np.uint8)
    assert np.array_equal(stitch_tiles(crop_tiles(img, ts, pad_value=9)), img)


def test_stitch_quadrants_and_single_tile():
    tiles = [np.full((2, 2), v) for v in range(4)]
    out = stitch_tiles(TileGrid(2, 2, 2, (4, 4), tiles))
    assert out.tolist() == [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]]
    single = stitch_tiles(TileGrid(1, 1, 4, (3, 2), [np.arange(16).reshape(4, 4)]))
    assert single.tolist() == [[0, 1], [4, 5], [8, 9]]
    with pytest.raises(InvalidGrid):
        stitch_tiles(TileGrid(2, 2, 2, (4, 4), tiles[:3]))


def test_parcels_examples():
    empty = extract_parcels(np.zeros((10, 10)), np.zeros((10, 10)))
    assert empty.parcel_count == 0
    square = np.zeros((12, 12), np.uint8)
    square[1:11, 1:11] = 1
    assert extract_parcels(square, np.zeros_like(square)).parcel_count == 1
    line = np.zeros_like(square)
    line[:, 6] = 1
    split = extract_parcels(square, line)
    assert split.parcel_count == 2
    assert sorted(a for _, a, _ in split.summary()) == [40, 50]
    assert split.summary_text().splitlines()[0] == "parcel_id,area_px,bbox"


def test_small_parcels_dropped_and_ids_contiguous():
    region = np.zeros((20, 20), np.uint8)
    region[0:2, 0:2] = 1
    region[5:15, 5:15] = 1
    region[17:20, 17:20] = 1
    parcels = extract_parcels(region, np.zeros_like(region), min_area=16)
    assert parcels.parcel_count == 1
    assert set(np.unique(parcels.labels)) == {0, 1}


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, (16, 16), elements=st.integers(0, 1)), arrays(np.uint8, (16, 16), elements=st.integers(0, 1)))
def test_parcels_are_connected_and_inside_region(region, boundary):
    parcels = extract_parcels(region, boundary, min_area=1)
    labels = parcels.labels
    assert np.all(region[labels > 0] == 1) and np.all(boundary[labels > 0] == 0)
    for pid in range(1, parcels.parcel_count + 1):
        assert ndimage.label(labels == pid)[1] == 1


def test_fusing_commutes_with_stitching():
    rng = np.random.default_rng(2)
    m, b = rng.integers(0, 2, (2, 50, 70)).astype(np.uint8)
    gm, gb = crop_tiles(m, 16), crop_tiles(b, 16)
    fused_tiles = crop_tiles(m, 16)
    fused_tiles.tiles = [symmetric_difference(x, y) for x, y in zip(gm.tiles, gb.tiles)]
    assert np.array_equal(stitch_tiles(fused_tiles), symmetric_difference(m, b))
