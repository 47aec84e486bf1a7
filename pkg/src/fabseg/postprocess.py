"""Binarisation, region/boundary fusion, tile stitching and parcel extraction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.special import expit

from .data import TileGrid
from .exceptions import InvalidGrid, ShapeError

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass
class ParcelMap:
    labels: np.ndarray
    parcel_count: int

    def summary(self):
        """``(parcel_id, area_px, (row0, col0, row1, col1))`` per parcel, bbox end-exclusive."""
        rows = []
        for pid, sl in enumerate(ndimage.find_objects(self.labels), start=1):
            if sl is None:
                continue
            area = int(np.count_nonzero(self.labels[sl] == pid))
            rows.append((pid, area, (sl[0].start, sl[1].start, sl[0].stop, sl[1].stop)))
        return rows

    def summary_text(self):
        lines = ["parcel_id,area_px,bbox"]
        lines += [f"{pid},{area},{r0} {c0} {r1} {c1}" for pid, area, (r0, c0, r1, c1) in self.summary()]
        return "\n".join(lines) + "\n"


def binarize(logits, threshold=0.5):
    return (expit(np.asarray(logits, dtype=np.float64)) > threshold).astype(np.uint8)


def symmetric_difference(m, b):
    m, b = np.asarray(m), np.asarray(b)
    if m.shape != b.shape:
        raise ShapeError(f"region {m.shape} and boundary {b.shape} differ in shape")
    return np.logical_xor(m.astype(bool), b.astype(bool)).astype(np.uint8)


def stitch_tiles(grid: TileGrid):
    """Reassemble row-major tiles and crop the padding back to ``source_shape``."""
    ts = grid.tile_size
    h, w = grid.source_shape
    if grid.rows * grid.cols != len(grid.tiles) or grid.rows * ts < h or grid.cols * ts < w:
        raise InvalidGrid(f"{grid.rows}x{grid.cols} grid of {len(grid.tiles)} tiles cannot cover {grid.source_shape}")
    if not grid.tiles:
        raise InvalidGrid("grid has no tiles")
    extra = grid.tiles[0].shape[2:]
    if any(t.shape != (ts, ts, *extra) for t in grid.tiles):
        raise InvalidGrid("tiles differ from the declared tile size")
    out = np.empty((grid.rows * ts, grid.cols * ts, *extra), dtype=grid.tiles[0].dtype)
    for k, tile in enumerate(grid.tiles):
        r, c = divmod(k, grid.cols)
        out[r * ts:(r + 1) * ts, c * ts:(c + 1) * ts] = tile
    return out[:h, :w].copy()


def extract_parcels(region, boundary, min_area=16):
    """4-connected components of the fused mask inside the region, small ones dropped."""
    fused = symmetric_difference(region, boundary).astype(bool) & np.asarray(region).astype(bool)
    labels, n = ndimage.label(fused, structure=FOUR_CONNECTED)
    if n == 0:
        return ParcelMap(np.zeros(fused.shape, dtype=np.int32), 0)
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    keep = areas >= min_area
    keep[0] = False
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[keep] = np.arange(1, int(keep.sum()) + 1, dtype=np.int32)
    return ParcelMap(remap[labels], int(keep.sum()))
