"""Tile ingestion: band rendering, cropping, dataset splits, synthetic scenes and file I/O."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial import ConvexHull
from skimage.draw import polygon as draw_polygon

from .exceptions import DataError, EmptyInput, InvalidRange, ShapeError


@dataclass
class RawTile:
    pixels: np.ndarray
    geo_id: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[:, :, None]
        if self.pixels.ndim != 3 or min(self.pixels.shape) < 1:
            raise ShapeError(f"raw tile must be HxWxC with positive sides, got {self.pixels.shape}")
        if np.any(self.pixels < 0):
            raise InvalidRange("raw band values must be non-negative")


@dataclass
class TileGrid:
    rows: int
    cols: int
    tile_size: int
    source_shape: tuple
    tiles: list = field(default_factory=list)


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    seed: int


@dataclass
class SegmentationDataset:
    """Stacked tiles with their labels; ``boundary`` may be None for region-only data."""

    ids: list
    images: np.ndarray
    region: np.ndarray
    boundary: np.ndarray | None = None

    def __len__(self):
        return len(self.ids)

    def __post_init__(self):
        if len(self.ids) == 0:
            raise EmptyInput("dataset has no samples")
        n, h, w = self.images.shape[:3]
        if self.region.shape != (n, h, w):
            raise ShapeError(f"region labels {self.region.shape} do not match images {self.images.shape}")
        if self.boundary is not None and self.boundary.shape != (n, h, w):
            raise ShapeError(f"boundary labels {self.boundary.shape} do not match images {self.images.shape}")

    def labels(self, head):
        if head == "region":
            return self.region
        if self.boundary is None:
            raise DataError("dataset carries no boundary labels")
        return self.boundary


def render_bands(tile, lo=0, hi=3000):
    """Clamp raw band values to ``[lo, hi]`` and stretch them onto 0..255.

    Rounding is half-up and done in integer arithmetic, so the result is
    bit-exact for integer inputs.
    """
    if lo >= hi:
        raise InvalidRange(f"lo ({lo}) must be below hi ({hi})")
    pixels = tile.pixels if isinstance(tile, RawTile) else np.asarray(tile)
    if np.issubdtype(pixels.dtype, np.integer):
        v = np.clip(pixels.astype(np.int64), lo, hi) - lo
        span = int(hi - lo)
        out = (510 * v + span) // (2 * span)
    else:
        v = np.clip(pixels.astype(np.float64), lo, hi) - lo
        out = np.floor(255.0 * v / (hi - lo) + 0.5)
    return out.astype(np.uint8)


def crop_tiles(image, tile_size=256, pad_value=0):
    """Cut ``image`` into row-major, non-overlapping square tiles.

    Right and bottom remainders are padded with ``pad_value``; the original
    extent is kept in ``source_shape`` so that stitching can undo the padding.
    """
    image = np.asarray(image)
    if tile_size < 1:
        raise InvalidRange("tile_size must be >= 1")
    if image.ndim < 2 or image.shape[0] == 0 or image.shape[1] == 0:
        raise EmptyInput(f"cannot tile an image of shape {image.shape}")
    h, w = image.shape[:2]
    rows, cols = math.ceil(h / tile_size), math.ceil(w / tile_size)
    pad = [(0, rows * tile_size - h), (0, cols * tile_size - w)] + [(0, 0)] * (image.ndim - 2)
    padded = np.pad(image, pad, mode="constant", constant_values=pad_value)
    tiles = [
        padded[r * tile_size:(r + 1) * tile_size, c * tile_size:(c + 1) * tile_size].copy()
        for r in range(rows)
        for c in range(cols)
    ]
    return TileGrid(rows=rows, cols=cols, tile_size=tile_size, source_shape=(h, w), tiles=tiles)


def split_dataset(ids, ratios=(0.7, 0.15, 0.15), seed=0):
    ids = list(ids)
    if not ids:
        raise EmptyInput("no ids to split")
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise InvalidRange(f"ratios must be three non-negative numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidRange(f"ratios must sum to 1, got {sum(ratios)}")
    n = len(ids)
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    # guard against 0.15 * 20 landing just below an integer
    n_val = math.floor(n * ratios[1] + 1e-9)
    n_test = math.floor(n * ratios[2] + 1e-9)
    n_train = n - n_val - n_test
    return DatasetSplit(
        train=shuffled[:n_train],
        val=shuffled[n_train:n_train + n_val],
        test=shuffled[n_train + n_val:],
        seed=seed,
    )


def parcel_edges(labels):
    """Inner 1-pixel edge of every labelled parcel (4-neighbourhood)."""
    labels = np.asarray(labels)
    edge = np.zeros(labels.shape, dtype=bool)
    edge[1:, :] |= labels[1:, :] != labels[:-1, :]
    edge[:-1, :] |= labels[:-1, :] != labels[1:, :]
    edge[:, 1:] |= labels[:, 1:] != labels[:, :-1]
    edge[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    return (edge & (labels > 0)).astype(np.uint8)


_BACKGROUND_TONES = np.array([[38, 58, 40], [46, 52, 72], [60, 50, 42], [32, 44, 36]], dtype=np.float64)


def _draw_parcels(rng, n_parcels, size):
    k = math.ceil(math.sqrt(n_parcels))
    cell = size / k
    labels = np.zeros((size, size), dtype=np.int32)
    cells = rng.choice(k * k, size=n_parcels, replace=False)
    for pid, idx in enumerate(cells, start=1):
        r0, c0 = divmod(int(idx), k)
        center = (np.array([r0, c0]) + 0.5 + rng.uniform(-0.15, 0.15, 2)) * cell
        half = rng.uniform(0.5, 0.8) * cell
        pts = center + rng.uniform(-half, half, size=(int(rng.integers(6, 11)), 2))
        hull = pts[ConvexHull(pts).vertices]
        rr, cc = draw_polygon(hull[:, 0], hull[:, 1], shape=labels.shape)
        labels[rr, cc] = pid
    return labels


def _render_scene(rng, labels):
    size = labels.shape[0]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.empty((size, size, 3), dtype=np.float64)
    tone = _BACKGROUND_TONES[rng.integers(len(_BACKGROUND_TONES))]
    blob = np.sin(xx / rng.uniform(6, 14) + rng.uniform(0, 6)) * np.cos(yy / rng.uniform(6, 14))
    img[:] = tone + 8.0 * blob[..., None] + rng.normal(0, 5, (size, size, 3))
    for pid in np.unique(labels[labels > 0]):
        mask = labels == pid
        base = np.array([rng.uniform(120, 215), rng.uniform(135, 225), rng.uniform(60, 150)])
        theta, period = rng.uniform(0, math.pi), rng.uniform(3, 7)
        stripes = np.sin(2 * math.pi * (xx * math.cos(theta) + yy * math.sin(theta)) / period)
        tex = base + 14.0 * stripes[..., None] + rng.normal(0, 5, (size, size, 3))
        img[mask] = tex[mask]
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_synthetic_scene(seed, n_parcels=9, size=128, region_bounds=(0.2, 0.8), max_tries=64):
    """Random convex farmland parcels on a darker background.

    Returns ``(image, region_mask, boundary_mask)``; the boundary is the inner
    edge of each parcel, so neighbouring parcels stay separable.
    """
    if n_parcels < 1:
        raise InvalidRange("n_parcels must be >= 1")
    if size < 32:
        raise InvalidRange("size must be >= 32")
    rng = np.random.default_rng(seed)
    lo, hi = region_bounds
    for _ in range(max_tries):
        labels = _draw_parcels(rng, n_parcels, size)
        if lo <= (labels > 0).mean() <= hi:
            break
    image = _render_scene(rng, labels)
    region = (labels > 0).astype(np.uint8)
    return image, region, parcel_edges(labels)


# -- file I/O -----------------------------------------------------------------

def read_image(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def read_raw(path):
    """Raw multi-band tile from ``.npy`` or any image PIL can decode (16-bit kept)."""
    path = Path(path)
    if path.suffix == ".npy":
        return RawTile(np.load(path), geo_id=path.stem)
    with Image.open(path) as im:
        return RawTile(np.asarray(im), geo_id=path.stem)


def read_mask(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    values = np.unique(arr)
    if not set(values.tolist()) <= {0, 255}:
        if set(values.tolist()) <= {0, 1}:
            return arr.astype(np.uint8)
        raise DataError(f"{path}: mask values must be 0/255, found {values[:8].tolist()}")
    return (arr // 255).astype(np.uint8)


def write_image(path, image):
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path)


def write_mask(path, mask):
    Image.fromarray((np.asarray(mask, dtype=np.uint8) * 255).astype(np.uint8), mode="L").save(path)


def read_manifest(path):
    """Rows of ``(image, region_mask, boundary_mask)``; relative paths resolve against the manifest."""
    path = Path(path)
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) not in (2, 3):
            raise DataError(f"{path}:{lineno}: expected 2 or 3 tab-separated paths")
        resolved = [p if Path(p).is_absolute() else str(path.parent / p) for p in parts]
        rows.append(tuple(resolved) if len(resolved) == 3 else (*resolved, None))
    if not rows:
        raise EmptyInput(f"{path}: manifest is empty")
    return rows


def write_manifest(path, rows):
    path = Path(path)
    lines = []
    for row in rows:
        parts = [str(Path(p).relative_to(path.parent)) if Path(p).is_relative_to(path.parent) else str(p)
                 for p in row if p is not None]
        lines.append("\t".join(parts))
    path.write_text("\n".join(lines) + "\n")


def load_dataset(manifest, tile_size=None):
    """Read every manifest row and stack it, cropped to ``tile_size`` tiles when given."""
    ids, images, regions, boundaries = [], [], [], []
    has_boundary = True
    for image_path, region_path, boundary_path in read_manifest(manifest):
        stem = Path(image_path).stem
        image = read_image(image_path)
        region = read_mask(region_path)
        boundary = read_mask(boundary_path) if boundary_path else None
        has_boundary &= boundary is not None
        if region.shape != image.shape[:2] or (boundary is not None and boundary.shape != image.shape[:2]):
            raise ShapeError(f"{stem}: mask shape does not match image {image.shape[:2]}")
        if tile_size is None:
            parts = [(stem, image, region, boundary)]
        else:
            gi, gr = crop_tiles(image, tile_size), crop_tiles(region, tile_size)
            gb = crop_tiles(boundary, tile_size) if boundary is not None else None
            parts = [
                (f"{stem}_r{k // gi.cols}_c{k % gi.cols}", gi.tiles[k], gr.tiles[k], gb.tiles[k] if gb else None)
                for k in range(len(gi.tiles))
            ]
        for sid, im, rg, bd in parts:
            ids.append(sid)
            images.append(im)
            regions.append(rg)
            boundaries.append(bd)
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ShapeError(f"samples differ in shape {sorted(shapes)}; set a tile size")
    return SegmentationDataset(
        ids=ids,
        images=np.stack(images),
        region=np.stack(regions),
        boundary=np.stack(boundaries) if has_boundary else None,
    )
