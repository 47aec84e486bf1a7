"""Mask and point prompts derived from Prompter logits."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .exceptions import InvalidArgument, NoEligiblePixels, NumericalError, ShapeError

FOREGROUND = 1
BACKGROUND = 0
PADDING = -1


@dataclass
class PointPromptSet:
    coords: np.ndarray  # (N, 2) int, (row, col)
    labels: np.ndarray  # (N,) int, 1 = farmland, 0 = background
    shortfall: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64))


def mask_prompt_from_logits(logits):
    """Collapse ``(..., 2, H, W)`` two-class logits to one farmland-vs-background logit map."""
    logits = np.asarray(logits)
    if logits.ndim < 3 or logits.shape[-3] != 2:
        raise ShapeError(f"expected two-channel logits, got {logits.shape}")
    return logits[..., 1, :, :] - logits[..., 0, :, :]


def to_probability_map(mp):
    mp = np.asarray(mp, dtype=np.float64)
    if not np.isfinite(mp).all():
        raise NumericalError("mask prompt contains non-finite logits")
    return expit(mp)


def _weighted_pick(rng, flat_idx, weights, n):
    if n <= 0 or flat_idx.size == 0:
        return flat_idx[:0]
    if flat_idx.size <= n:
        return flat_idx
    return rng.choice(flat_idx, size=n, replace=False, p=weights / weights.sum())


def generate_point_prompts(P, n_fg=4, n_bg=4, seed=0, t_fg=0.7, t_bg=0.3):
    """Sample labelled points from a farmland probability map.

    Foreground candidates have ``P > t_fg`` and are drawn with weight ``P``;
    background candidates have ``P < t_bg`` and are drawn with weight ``1 - P``.
    Sampling is without replacement. A pool smaller than requested is
    returned whole and the missing count is kept in ``shortfall``.
    """
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2:
        raise ShapeError(f"probability map must be 2-D, got {P.shape}")
    if not (0.0 <= t_bg < t_fg <= 1.0):
        raise InvalidArgument(f"need 0 <= t_bg < t_fg <= 1, got t_bg={t_bg}, t_fg={t_fg}")
    if n_fg < 0 or n_bg < 0:
        raise InvalidArgument("point counts must be non-negative")
    rng = np.random.default_rng(seed)
    flat = P.ravel()
    fg_pool = np.flatnonzero(flat > t_fg)
    bg_pool = np.flatnonzero(flat < t_bg)
    if fg_pool.size == 0 and bg_pool.size == 0:
        raise NoEligiblePixels(f"no pixel has P > {t_fg} or P < {t_bg}")
    fg = _weighted_pick(rng, fg_pool, flat[fg_pool], n_fg)
    bg = _weighted_pick(rng, bg_pool, 1.0 - flat[bg_pool], n_bg)
    shortfall = {}
    if fg.size < n_fg:
        shortfall["foreground"] = n_fg - fg.size
    if bg.size < n_bg:
        shortfall["background"] = n_bg - bg.size
    idx = np.concatenate([fg, bg])
    coords = np.stack(np.unravel_index(idx, P.shape), axis=1).astype(np.int64)
    labels = np.concatenate([np.full(fg.size, FOREGROUND), np.full(bg.size, BACKGROUND)]).astype(np.int64)
    return PointPromptSet(coords.reshape(-1, 2), labels, shortfall)


def batch_point_prompts(prob_maps, n_fg, n_bg, seeds, t_fg=0.7, t_bg=0.3):
    """Point prompts for a batch, padded to ``n_fg + n_bg`` with ``PADDING`` labels.

    Maps with no eligible pixel contribute only padding.
    """
    n = n_fg + n_bg
    coords = np.zeros((len(prob_maps), n, 2), dtype=np.int64)
    labels = np.full((len(prob_maps), n), PADDING, dtype=np.int64)
    for i, (P, seed) in enumerate(zip(prob_maps, seeds)):
        try:
            pts = generate_point_prompts(P, n_fg, n_bg, seed, t_fg, t_bg)
        except NoEligiblePixels:
            continue
        coords[i, :len(pts)] = pts.coords
        labels[i, :len(pts)] = pts.labels
    return coords, labels


def step_seed(seed, *keys):
    """Derive an independent integer seed from ``seed`` and extra keys (step, sample index)."""
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1)[0])
