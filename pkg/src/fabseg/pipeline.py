"""Inference: Prompter -> prompts -> SAM block -> binary masks -> parcels, tile by tile."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .config import AblationFlags, PromptConfig
from .data import crop_tiles
from .postprocess import ParcelMap, binarize, extract_parcels, stitch_tiles, symmetric_difference
from .prompter import images_to_tensor
from .prompts import batch_point_prompts, step_seed
from .trainer import image_embeddings, prompter_mask_prompts


@dataclass
class ScenePrediction:
    region_logits: np.ndarray
    boundary_logits: np.ndarray
    region: np.ndarray
    boundary: np.ndarray
    fused: np.ndarray
    parcels: ParcelMap


def _flags_of(ckpt_config):
    return AblationFlags(**ckpt_config.get("flags", {}))


def _prompts_of(ckpt_config):
    return PromptConfig(**ckpt_config.get("prompts", {}))


@torch.no_grad()
def sam_head_logits(sam, head, x, mp, flags: AblationFlags, prompts: PromptConfig, seed=0, batch=16):
    """Logits ``(N, H, W)`` of one decoder head for image batch ``x`` and mask prompts ``mp``."""
    sam.eval()
    prob = torch.sigmoid(mp[:, 0].double()).numpy()
    f_image = image_embeddings(sam, x)
    out = []
    for start in range(0, x.shape[0], batch):
        idx = np.arange(start, min(start + batch, x.shape[0]))
        points = None
        if flags.pp:
            seeds = [step_seed(seed, i) for i in idx]
            coords, labels = batch_point_prompts(prob[idx], prompts.n_fg, prompts.n_bg, seeds,
                                                 prompts.t_fg, prompts.t_bg)
            points = (torch.from_numpy(coords), torch.from_numpy(labels))
        tidx = torch.from_numpy(idx)
        f_mp, f_pp = sam.encode_prompts(mp[tidx] if flags.mp else None, points, batch_size=len(idx))
        out.append(sam.decode(f_image[tidx], f_mp, f_pp, head)[:, 0])
    return torch.cat(out).numpy()


class Predictor:
    """Frozen Prompter plus one SAM block per head, ready for tile or scene prediction.

    ``region_config`` / ``boundary_config`` are the checkpoint config snapshots
    that record the prompt settings each head was fine-tuned with.
    """

    def __init__(self, prompter, sam_region, sam_boundary, region_config=None, boundary_config=None,
                 threshold=0.5, min_area=16, seed=0):
        self.prompter = prompter.eval()
        self.sams = {"region": sam_region.eval(), "boundary": sam_boundary.eval()}
        self.head_configs = {"region": region_config or {}, "boundary": boundary_config or {}}
        self.threshold = threshold
        self.min_area = min_area
        self.seed = seed

    @property
    def tile_size(self):
        return self.prompter.config.input_size[0]

    def prompter_logits(self, images):
        """Two-class Prompter logits collapsed to ``(N, H, W)`` farmland logits."""
        return prompter_mask_prompts(self.prompter, images_to_tensor(images))[:, 0].numpy()

    def tile_logits(self, images):
        x = images_to_tensor(images)
        mp = prompter_mask_prompts(self.prompter, x)
        out = {}
        for head, sam in self.sams.items():
            cfg = self.head_configs[head]
            out[head] = sam_head_logits(sam, head, x, mp, _flags_of(cfg), _prompts_of(cfg), self.seed)
        return out

    def predict_scene(self, image):
        image = np.asarray(image)
        grid = crop_tiles(image, self.tile_size, pad_value=0)
        logits = self.tile_logits(np.stack(grid.tiles))
        stitched = {}
        for head, arr in logits.items():
            grid.tiles = list(arr)
            stitched[head] = stitch_tiles(grid)
        region = binarize(stitched["region"], self.threshold)
        boundary = binarize(stitched["boundary"], self.threshold)
        return ScenePrediction(
            region_logits=stitched["region"],
            boundary_logits=stitched["boundary"],
            region=region,
            boundary=boundary,
            fused=symmetric_difference(region, boundary),
            parcels=extract_parcels(region, boundary, self.min_area),
        )
