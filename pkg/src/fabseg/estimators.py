"""scikit-learn style estimators wrapping the two training phases.

``PrompterSegmenter`` is the stand-alone Deeplabv3+-style model;
``PromptedSamSegmenter`` adds the fine-tuned SAM block on top of it and predicts
region and boundary masks plus parcels.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, clone
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .checkpoint import Checkpoint
from .data import SegmentationDataset
from .config import AblationFlags, PromptConfig, finetune_train_defaults, prompter_train_defaults
from .losses import FinetuneLossWeights, PrompterLossWeights
from .metrics import MetricsAccumulator, confusion_counts, pixel_metrics
from .pipeline import Predictor
from .postprocess import extract_parcels
from .prompter import PrompterConfig, images_to_tensor
from .sam import HEADS, SamConfig
from .trainer import (finetune_sam_block, prompter_from_checkpoint, prompter_mask_prompts, sam_from_checkpoint,
                      train_prompter)
from .validation import check_images, check_masks


def _dataset(X, region, boundary=None):
    return SegmentationDataset(list(range(len(X))), X, region, boundary)


class PrompterSegmenter(BaseEstimator):
    """Farmland/background segmentation with the Prompter alone.

    Parameters
    ----------
    config : PrompterConfig, optional
        Network widths and ASPP rates; ``input_size`` is taken from the data.
    train_config : TrainConfig, optional
        Optimiser settings, defaulting to the full-scale SGD schedule.
    loss_weights : PrompterLossWeights, optional
    threshold : float
        Probability above which a pixel is predicted as farmland.
    """

    def __init__(self, config=None, train_config=None, loss_weights=None, threshold=0.5):
        self.config = config
        self.train_config = train_config
        self.loss_weights = loss_weights
        self.threshold = threshold

    def fit(self, X, y):
        X = check_images(X)
        y = check_masks(y, X)
        self.checkpoint_ = train_prompter(
            self.train_config or prompter_train_defaults(),
            _dataset(X, y),
            self.config or PrompterConfig(),
            self.loss_weights or PrompterLossWeights(),
        )
        self.net_ = prompter_from_checkpoint(self.checkpoint_)
        self.input_size_ = self.net_.config.input_size
        return self

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, threshold=0.5):
        est = cls(config=PrompterConfig(**ckpt.config["prompter"]), threshold=threshold)
        est.checkpoint_ = ckpt
        est.net_ = prompter_from_checkpoint(ckpt)
        est.input_size_ = est.net_.config.input_size
        return est

    def decision_function(self, X):
        """Farmland-minus-background logits, shape ``(n, H, W)``."""
        check_is_fitted(self, "net_")
        X = check_images(X, self.input_size_)
        return prompter_mask_prompts(self.net_, images_to_tensor(X))[:, 0].numpy()

    def predict_proba(self, X):
        p = 1.0 / (1.0 + np.exp(-self.decision_function(X).astype(np.float64)))
        return np.stack([1.0 - p, p], axis=-1)

    def predict(self, X):
        return (self.predict_proba(X)[..., 1] > self.threshold).astype(np.uint8)

    def score(self, X, y):
        """Pixel accuracy."""
        pred = self.predict(X)
        return pixel_metrics(confusion_counts(pred, check_masks(y, check_images(X))))["accuracy"]


class PromptedSamSegmenter(BaseEstimator):
    """Prompter-driven SAM block with separate region and boundary decoders.

    ``fit`` takes labels shaped ``(n, H, W, 2)`` holding the region mask in
    channel 0 and the boundary mask in channel 1. The Prompter is fitted
    first unless an already fitted ``PrompterSegmenter`` is passed in.
    """

    def __init__(self, prompter=None, sam_config=None, finetune_config=None, loss_weights=None,
                 prompt_config=None, flags=None, threshold=0.5, min_area=16, seed=0):
        self.prompter = prompter
        self.sam_config = sam_config
        self.finetune_config = finetune_config
        self.loss_weights = loss_weights
        self.prompt_config = prompt_config
        self.flags = flags
        self.threshold = threshold
        self.min_area = min_area
        self.seed = seed

    def _fitted_prompter(self, X, region):
        prompter = self.prompter if self.prompter is not None else PrompterSegmenter()
        try:
            check_is_fitted(prompter, "net_")
            return prompter
        except NotFittedError:
            return clone(prompter).fit(X, region)

    def fit(self, X, y):
        X = check_images(X)
        y = check_masks(y, X, channels=2)
        ds = _dataset(X, y[..., 0], y[..., 1])
        self.prompter_ = self._fitted_prompter(X, y[..., 0])
        self.checkpoints_ = {}
        for head in HEADS:
            self.checkpoints_[head] = finetune_sam_block(
                self.finetune_config or finetune_train_defaults(),
                ds,
                self.prompter_.checkpoint_,
                head,
                flags=self.flags or AblationFlags(),
                sam_config=self.sam_config or SamConfig(input_size=X.shape[1:3]),
                prompt_config=self.prompt_config or PromptConfig(),
                loss_weights=self.loss_weights or FinetuneLossWeights(),
            )
        self._build_predictor()
        return self

    @classmethod
    def from_checkpoints(cls, prompter_ckpt, region_ckpt, boundary_ckpt, threshold=0.5, min_area=16, seed=0):
        est = cls(prompter=PrompterSegmenter.from_checkpoint(prompter_ckpt), threshold=threshold,
                  min_area=min_area, seed=seed)
        est.prompter_ = est.prompter
        est.checkpoints_ = {"region": region_ckpt, "boundary": boundary_ckpt}
        est._build_predictor()
        return est

    def _build_predictor(self):
        self.predictor_ = Predictor(
            self.prompter_.net_,
            sam_from_checkpoint(self.checkpoints_["region"]),
            sam_from_checkpoint(self.checkpoints_["boundary"]),
            region_config=self.checkpoints_["region"].config,
            boundary_config=self.checkpoints_["boundary"].config,
            threshold=self.threshold,
            min_area=self.min_area,
            seed=self.seed,
        )
        self.input_size_ = self.prompter_.input_size_

    def decision_function(self, X):
        """Region and boundary logits stacked as ``(n, H, W, 2)``."""
        check_is_fitted(self, "predictor_")
        X = check_images(X, self.input_size_)
        logits = self.predictor_.tile_logits(X)
        return np.stack([logits["region"], logits["boundary"]], axis=-1)

    def predict(self, X):
        p = 1.0 / (1.0 + np.exp(-self.decision_function(X).astype(np.float64)))
        return (p > self.threshold).astype(np.uint8)

    def transform(self, X):
        """Parcel label maps ``(n, H, W)``: 0 is background, parcels count up from 1."""
        masks = self.predict(X)
        return np.stack([extract_parcels(m[..., 0], m[..., 1], self.min_area).labels for m in masks])

    def score(self, X, y):
        """mIOU over the region and boundary classes."""
        X = check_images(X)
        y = check_masks(y, X, channels=2)
        pred = self.predict(X)
        acc = MetricsAccumulator()
        for k, head in enumerate(HEADS):
            acc.update(head, pred[..., k], y[..., k])
        return acc.report().miou
