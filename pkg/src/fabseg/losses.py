"""Training objectives: two-head cross-entropy for the Prompter, Dice + Focal for fine-tuning.

All losses take torch tensors (numpy arrays are converted) and reduce by the
mean over pixels. Gradients come from autograd.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .exceptions import InvalidArgument, ShapeError

EPS = 1e-7
DICE_SMOOTH = 1e-12


@dataclass
class PrompterLossWeights:
    w_m: float = 1.0
    w_a: float = 0.4

    def __post_init__(self):
        if self.w_m < 0 or self.w_a < 0 or (self.w_m == 0 and self.w_a == 0):
            raise InvalidArgument("prompter loss weights must be non-negative and not both zero")


@dataclass
class FinetuneLossWeights:
    w_d: float = 1.0
    w_f: float = 1.0
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if self.w_d < 0 or self.w_f < 0 or (self.w_d == 0 and self.w_f == 0):
            raise InvalidArgument("fine-tune loss weights must be non-negative and not both zero")
        if not 0 < self.alpha < 1:
            raise InvalidArgument(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.gamma < 0:
            raise InvalidArgument(f"gamma must be >= 0, got {self.gamma}")


@dataclass
class LossValue:
    value: torch.Tensor
    terms: dict = field(default_factory=dict)

    def __float__(self):
        return float(self.value.detach())

    def backward(self):
        self.value.backward()


def _as_tensors(pred, target):
    pred = torch.as_tensor(pred)
    if not pred.is_floating_point():
        pred = pred.to(torch.float64)
    target = torch.as_tensor(target).to(pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ in shape")
    return pred, target


def cross_entropy_loss(y, y_true, eps=EPS):
    """Binary cross-entropy of farmland probabilities ``y`` against 0/1 labels."""
    y, t = _as_tensors(y, y_true)
    y = y.clamp(eps, 1 - eps)
    value = -(t * torch.log(y) + (1 - t) * torch.log(1 - y)).mean()
    return LossValue(value, {"ce": float(value.detach())})


def farmland_probability(logits):
    """Softmax over the two class channels of ``(B, 2, H, W)`` logits, farmland channel kept."""
    return torch.softmax(logits, dim=1)[:, 1]


def prompter_loss(main_logits, aux_logits, y_true, w: PrompterLossWeights | None = None):
    w = w or PrompterLossWeights()
    main = cross_entropy_loss(farmland_probability(main_logits), y_true)
    value = w.w_m * main.value
    terms = {"main": float(main.value.detach())}
    if aux_logits is not None and w.w_a:
        aux = cross_entropy_loss(farmland_probability(aux_logits), y_true)
        value = value + w.w_a * aux.value
        terms["aux"] = float(aux.value.detach())
    return LossValue(value, terms)


def dice_loss(y_pred, y_true, smooth=DICE_SMOOTH):
    y, t = _as_tensors(y_pred, y_true)
    inter = (y * t).sum()
    value = 1 - (2 * inter + smooth) / (t.sum() + y.sum() + smooth)
    return LossValue(value, {"dice": float(value.detach())})


def focal_loss(y_pred, y_true, alpha=0.25, gamma=2.0, eps=EPS):
    if not 0 < alpha < 1:
        raise InvalidArgument(f"alpha must lie in (0, 1), got {alpha}")
    y, t = _as_tensors(y_pred, y_true)
    y = y.clamp(eps, 1 - eps)
    pos = -alpha * (1 - y) ** gamma * torch.log(y)
    neg = -(1 - alpha) * y ** gamma * torch.log(1 - y)
    value = (t * pos + (1 - t) * neg).mean()
    return LossValue(value, {"focal": float(value.detach())})


def finetune_loss(y_pred, y_true, w: FinetuneLossWeights | None = None):
    w = w or FinetuneLossWeights()
    dice = dice_loss(y_pred, y_true)
    focal = focal_loss(y_pred, y_true, w.alpha, w.gamma)
    value = w.w_d * dice.value + w.w_f * focal.value
    return LossValue(value, {"dice": float(dice.value.detach()), "focal": float(focal.value.detach())})
