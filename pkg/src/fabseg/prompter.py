"""Deeplabv3+-style Prompter: residual backbone, separable ASPP, low-level fusion decoder."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import InvalidArgument, InvalidState, NumericalError, ShapeError


@dataclass
class PrompterConfig:
    backbone_channels: tuple = (16, 32, 64, 128)
    blocks_per_stage: int = 1
    aspp_rates: tuple = (1, 6, 12, 18)
    aspp_channels: int = 64
    decoder_channels: int = 64
    low_level_channels: int = 24
    num_classes: int = 2
    input_size: tuple = (256, 256)

    def __post_init__(self):
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        self.aspp_rates = tuple(int(r) for r in self.aspp_rates)
        self.input_size = tuple(int(s) for s in self.input_size)
        if self.num_classes != 2:
            raise InvalidArgument("the Prompter is a two-class (background/farmland) model")
        if len(self.backbone_channels) != 4:
            raise InvalidArgument("backbone needs exactly four stage widths")
        widths = (*self.backbone_channels, self.aspp_channels, self.decoder_channels, self.low_level_channels)
        if min(widths) < 1 or self.blocks_per_stage < 1:
            raise InvalidArgument("all widths and block counts must be >= 1")
        if len(set(self.aspp_rates)) != len(self.aspp_rates) or min(self.aspp_rates) < 1:
            raise InvalidArgument("aspp_rates must be distinct positive integers")


class PrompterOutput(NamedTuple):
    main_logits: torch.Tensor
    aux_logits: torch.Tensor | None


def conv_bn_relu(cin, cout, kernel=3, stride=1, dilation=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, stride=stride, padding=dilation * (kernel // 2), dilation=dilation, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class SeparableConv(nn.Sequential):
    """Depthwise 3x3 (optionally dilated) followed by a pointwise 1x1, each with BN + ReLU."""

    def __init__(self, cin, cout, dilation=1):
        super().__init__(
            nn.Conv2d(cin, cin, 3, padding=dilation, dilation=dilation, groups=cin, bias=False),
            nn.BatchNorm2d(cin),
            nn.ReLU(inplace=True),
            nn.Conv2d(cin, cout, 1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1, dilation=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation, dilation=dilation, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=dilation, dilation=dilation, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


class Backbone(nn.Module):
    """Four residual stages at strides 4, 8, 16, 16 (the last one dilated)."""

    def __init__(self, widths, blocks_per_stage=1):
        super().__init__()
        self.stem = conv_bn_relu(3, widths[0], stride=2)
        stages = []
        cin = widths[0]
        for i, (cout, stride, dilation) in enumerate(zip(widths, (2, 2, 2, 1), (1, 1, 1, 2))):
            blocks = [BasicBlock(cin, cout, stride, dilation)]
            blocks += [BasicBlock(cout, cout, 1, dilation) for _ in range(blocks_per_stage - 1)]
            stages.append(nn.Sequential(*blocks))
            cin = cout
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        feats = []
        x = self.stem(x)
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class ASPP(nn.Module):
    def __init__(self, cin, cout, rates):
        super().__init__()
        self.branches = nn.ModuleList(SeparableConv(cin, cout, r) for r in rates)
        # no BN here: the pooled map is 1x1 and a batch of one would make BN undefined
        self.pool = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Conv2d(cin, cout, 1), nn.ReLU(inplace=True))
        self.project = conv_bn_relu(cout * (len(rates) + 1), cout, kernel=1)

    def forward(self, x):
        outs = [branch(x) for branch in self.branches]
        outs.append(self.pool(x).expand(-1, -1, x.shape[2], x.shape[3]))
        return self.project(torch.cat(outs, dim=1))


class AuxHead(nn.Module):
    """conv3x3 -> BN -> conv1x1, upsampled bilinearly to the input resolution."""

    def __init__(self, cin, mid, num_classes):
        super().__init__()
        self.conv3 = nn.Conv2d(cin, mid, 3, padding=1)
        self.bn = nn.BatchNorm2d(mid)
        self.conv1 = nn.Conv2d(mid, num_classes, 1)

    def forward(self, feats, size):
        x = self.conv1(self.bn(self.conv3(feats)))
        return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class PrompterNet(nn.Module):
    """Encoder-decoder producing two-channel (background, farmland) logits.

    The auxiliary head taps backbone stage 3 and only runs in training mode.
    """

    def __init__(self, config: PrompterConfig | None = None):
        super().__init__()
        self.config = config = config or PrompterConfig()
        w = config.backbone_channels
        self.backbone = Backbone(w, config.blocks_per_stage)
        self.aspp = ASPP(w[3], config.aspp_channels, config.aspp_rates)
        self.low_level = conv_bn_relu(w[0], config.low_level_channels, kernel=1)
        self.fuse = SeparableConv(config.aspp_channels + config.low_level_channels, config.decoder_channels)
        self.classifier = nn.Conv2d(config.decoder_channels, config.num_classes, 1)
        self.aux_head = AuxHead(w[2], config.decoder_channels, config.num_classes)

    def forward(self, x):
        if tuple(x.shape[-2:]) != self.config.input_size:
            raise ShapeError(f"expected input of size {self.config.input_size}, got {tuple(x.shape[-2:])}")
        size = x.shape[-2:]
        feats = self.backbone(x)
        low = self.low_level(feats[0])
        high = F.interpolate(self.aspp(feats[3]), size=low.shape[-2:], mode="bilinear", align_corners=False)
        logits = self.classifier(self.fuse(torch.cat([high, low], dim=1)))
        main = F.interpolate(logits, size=size, mode="bilinear", align_corners=False)
        aux = self.aux_head(feats[2], size) if self.training else None
        return PrompterOutput(main, aux)

    def aux_forward(self, x):
        """Auxiliary logits for ``x``; only meaningful while training."""
        if not self.training:
            raise InvalidState("the auxiliary head is used only in training mode")
        return self.aux_head(self.backbone(x)[2], x.shape[-2:])


def images_to_tensor(images, dtype=torch.float32):
    """uint8 ``(H, W, 3)`` or ``(N, H, W, 3)`` arrays to a ``(N, 3, H, W)`` tensor scaled to [0, 1]."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ShapeError(f"expected (N, H, W, 3) images, got {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype) / 255.0


def check_finite_parameters(module):
    for name, p in module.state_dict().items():
        if p.is_floating_point() and not torch.isfinite(p).all():
            raise NumericalError(f"parameter {name} has non-finite values")


def prompter_forward(image, config=None, params=None, training=False):
    """Functional forward: build a Prompter from ``config`` and ``params`` (a Checkpoint) and run it."""
    from .checkpoint import Checkpoint

    net = PrompterNet(config)
    if params is not None:
        if isinstance(params, Checkpoint):
            params.load_into(net, "prompter.")
        else:
            net.load_state_dict(params)
    check_finite_parameters(net)
    net.train(training)
    x = image if isinstance(image, torch.Tensor) else images_to_tensor(image)
    return net(x)
