"""Staged backbones whose per-stage weights can be grouped and masked.

A backbone is stem -> K stages -> head. Layers tagged Groupable* form each
stage's groupable weight set; downsampling/shortcut convolutions, batch norm,
the stem, and the classifier head are excluded from grouping and pruning
(they are replicated per path where exits diverge).
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .errors import ConfigError


class GroupableConv2d(nn.Conv2d):
    """Convolution carrying an optional binary weight mask.

    With no mask set this is a plain convolution; multi-exit nodes share the
    weight tensor and set their own mask, so the effective weight is
    ``weight * weight_mask`` at every forward pass.
    """

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.register_buffer("weight_mask", None, persistent=False)

    def forward(self, x):
        w = self.weight if self.weight_mask is None else self.weight * self.weight_mask
        return self._conv_forward(x, w, self.bias)


class GroupableLinear(nn.Linear):
    """Linear layer carrying an optional binary weight mask."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.register_buffer("weight_mask", None, persistent=False)

    def forward(self, x):
        w = self.weight if self.weight_mask is None else self.weight * self.weight_mask
        return nn.functional.linear(x, w, self.bias)


GROUPABLE_TYPES = (GroupableConv2d, GroupableLinear)


def groupable_named_modules(stage: nn.Module) -> list[tuple[str, nn.Module]]:
    """Groupable layers of a stage in deterministic traversal order."""
    return [(n, m) for n, m in stage.named_modules() if isinstance(m, GROUPABLE_TYPES)]


class BasicBlock(nn.Module):
    """Post-activation residual block with 3x3 convolutions."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = GroupableConv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = GroupableConv2d(out_ch, out_ch, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or in_ch != out_ch:
            # Shortcut convs stay dense and are never grouped.
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


class PoolingHead(nn.Module):
    """Global average pooling followed by a fully connected classifier."""

    def __init__(self, in_ch: int, num_classes: int):
        super().__init__()
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(in_ch, num_classes)

    def forward(self, x):
        return self.fc(torch.flatten(self.pool(x), 1))


class StagedBackbone(nn.Module):
    """Stem -> K stages -> head, with explicit, stable stage boundaries."""

    def __init__(self, stem: nn.Module, stages: list[nn.Module], head: nn.Module, config: dict):
        super().__init__()
        self.stem = stem
        self.stages = nn.ModuleList(stages)
        self.head = head
        self.config = dict(config)

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def forward(self, x):
        x = self.stem(x)
        for stage in self.stages:
            x = stage(x)
        return self.head(x)

    def groupable_layers(self, stage: int) -> list[tuple[str, nn.Module]]:
        """(name, module) pairs of stage ``stage`` (1-based) groupable layers."""
        return groupable_named_modules(self.stages[stage - 1])

    def stage_shapes(self) -> list[list[tuple[str, tuple[int, ...]]]]:
        """Per-stage (layer name, weight shape) lists, matching mask layout."""
        return [
            [(n, tuple(m.weight.shape)) for n, m in self.groupable_layers(i)]
            for i in range(1, self.num_stages + 1)
        ]

    def make_head(self) -> nn.Module:
        """Fresh, independently initialized classifier head."""
        return _build_head(self.config)

    def example_input(self, batch: int = 1) -> torch.Tensor:
        return torch.zeros(batch, *self.config["input_shape"])


def _init_conv_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def _build_head(config: dict) -> nn.Module:
    kind = config["head"]
    if kind["type"] == "pool_fc":
        return PoolingHead(kind["in_ch"], config["num_classes"])
    if kind["type"] == "fc":
        return nn.Linear(kind["in_features"], config["num_classes"])
    raise ConfigError(f"unknown head type {kind['type']!r}")


def _resnet_backbone(config: dict) -> StagedBackbone:
    widths = config["stage_widths"]
    strides = config["stage_strides"]
    blocks = config["blocks_per_stage"]
    in_ch = config["input_shape"][0]
    # CIFAR-scale stem: 3x3 stride-1 convolution, no max pooling.
    stem_ch = config["stem_width"]
    stem = nn.Sequential(
        nn.Conv2d(in_ch, stem_ch, 3, stride=1, padding=1, bias=False),
        nn.BatchNorm2d(stem_ch),
        nn.ReLU(inplace=True),
    )
    stages = []
    prev = stem_ch
    for width, stride in zip(widths, strides):
        layer_blocks = []
        for b in range(blocks):
            layer_blocks.append(BasicBlock(prev, width, stride if b == 0 else 1))
            prev = width
        stages.append(nn.Sequential(*layer_blocks))
    head = _build_head(config)
    model = StagedBackbone(stem, stages, head, config)
    _init_conv_weights(model)
    return model


class _StageMlp(nn.Sequential):
    def __init__(self, in_features: int, out_features: int):
        super().__init__(GroupableLinear(in_features, out_features), nn.Tanh())


def _mlp_backbone(config: dict) -> StagedBackbone:
    widths = config["stage_widths"]
    in_features = config["input_shape"][0]
    stem = nn.Sequential(nn.Linear(in_features, widths[0]), nn.Tanh())
    stages = []
    prev = widths[0]
    for w in widths:
        stages.append(_StageMlp(prev, w))
        prev = w
    head = _build_head(config)
    return StagedBackbone(stem, stages, head, config)


def build_backbone(
    arch: str,
    num_classes: int = 10,
    width: int | None = None,
    blocks_per_stage: int | None = None,
    widen: int | None = None,
    num_stages: int | None = None,
    in_channels: int = 3,
    input_hw: tuple[int, int] = (32, 32),
) -> StagedBackbone:
    """Construct a staged backbone by architecture name.

    small-resnet: 4 stages of narrow residual blocks (desk-scale default).
    mid-resnet:   4 stages x 2 blocks at standard widths.
    wide-resnet-like: 3 stages with a width multiplier.
    toy-mlp:      tanh MLP stages, used for closed-form and gradient oracles.
    """
    if arch == "toy-mlp":
        w = width or 8
        k = num_stages or 2
        config = {
            "arch": arch,
            "num_classes": num_classes,
            "input_shape": [in_channels],
            "stage_widths": [w] * k,
            "head": {"type": "fc", "in_features": w},
        }
        return _mlp_backbone(config)

    if arch == "small-resnet":
        base = width or 16
        blocks = blocks_per_stage or 1
        widths = [base, 2 * base, 4 * base, 8 * base]
        strides = [1, 2, 2, 2]
    elif arch == "mid-resnet":
        base = width or 64
        blocks = blocks_per_stage or 2
        widths = [base, 2 * base, 4 * base, 8 * base]
        strides = [1, 2, 2, 2]
    elif arch == "wide-resnet-like":
        k = widen or 2
        blocks = blocks_per_stage or 2
        widths = [16 * k, 32 * k, 64 * k]
        strides = [1, 2, 2]
    else:
        raise ConfigError(f"unknown backbone architecture {arch!r}")

    config = {
        "arch": arch,
        "num_classes": num_classes,
        "input_shape": [in_channels, *input_hw],
        "stage_widths": widths,
        "stage_strides": strides,
        "blocks_per_stage": blocks,
        "stem_width": widths[0],
        "head": {"type": "pool_fc", "in_ch": widths[-1]},
    }
    return _resnet_backbone(config)


def rebuild_backbone(config: dict) -> StagedBackbone:
    """Reconstruct a backbone from its recorded config (for checkpoints)."""
    if config["arch"] == "toy-mlp":
        return _mlp_backbone(config)
    return _resnet_backbone(config)
