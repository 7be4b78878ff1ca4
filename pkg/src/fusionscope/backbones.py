"""Global (ResNet-style) and local (BagNet-style) convolutional feature extractors.

Both extractors return the activation map produced by their fourth stage. The
global extractor sees the whole image; every output position of the local
extractor depends on at most ``local_receptive_field`` x ``local_receptive_field``
input pixels.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn


class BackboneKind(str, enum.Enum):
    GLOBAL_RESNET_STYLE = "GLOBAL_RESNET_STYLE"
    LOCAL_BAGNET_STYLE = "LOCAL_BAGNET_STYLE"


EXPANSION = 4
GLOBAL_STRIDES = (1, 2, 2, 2)
LOCAL_STRIDES = (2, 2, 2, 2)


def local_receptive_field(strides: Sequence[int] = LOCAL_STRIDES) -> int:
    """Receptive field of the local extractor: 1x1 + 3x3 stem, one 3x3 conv per stage."""
    rf, jump = 3, 1
    for s in strides:
        rf += 2 * jump
        jump *= s
    return rf


class Branch(str, enum.Enum):
    GLOBAL = "GLOBAL"
    LOCAL = "LOCAL"
    FUSED = "FUSED"


@dataclass
class BackboneConfig:
    kind: BackboneKind
    stage_channels: list[int] = field(default_factory=lambda: [256, 512, 1024, 2048])
    blocks_per_stage: list[int] = field(default_factory=lambda: [3, 4, 6, 3])
    local_receptive_field: int = 33
    stem_channels: int = 64
    pretrained_weights: Optional[str] = None
    # per-stage strides; None picks the reference layout for the kind
    strides: Optional[list[int]] = None

    def __post_init__(self):
        self.kind = BackboneKind(self.kind)
        if self.strides is None:
            self.strides = list(GLOBAL_STRIDES if self.kind is BackboneKind.GLOBAL_RESNET_STYLE else LOCAL_STRIDES)
        self.strides = [int(s) for s in self.strides]
        if len(self.strides) != 4 or any(s not in (1, 2) for s in self.strides):
            raise ValueError(f"strides must be 4 values from {{1, 2}}, got {self.strides}")
        if self.kind is BackboneKind.LOCAL_BAGNET_STYLE:
            achievable = local_receptive_field(self.strides)
            if self.local_receptive_field != achievable:
                raise ValueError(f"local_receptive_field={self.local_receptive_field} does not match strides "
                                 f"{self.strides}, which yield {achievable}")
        if len(self.stage_channels) != 4 or len(self.blocks_per_stage) != 4:
            raise ValueError("stage_channels and blocks_per_stage need exactly 4 entries")
        if any(b >= a for a, b in zip(self.stage_channels[1:], self.stage_channels[:-1])):
            raise ValueError(f"stage_channels must be strictly increasing, got {self.stage_channels}")
        if any(c % 4 for c in self.stage_channels):
            raise ValueError("stage_channels must be divisible by the bottleneck expansion (4)")
        if any(b < 1 for b in self.blocks_per_stage):
            raise ValueError("every stage needs at least one block")

    @property
    def out_channels(self) -> int:
        return self.stage_channels[-1]

    @property
    def total_stride(self) -> int:
        stem = 4 if self.kind is BackboneKind.GLOBAL_RESNET_STYLE else 1
        return stem * int(np.prod(self.strides))


def reference_global_config(**overrides) -> BackboneConfig:
    """ResNet50 layout: 3-4-6-3 bottlenecks ending in 2048 channels."""
    return BackboneConfig(kind=BackboneKind.GLOBAL_RESNET_STYLE, **overrides)


def reference_local_config(**overrides) -> BackboneConfig:
    """BagNet33 layout: same stage widths, 33 px receptive field."""
    return BackboneConfig(kind=BackboneKind.LOCAL_BAGNET_STYLE, **overrides)


def tiny_config(kind: BackboneKind | str, **overrides) -> BackboneConfig:
    params = dict(stage_channels=[8, 16, 32, 64], blocks_per_stage=[1, 1, 1, 1], stem_channels=8)
    params.update(overrides)
    return BackboneConfig(kind=BackboneKind(kind), **params)


class Bottleneck(nn.Module):
    """1x1 -> kxk -> 1x1 bottleneck with identity or projected shortcut.

    ``kernel_size`` is 3 for ResNet blocks and for the first block of each
    BagNet stage, 1 for the remaining BagNet blocks.
    """

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, kernel_size: int = 3):
        super().__init__()
        width = out_ch // EXPANSION
        pad = kernel_size // 2
        self.conv1 = nn.Conv2d(in_ch, width, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, width, kernel_size, stride=stride, padding=pad, bias=False)
        self.bn2 = nn.BatchNorm2d(width)
        self.conv3 = nn.Conv2d(width, out_ch, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + identity)


def _make_stage(in_ch, out_ch, blocks, stride, first_kernel, rest_kernel):
    layers = [Bottleneck(in_ch, out_ch, stride=stride, kernel_size=first_kernel)]
    for _ in range(blocks - 1):
        layers.append(Bottleneck(out_ch, out_ch, stride=1, kernel_size=rest_kernel))
    return nn.Sequential(*layers)


class FeatureExtractor(nn.Module):
    """Stem followed by four bottleneck stages; ``forward`` returns the stage-4 map."""

    def __init__(self, config: BackboneConfig, stem: nn.Module, stages: Sequence[nn.Module]):
        super().__init__()
        self.config = config
        self.branch = Branch.GLOBAL if config.kind is BackboneKind.GLOBAL_RESNET_STYLE else Branch.LOCAL
        self.stem = stem
        self.layer1, self.layer2, self.layer3, self.layer4 = stages

    @property
    def out_channels(self) -> int:
        return self.config.out_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected a (B, 3, H, W) batch, got {tuple(x.shape)}")
        x = self.stem(x)
        x = self.layer1(x)
        x = self.layer2(x)
        x = self.layer3(x)
        return self.layer4(x)

    def output_hw(self, height: int, width: int) -> tuple[int, int]:
        return output_hw(self.config, height, width)


def _conv_out(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def output_hw(config: BackboneConfig, height: int, width: int) -> tuple[int, int]:
    """Spatial size of the stage-4 map from stride arithmetic alone."""

    def one(n):
        if config.kind is BackboneKind.GLOBAL_RESNET_STYLE:
            n = _conv_out(n, 7, 2, 3)
            n = _conv_out(n, 3, 2, 1)
            for s in config.strides:
                n = _conv_out(n, 3, s, 1)
        else:
            for s in config.strides:
                n = _conv_out(n, 3, s, 1)
        return n

    return one(height), one(width)


def _init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def load_weights(extractor: nn.Module, path: str | Path) -> None:
    """Copy tensors from a flat ``{name: tensor}`` archive into ``extractor`` by name.

    Keys follow ``extractor.state_dict()`` naming (``stem.0.weight``,
    ``layer1.0.conv1.weight``, ...). Every key of the extractor must be present
    with a matching shape; extra keys in the archive are ignored.
    """
    archive = torch.load(path, map_location="cpu", weights_only=True)
    if "state_dict" in archive and isinstance(archive["state_dict"], dict):
        archive = archive["state_dict"]
    own = extractor.state_dict()
    missing = [k for k in own if k not in archive]
    if missing:
        raise ValueError(f"weight archive {path} lacks {len(missing)} keys, e.g. {missing[:3]}")
    for key, tensor in own.items():
        if tuple(archive[key].shape) != tuple(tensor.shape):
            raise ValueError(
                f"shape mismatch for {key}: archive {tuple(archive[key].shape)} vs model {tuple(tensor.shape)}"
            )
    extractor.load_state_dict({k: archive[k] for k in own})


def build_global_extractor(config: BackboneConfig) -> FeatureExtractor:
    if config.kind is not BackboneKind.GLOBAL_RESNET_STYLE:
        raise ValueError(f"global extractor needs kind GLOBAL_RESNET_STYLE, got {config.kind.value}")
    c0 = config.stem_channels
    stem = nn.Sequential(
        nn.Conv2d(3, c0, 7, stride=2, padding=3, bias=False),
        nn.BatchNorm2d(c0),
        nn.ReLU(inplace=True),
        nn.MaxPool2d(3, stride=2, padding=1),
    )
    stages, in_ch = [], c0
    for out_ch, blocks, stride in zip(config.stage_channels, config.blocks_per_stage, config.strides):
        stages.append(_make_stage(in_ch, out_ch, blocks, stride, 3, 3))
        in_ch = out_ch
    extractor = FeatureExtractor(config, stem, stages)
    _init_weights(extractor)
    if config.pretrained_weights:
        load_weights(extractor, config.pretrained_weights)
    return extractor


def build_local_extractor(config: BackboneConfig) -> FeatureExtractor:
    if config.kind is not BackboneKind.LOCAL_BAGNET_STYLE:
        raise ValueError(f"local extractor needs kind LOCAL_BAGNET_STYLE, got {config.kind.value}")
    c0 = config.stem_channels
    stem = nn.Sequential(
        nn.Conv2d(3, c0, 1, bias=False),
        nn.BatchNorm2d(c0),
        nn.ReLU(inplace=True),
        nn.Conv2d(c0, c0, 3, padding=1, bias=False),
        nn.BatchNorm2d(c0),
        nn.ReLU(inplace=True),
    )
    stages, in_ch = [], c0
    for out_ch, blocks, stride in zip(config.stage_channels, config.blocks_per_stage, config.strides):
        stages.append(_make_stage(in_ch, out_ch, blocks, stride, 3, 1))
        in_ch = out_ch
    extractor = FeatureExtractor(config, stem, stages)
    _init_weights(extractor)
    if config.pretrained_weights:
        load_weights(extractor, config.pretrained_weights)
    return extractor


def build_extractor(config: BackboneConfig) -> FeatureExtractor:
    if config.kind is BackboneKind.GLOBAL_RESNET_STYLE:
        return build_global_extractor(config)
    return build_local_extractor(config)


def extract_features(extractor: FeatureExtractor, batch: torch.Tensor) -> torch.Tensor:
    """Forward ``batch`` through ``extractor`` in whatever mode it is currently in."""
    if batch.dim() == 3:
        batch = batch.unsqueeze(0)
    return extractor(batch)
