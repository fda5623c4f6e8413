"""Staged convolutional backbone with a feature tap after every stage.

The layout follows the classic bottleneck-residual design: a stride-4 stem
followed by four stages, each stage halving the edge after the first.
For an input edge of 384 the full preset produces maps of
256x96x96, 512x48x48, 1024x24x24 and 2048x12x12.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn

from .archive import LoadReport, load_state_arrays

STEM_STRIDE = 4
STAGE_COUNT = 4


class StageFeatures(NamedTuple):
    """The four per-stage feature maps, shallowest first."""

    stage1: torch.Tensor
    stage2: torch.Tensor
    stage3: torch.Tensor
    stage4: torch.Tensor


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 3
    stage_channels: tuple[int, ...] = (256, 512, 1024, 2048)
    stage_edge_sizes: tuple[int, ...] = (96, 48, 24, 12)
    block_counts: tuple[int, ...] = (3, 4, 6, 3)

    def __post_init__(self):
        if self.in_channels < 1:
            raise ValueError("in_channels must be positive")
        for name, values in (("stage_channels", self.stage_channels),
                             ("stage_edge_sizes", self.stage_edge_sizes),
                             ("block_counts", self.block_counts)):
            if len(values) != STAGE_COUNT:
                raise ValueError(f"{name} must have exactly {STAGE_COUNT} entries, got {len(values)}")
            if any(int(v) != v or v < 1 for v in values):
                raise ValueError(f"{name} entries must be positive integers: {values}")
        for left, right in zip(self.stage_edge_sizes, self.stage_edge_sizes[1:]):
            if left != 2 * right:
                raise ValueError(f"stage edges must halve at each stage boundary, got {self.stage_edge_sizes}")
        if self.input_edge % 32 != 0:
            raise ValueError(f"input edge {self.input_edge} not divisible by 32")
        # bottleneck blocks squeeze to a quarter of the stage width
        if any(c % 4 for c in self.stage_channels):
            raise ValueError(f"stage_channels must be divisible by 4: {self.stage_channels}")

    @property
    def input_edge(self) -> int:
        return self.stage_edge_sizes[0] * STEM_STRIDE

    @classmethod
    def from_input_edge(cls, input_edge: int,
                        stage_channels=(256, 512, 1024, 2048),
                        block_counts=(3, 4, 6, 3),
                        in_channels: int = 3) -> "BackboneConfig":
        if input_edge % 32 != 0:
            raise ValueError(f"input edge {input_edge} not divisible by 32")
        edges = tuple(input_edge // (STEM_STRIDE * 2 ** l) for l in range(STAGE_COUNT))
        return cls(in_channels=in_channels, stage_channels=tuple(stage_channels),
                   stage_edge_sizes=edges, block_counts=tuple(block_counts))


def full_backbone_config() -> BackboneConfig:
    """Full-scale preset: 384x384 input, maps 256x96x96 down to 2048x12x12."""
    return BackboneConfig()


def tiny_backbone_config() -> BackboneConfig:
    """Desk-scale preset: 64x64 input, one block per stage."""
    return BackboneConfig.from_input_edge(64, stage_channels=(16, 32, 64, 128), block_counts=(1, 1, 1, 1))


class Bottleneck(nn.Module):
    """1x1 -> 3x3 -> 1x1 residual block; squeeze width is out_channels / 4."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        width = out_channels // 4
        self.conv1 = nn.Conv2d(in_channels, width, kernel_size=1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, width, kernel_size=3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(width)
        self.conv3 = nn.Conv2d(width, out_channels, kernel_size=1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_channels)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or in_channels != out_channels:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, kernel_size=1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )
        else:
            self.downsample = None

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + identity)


class StagedBackbone(nn.Module):
    """Bottleneck-residual backbone whose forward returns all four stage maps.

    The stage taps are the post-activation outputs of the last block of each
    stage; the mainstream computation is not duplicated.
    """

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        stem_channels = config.stage_channels[0] // 4
        self.stem = nn.Sequential(
            nn.Conv2d(config.in_channels, stem_channels, kernel_size=7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(stem_channels),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(kernel_size=3, stride=2, padding=1),
        )
        stages = []
        in_channels = stem_channels
        for index, (channels, blocks) in enumerate(zip(config.stage_channels, config.block_counts)):
            stride = 1 if index == 0 else 2
            layers = [Bottleneck(in_channels, channels, stride=stride)]
            layers += [Bottleneck(channels, channels) for _ in range(blocks - 1)]
            stages.append(nn.Sequential(*layers))
            in_channels = channels
        self.stages = nn.ModuleList(stages)

    def forward(self, images: torch.Tensor) -> StageFeatures:
        expected = (self.config.in_channels, self.config.input_edge, self.config.input_edge)
        if images.dim() != 4 or tuple(images.shape[1:]) != expected:
            actual = tuple(images.shape[1:]) if images.dim() == 4 else tuple(images.shape)
            raise ValueError(f"backbone expected input of shape batch x {expected}, got batch x {actual}")
        x = self.stem(images)
        maps = []
        for stage in self.stages:
            x = stage(x)
            maps.append(x)
        return StageFeatures(*maps)

    def stage_module(self, stage_index: int) -> nn.Module:
        """The stage whose output is the tap for `stage_index` (1-based)."""
        if not 1 <= stage_index <= STAGE_COUNT:
            raise ValueError(f"stage_index must be in 1..{STAGE_COUNT}, got {stage_index}")
        return self.stages[stage_index - 1]


def build_backbone(config: BackboneConfig, init_seed: int) -> StagedBackbone:
    """Construct a backbone with deterministic fan-in-scaled initialization."""
    torch.manual_seed(init_seed)
    return StagedBackbone(config)


def load_pretrained_backbone(backbone: StagedBackbone, arrays: dict) -> LoadReport:
    """Replace backbone parameters with archive entries of matching name/shape.

    Returns a report of loaded/missing/unexpected names; raises on shape
    conflicts, listing the offending parameter names.
    """
    return load_state_arrays(backbone, arrays)
