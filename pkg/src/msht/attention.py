"""Attention modules used inside the focus blocks.

The default is the parameter-free energy attention (per-neuron importance
from channel-slice statistics); squeeze-excitation and CBAM gates are the
swap-in alternatives for ablations.
"""
from __future__ import annotations

import torch
import torch.nn as nn

ATTENTION_VARIANTS = ("simam", "se", "cbam", "none")


def simam(x: torch.Tensor, e_lambda: float = 1e-4) -> torch.Tensor:
    """Energy-based reweighting of a batch x C x H x W map, shape preserved.

    Per channel slice: d = (x - mean)^2, v = sum(d) / (H*W - 1),
    e_inv = d / (4 * (v + lambda)) + 0.5, output = x * sigmoid(e_inv).
    """
    if x.dim() != 4:
        raise ValueError(f"expected a batch x C x H x W tensor, got shape {tuple(x.shape)}")
    height, width = x.shape[-2:]
    n = height * width - 1
    if n <= 0:
        raise ValueError("spatial size must be at least 2 pixels (variance divisor H*W - 1 is zero)")
    d = (x - x.mean(dim=(2, 3), keepdim=True)).pow(2)
    v = d.sum(dim=(2, 3), keepdim=True) / n
    e_inv = d / (4 * (v + e_lambda)) + 0.5
    return x * torch.sigmoid(e_inv)


class SimAM(nn.Module):
    """Parameter-free attention; `e_lambda` regularizes the variance term."""

    def __init__(self, e_lambda: float = 1e-4):
        super().__init__()
        if e_lambda <= 0:
            raise ValueError("e_lambda must be positive")
        self.e_lambda = e_lambda

    def forward(self, x):
        return simam(x, self.e_lambda)


class SEBlock(nn.Module):
    """Channel gate: global average pool -> bottleneck MLP -> sigmoid scale."""

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        if channels < reduction:
            raise ValueError(f"channel count {channels} below reduction ratio {reduction}")
        self.fc1 = nn.Linear(channels, channels // reduction)
        self.fc2 = nn.Linear(channels // reduction, channels)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        batch, channels = x.shape[:2]
        squeezed = x.mean(dim=(2, 3))
        gate = torch.sigmoid(self.fc2(self.relu(self.fc1(squeezed))))
        return x * gate.view(batch, channels, 1, 1)


class CBAMBlock(nn.Module):
    """Channel gate (shared MLP over avg+max pooled vectors) followed by a
    7x7 spatial gate over the channel-wise avg/max maps."""

    def __init__(self, channels: int, reduction: int = 16, spatial_kernel: int = 7):
        super().__init__()
        if channels < reduction:
            raise ValueError(f"channel count {channels} below reduction ratio {reduction}")
        self.fc1 = nn.Linear(channels, channels // reduction)
        self.fc2 = nn.Linear(channels // reduction, channels)
        self.relu = nn.ReLU(inplace=True)
        self.spatial = nn.Conv2d(2, 1, kernel_size=spatial_kernel, padding=spatial_kernel // 2)

    def forward(self, x):
        batch, channels = x.shape[:2]
        avg_vec = x.mean(dim=(2, 3))
        max_vec = x.amax(dim=(2, 3))
        channel_gate = torch.sigmoid(
            self.fc2(self.relu(self.fc1(avg_vec))) + self.fc2(self.relu(self.fc1(max_vec))))
        x = x * channel_gate.view(batch, channels, 1, 1)

        avg_map = x.mean(dim=1, keepdim=True)
        max_map = x.amax(dim=1, keepdim=True)
        spatial_gate = torch.sigmoid(self.spatial(torch.cat([avg_map, max_map], dim=1)))
        return x * spatial_gate


def build_attention(variant: str, channels: int, e_lambda: float = 1e-4) -> nn.Module:
    if variant == "simam":
        return SimAM(e_lambda)
    if variant == "se":
        return SEBlock(channels)
    if variant == "cbam":
        return CBAMBlock(channels)
    if variant == "none":
        return nn.Identity()
    raise ValueError(f"unknown attention variant {variant!r}; valid: {', '.join(ATTENTION_VARIANTS)}")
