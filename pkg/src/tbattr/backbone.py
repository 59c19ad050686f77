"""Residual multi-scale backbone and feature pyramid merging.

Stage outputs C2..C5 sit at strides 4, 8, 16, 32 relative to the input; the
merged pyramid P2..P5 shares a single channel count.  Normalization is
GroupNorm throughout so behaviour does not depend on batch composition.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import MissingLevel, ShapeError

STAGE_LEVELS = (2, 3, 4, 5)


@dataclass
class FeaturePyramid:
    """Ordered per-level feature maps; stride at level l is 2**l."""

    levels: dict = field(default_factory=dict)

    def __getitem__(self, level):
        if level not in self.levels:
            raise MissingLevel(f"pyramid level {level} missing")
        return self.levels[level]

    def __contains__(self, level):
        return level in self.levels

    def items(self):
        return sorted(self.levels.items())

    @staticmethod
    def stride(level):
        return 2**level

    @property
    def channels(self):
        return {level: t.shape[1] for level, t in self.levels.items()}


def _norm(channels):
    for groups in (8, 4, 2, 1):
        if channels % groups == 0:
            return nn.GroupNorm(groups, channels)
    return nn.GroupNorm(1, channels)


class BasicBlock(nn.Module):
    def __init__(self, in_channels, out_channels, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1)
        self.norm1 = _norm(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.norm2 = _norm(out_channels)
        if stride != 1 or in_channels != out_channels:
            self.skip = nn.Conv2d(in_channels, out_channels, 1, stride=stride)
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.relu(h + self.skip(x))


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, in_channels, mid_channels, stride=1):
        super().__init__()
        out_channels = mid_channels * self.expansion
        self.conv1 = nn.Conv2d(in_channels, mid_channels, 1)
        self.norm1 = _norm(mid_channels)
        self.conv2 = nn.Conv2d(mid_channels, mid_channels, 3, stride=stride, padding=1)
        self.norm2 = _norm(mid_channels)
        self.conv3 = nn.Conv2d(mid_channels, out_channels, 1)
        self.norm3 = _norm(out_channels)
        if stride != 1 or in_channels != out_channels:
            self.skip = nn.Conv2d(in_channels, out_channels, 1, stride=stride)
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        h = F.relu(self.norm1(self.conv1(x)))
        h = F.relu(self.norm2(self.conv2(h)))
        h = self.norm3(self.conv3(h))
        return F.relu(h + self.skip(x))


class Backbone(nn.Module):
    """Configurable residual feature extractor over single-channel images.

    preset "tiny" uses one basic block per stage at widths base * (1,2,4,8);
    "resnet50_like" mirrors the reference 3-4-6-3 bottleneck layout.
    """

    def __init__(self, preset="tiny", base_channels=None, in_channels=1):
        super().__init__()
        self.preset = preset
        if preset == "tiny":
            base = base_channels or 8
            self.stem = nn.Sequential(
                nn.Conv2d(in_channels, base, 3, stride=2, padding=1),
                _norm(base),
                nn.ReLU(),
            )
            widths = [base, base * 2, base * 4, base * 8]
            stages = []
            prev = base
            for width in widths:
                stages.append(BasicBlock(prev, width, stride=2))
                prev = width
            self.stages = nn.ModuleList(stages)
            self.out_channels = dict(zip(STAGE_LEVELS, widths))
        elif preset == "resnet50_like":
            base = base_channels or 64
            self.stem = nn.Sequential(
                nn.Conv2d(in_channels, base, 7, stride=2, padding=3),
                _norm(base),
                nn.ReLU(),
                nn.MaxPool2d(3, stride=2, padding=1),
            )
            mids = [base, base * 2, base * 4, base * 8]
            depths = [3, 4, 6, 3]
            stages = []
            prev = base
            for i, (mid, depth) in enumerate(zip(mids, depths)):
                blocks = [Bottleneck(prev, mid, stride=1 if i == 0 else 2)]
                prev = mid * Bottleneck.expansion
                blocks += [Bottleneck(prev, mid) for _ in range(depth - 1)]
                stages.append(nn.Sequential(*blocks))
            self.stages = nn.ModuleList(stages)
            self.out_channels = {
                level: mid * Bottleneck.expansion
                for level, mid in zip(STAGE_LEVELS, mids)
            }
        else:
            raise ValueError(f"unknown backbone preset: {preset}")

    def forward(self, images):
        """Map (B, 1, H, W) images to raw stage features C2..C5."""
        if images.dim() != 4:
            raise ShapeError(f"expected (B, C, H, W) input, got {tuple(images.shape)}")
        h, w = images.shape[-2:]
        if h % 32 != 0 or w % 32 != 0:
            raise ShapeError(f"input size {h}x{w} not divisible by 32")
        x = self.stem(images)
        levels = {}
        for level, stage in zip(STAGE_LEVELS, self.stages):
            x = stage(x)
            levels[level] = x
        return FeaturePyramid(levels)


class FeaturePyramidNetwork(nn.Module):
    """Top-down merge: lateral 1x1 projections plus nearest 2x upsampling."""

    def __init__(self, in_channels, out_channels=64):
        super().__init__()
        self.out_channels = out_channels
        self.laterals = nn.ModuleDict(
            {str(level): nn.Conv2d(in_channels[level], out_channels, 1) for level in STAGE_LEVELS}
        )

    def forward(self, stages):
        for level in STAGE_LEVELS:
            if level not in stages:
                raise MissingLevel(f"stage C{level} missing from backbone output")
        merged = {}
        top = None
        for level in reversed(STAGE_LEVELS):
            lateral = self.laterals[str(level)](stages[level])
            if top is not None:
                lateral = lateral + F.interpolate(top, scale_factor=2, mode="nearest")
            merged[level] = lateral
            top = lateral
        return FeaturePyramid(merged)
