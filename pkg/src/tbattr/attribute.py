"""Attribute feature branch.

Each backbone stage is projected to n_attributes * channels_per_attribute
channels, refined by two grouped convolutions (one group per attribute) with
a channel shuffle after the second, and split into one feature map per
attribute.  Global average pooling plus concatenation across the four scales
feeds a single affine classifier with elementwise logistic outputs.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .errors import MissingLevel, ShapeError

BCE_EPS = 1e-7


def channel_shuffle(x, groups):
    """Permute channels by the reshape-(g, n)-transpose-flatten rule.

    Accepts (C, H, W) or (B, C, H, W); values are untouched, only channel
    order changes.
    """
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    if x.dim() != 4:
        raise ShapeError(f"expected 3D or 4D tensor, got {x.dim()}D")
    b, c, h, w = x.shape
    if c % groups != 0:
        raise ShapeError(f"{c} channels not divisible by {groups} groups")
    x = x.reshape(b, groups, c // groups, h, w).transpose(1, 2).reshape(b, c, h, w)
    return x.squeeze(0) if squeeze else x


class AttributeBlock(nn.Module):
    """1x1 projection, two grouped convolutions, channel shuffle.

    Output channels come in n_attributes contiguous groups of
    channels_per_attribute each (taken after the shuffle).
    """

    def __init__(self, in_channels, n_attributes, channels_per_attribute, kernel_size=3):
        super().__init__()
        if n_attributes < 1 or channels_per_attribute < 1:
            raise ShapeError("n_attributes and channels_per_attribute must be >= 1")
        self.n_attributes = n_attributes
        self.channels_per_attribute = channels_per_attribute
        width = n_attributes * channels_per_attribute
        pad = kernel_size // 2
        self.proj = nn.Conv2d(in_channels, width, 1)
        self.norm0 = nn.GroupNorm(n_attributes, width)
        self.gconv1 = nn.Conv2d(width, width, kernel_size, padding=pad, groups=n_attributes)
        self.norm1 = nn.GroupNorm(n_attributes, width)
        self.gconv2 = nn.Conv2d(width, width, kernel_size, padding=pad, groups=n_attributes)
        self.norm2 = nn.GroupNorm(n_attributes, width)

    def forward(self, x):
        """Return the list of n_attributes feature maps for one stage."""
        h = F.relu(self.norm0(self.proj(x)))
        h = F.relu(self.norm1(self.gconv1(h)))
        h = channel_shuffle(self.gconv2(h), self.n_attributes)
        h = F.relu(self.norm2(h))
        return list(torch.split(h, self.channels_per_attribute, dim=1))


class AttributeProjection(nn.Module):
    """Ablation stand-in for AttributeBlock: the 1x1 projection alone."""

    def __init__(self, in_channels, n_attributes, channels_per_attribute):
        super().__init__()
        self.n_attributes = n_attributes
        self.channels_per_attribute = channels_per_attribute
        width = n_attributes * channels_per_attribute
        self.proj = nn.Conv2d(in_channels, width, 1)
        self.norm = nn.GroupNorm(n_attributes, width)

    def forward(self, x):
        h = F.relu(self.norm(self.proj(x)))
        return list(torch.split(h, self.channels_per_attribute, dim=1))


def fuse_attribute_scales(per_level, levels=(2, 3, 4, 5)):
    """GAP each level's stacked attribute maps, concatenate in level order.

    `per_level` maps pyramid level -> list of (B, C_a, H, W) maps; output is
    (B, len(levels) * C_a * N_a) with every requested level required.
    """
    segments = []
    for level in levels:
        if level not in per_level:
            raise MissingLevel(f"attribute features missing for level {level}")
        stacked = torch.cat(per_level[level], dim=1)
        segments.append(stacked.mean(dim=(2, 3)))
    return torch.cat(segments, dim=1)


class AttributeClassifier(nn.Module):
    """Single affine layer with logistic outputs over the fused vector."""

    def __init__(self, in_features, n_attributes):
        super().__init__()
        self.fc = nn.Linear(in_features, n_attributes)

    def forward(self, fused):
        if fused.shape[-1] != self.fc.in_features:
            raise ShapeError(
                f"fused vector length {fused.shape[-1]} != {self.fc.in_features}"
            )
        return torch.sigmoid(self.fc(fused))


def attribute_bce_loss(probabilities, labels, mask=None):
    """Binary cross-entropy, averaged over attributes and masked-in samples.

    `mask` is a per-sample boolean; masked-out samples contribute nothing.
    An empty effective batch yields exactly zero.
    """
    if probabilities.shape != labels.shape:
        raise ShapeError(
            f"probabilities {tuple(probabilities.shape)} vs labels {tuple(labels.shape)}"
        )
    p = probabilities.clamp(BCE_EPS, 1.0 - BCE_EPS)
    labels = labels.to(p.dtype)
    per_sample = -(labels * torch.log(p) + (1 - labels) * torch.log(1 - p)).mean(dim=-1)
    if mask is not None:
        if mask.shape[0] != per_sample.shape[0]:
            raise ShapeError("mask length does not match batch size")
        mask = mask.to(torch.bool)
        if not bool(mask.any()):
            return p.sum() * 0.0
        per_sample = per_sample[mask]
    return per_sample.mean()
