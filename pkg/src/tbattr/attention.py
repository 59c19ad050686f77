"""Cross-attention feature fusion.

Three pieces build on one multi-head cross-attention (MCA) primitive:

* MCA itself: scaled dot-product attention between two feature maps, with
  keys/values average-pool downsampled by a per-level ratio, heads of a fixed
  dimension, and a 1x1 output projection aggregating the heads.
* attribute-attribute attention: every attribute map queries a learned 1x1
  projection of the channel-wise concatenation of all attribute maps.
* attribute-TB attention: attribute maps are pooled, projected, and scored
  against the pooled TB feature; the similarity-weighted sum of attribute
  maps queries the TB map, and the normalized result is added residually.

Queries are never downsampled, so output spatial dims always match the
query map.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeError


def kv_downsample(x, ratio):
    """Average-pool spatial dims by `ratio` (window and stride both ratio)."""
    if ratio < 1:
        raise ShapeError(f"downsample ratio must be >= 1, got {ratio}")
    if ratio == 1:
        return x
    h, w = x.shape[-2:]
    if h % ratio != 0 or w % ratio != 0:
        raise ShapeError(f"spatial dims {h}x{w} not divisible by ratio {ratio}")
    return F.avg_pool2d(x, kernel_size=ratio, stride=ratio)


def effective_downsample(ratio, h, w):
    """Clamp a downsample ratio so the pooled map keeps at least one cell
    and the window divides both spatial dims."""
    s = max(1, min(ratio, h, w))
    while h % s != 0 or w % s != 0:
        s -= 1
    return s


def downsample_schedule(base, level):
    """Per-level ratio: `base` at level 2, halved per level above."""
    return max(1, base // (2 ** (level - 2)))


def cross_attention_head(q_map, kv_map):
    """Single-head scaled dot-product attention between two projected maps.

    `q_map` is (d, H, W) and `kv_map` (d, H', W'), both already projected to
    the head dimension; rows are formed row-major.  Returns the (H*W, d)
    attended sequence, softmax taken over the key axis.
    """
    if q_map.dim() != 3 or kv_map.dim() != 3:
        raise ShapeError("expected (d, H, W) maps")
    d = q_map.shape[0]
    if kv_map.shape[0] != d:
        raise ShapeError(f"head dims differ: {d} vs {kv_map.shape[0]}")
    q = q_map.reshape(d, -1).t()
    kv = kv_map.reshape(d, -1).t()
    logits = q @ kv.t() / d**0.5
    return torch.softmax(logits, dim=-1) @ kv


class MultiHeadCrossAttention(nn.Module):
    """Scaled dot-product cross-attention between two feature maps.

    The query map is projected per head by a 1x1 convolution; the key/value
    map is average-pool downsampled (pooling commutes with the pointwise
    projections, so it is applied first) and projected likewise.  Head
    outputs are concatenated along channels and aggregated by the 1x1 output
    projection.  The head count is out_channels / head_dim; the output map
    keeps the query's spatial dims and the key/value side's channel count.
    """

    def __init__(self, q_channels, kv_channels=None, head_dim=8, downsample=1):
        super().__init__()
        kv_channels = q_channels if kv_channels is None else kv_channels
        if kv_channels % head_dim != 0:
            raise ConfigError(
                f"kv_channels {kv_channels} not divisible by head_dim {head_dim}"
            )
        self.head_dim = head_dim
        self.n_heads = kv_channels // head_dim
        self.downsample = downsample
        width = self.n_heads * head_dim
        self.q_proj = nn.Conv2d(q_channels, width, 1)
        self.k_proj = nn.Conv2d(kv_channels, width, 1)
        self.v_proj = nn.Conv2d(kv_channels, width, 1)
        self.out_proj = nn.Conv2d(width, kv_channels, 1)
        nn.init.zeros_(self.out_proj.bias)

    def forward(self, x, y):
        if x.dim() != 4 or y.dim() != 4:
            raise ShapeError("expected (B, C, H, W) inputs")
        if x.shape[0] != y.shape[0]:
            raise ShapeError("batch sizes differ")
        b, _, h, w = x.shape
        s = effective_downsample(self.downsample, *y.shape[-2:])
        y = kv_downsample(y, s)
        hk, wk = y.shape[-2:]
        n, nk, heads, d = h * w, hk * wk, self.n_heads, self.head_dim

        q = self.q_proj(x).reshape(b, heads, d, n).transpose(2, 3)
        k = self.k_proj(y).reshape(b, heads, d, nk).transpose(2, 3)
        v = self.v_proj(y).reshape(b, heads, d, nk).transpose(2, 3)
        attn = torch.softmax(q @ k.transpose(2, 3) / d**0.5, dim=-1)
        out = (attn @ v).transpose(2, 3).reshape(b, heads * d, h, w)
        return self.out_proj(out)


class ChannelLayerNorm(nn.Module):
    """Layer normalization over the channel axis at each spatial location."""

    def __init__(self, channels, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        moved = x.movedim(1, -1)
        normed = F.layer_norm(moved, (x.shape[1],), self.weight, self.bias, self.eps)
        return normed.movedim(-1, 1)


class AttrAttrAttention(nn.Module):
    """Cross-attention among the attribute maps of one pyramid level.

    All maps are concatenated channel-wise and projected down to one map's
    channel count; each attribute map then queries that shared projection
    through a single MCA whose weights are shared across attributes.
    """

    def __init__(self, n_attributes, channels, head_dim=8, downsample=1):
        super().__init__()
        self.n_attributes = n_attributes
        self.mix = nn.Conv2d(n_attributes * channels, channels, 1)
        self.mca = MultiHeadCrossAttention(
            channels, channels, head_dim=head_dim, downsample=downsample
        )

    def forward(self, features):
        if len(features) != self.n_attributes:
            raise ShapeError(
                f"expected {self.n_attributes} attribute maps, got {len(features)}"
            )
        shape = features[0].shape
        if any(f.shape != shape for f in features):
            raise ShapeError("attribute maps must share one shape")
        y = self.mix(torch.cat(features, dim=1))
        return [self.mca(f, y) for f in features]


@dataclass
class SimilarityWeights:
    """Pooled attribute vectors, the TB vector, and their dot products."""

    attribute_vectors: torch.Tensor  # (B, N_a, D)
    tb_vector: torch.Tensor  # (B, D)
    weights: torch.Tensor  # (B, N_a)


def similarity_scores(attribute_vectors, tb_vector):
    """Dot product of each attribute vector with the TB vector."""
    if attribute_vectors.shape[-1] != tb_vector.shape[-1]:
        raise ShapeError(
            f"vector dims differ: {attribute_vectors.shape[-1]} vs {tb_vector.shape[-1]}"
        )
    return (attribute_vectors * tb_vector.unsqueeze(-2)).sum(-1)


class AttrTbAttention(nn.Module):
    """Refine the TB feature map with a similarity-weighted attribute prompt.

    Attribute maps and the TB map are pooled and linearly projected to a
    shared dimension; each attribute's dot-product score with the TB vector
    weights its map in the aggregate query.  The attended result is
    channel-layer-normalized and added to the TB map, whose shape is always
    preserved.
    """

    def __init__(
        self,
        attr_channels,
        tb_channels,
        proj_dim=16,
        head_dim=8,
        downsample=1,
        normalize_weights=False,
    ):
        super().__init__()
        self.normalize_weights = normalize_weights
        self.attr_proj = nn.Linear(attr_channels, proj_dim)
        self.tb_proj = nn.Linear(tb_channels, proj_dim)
        self.mca = MultiHeadCrossAttention(
            attr_channels, tb_channels, head_dim=head_dim, downsample=downsample
        )
        self.norm = ChannelLayerNorm(tb_channels)

    def similarity_weights(self, features, tb_feature):
        pooled = torch.stack([f.mean(dim=(2, 3)) for f in features], dim=1)
        vectors = self.attr_proj(pooled)
        tb_vector = self.tb_proj(tb_feature.mean(dim=(2, 3)))
        weights = similarity_scores(vectors, tb_vector)
        if self.normalize_weights:
            weights = torch.softmax(weights, dim=-1)
        return SimilarityWeights(vectors, tb_vector, weights)

    def aggregate_query(self, features, tb_feature):
        weights = self.similarity_weights(features, tb_feature).weights
        stacked = torch.stack(features, dim=1)  # (B, N_a, C_a, H, W)
        return (weights[:, :, None, None, None] * stacked).sum(dim=1)

    def forward(self, features, tb_feature):
        if features[0].shape[-2:] != tb_feature.shape[-2:]:
            raise ShapeError("attribute and TB maps must share spatial dims")
        x = self.aggregate_query(features, tb_feature)
        return tb_feature + self.norm(self.mca(x, tb_feature))
