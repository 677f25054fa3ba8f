"""Query-guided refinement and the auxiliary mask head.

A small two-way Transformer refines the encoder bottleneck against a set of
per-class query vectors. The refined features feed the main decoder, while
the updated queries are multiplied against multi-scale features (a pyramid
pooling + top-down fusion of the three deepest encoder levels) to form the
auxiliary segmentation logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError


def sine_position_embedding(height, width, dim, device=None, dtype=None):
    """Fixed 2-D sinusoidal embedding, shape (height*width, dim)."""
    if dim % 4 != 0:
        raise ConfigError(f"sinusoidal embedding width must be divisible by 4, got {dim}")
    half = dim // 2
    freq = torch.arange(half // 2, device=device, dtype=dtype or torch.float32)
    inv = 1.0 / (10000.0 ** (2 * freq / half))
    ys = torch.arange(height, device=device, dtype=inv.dtype)[:, None] * inv
    xs = torch.arange(width, device=device, dtype=inv.dtype)[:, None] * inv
    emb_y = torch.cat([ys.sin(), ys.cos()], dim=1)  # (H, half)
    emb_x = torch.cat([xs.sin(), xs.cos()], dim=1)  # (W, half)
    grid = torch.cat([
        emb_y[:, None, :].expand(height, width, half),
        emb_x[None, :, :].expand(height, width, half),
    ], dim=-1)
    return grid.reshape(height * width, dim)


class _TwoWayLayer(nn.Module):
    """Query self-attention, query->feature cross-attention, query MLP, then
    feature->query cross-attention (post-norm residual blocks)."""

    def __init__(self, dim, num_heads, mlp_ratio=4):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(dim, num_heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_q2f = nn.MultiheadAttention(dim, num_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = dim * mlp_ratio
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        self.norm3 = nn.LayerNorm(dim)
        self.cross_f2q = nn.MultiheadAttention(dim, num_heads, batch_first=True)
        self.norm4 = nn.LayerNorm(dim)

    def forward(self, queries, feats, query_pos, feat_pos):
        q = queries if query_pos is None else queries + query_pos
        queries = self.norm1(queries + self.self_attn(q, q, queries, need_weights=False)[0])
        q = queries if query_pos is None else queries + query_pos
        k = feats + feat_pos
        queries = self.norm2(queries + self.cross_q2f(q, k, feats, need_weights=False)[0])
        queries = self.norm3(queries + self.mlp(queries))
        q = queries if query_pos is None else queries + query_pos
        feats = self.norm4(feats + self.cross_f2q(feats + feat_pos, q, queries,
                                                  need_weights=False)[0])
        return queries, feats


class TwoWayRefiner(nn.Module):
    """Refines bottleneck features and queries against each other.

    With layers=0 the module is an exact pass-through. Per-query positional
    embeddings are optional; without them the module is permutation
    equivariant along the query axis.
    """

    def __init__(self, dim, num_queries, layers=2, num_heads=8,
                 query_pos_embed=True):
        super().__init__()
        if layers < 0:
            raise ConfigError(f"layers must be >= 0, got {layers}")
        if dim % num_heads != 0:
            raise ConfigError(f"dim {dim} not divisible by {num_heads} heads")
        self.dim = dim
        self.layers = nn.ModuleList(
            _TwoWayLayer(dim, num_heads) for _ in range(layers))
        if query_pos_embed:
            self.query_pos = nn.Parameter(torch.empty(num_queries, dim))
            nn.init.trunc_normal_(self.query_pos, std=0.02)
        else:
            self.query_pos = None

    def forward(self, bottleneck, queries):
        # bottleneck: (B, C, H, W); queries: (B, Q, C)
        if queries.shape[-1] != bottleneck.shape[-3]:
            raise ConfigError(
                f"query width {queries.shape[-1]} != bottleneck channels "
                f"{bottleneck.shape[-3]}")
        if len(self.layers) == 0:
            return bottleneck, queries
        B, C, H, W = bottleneck.shape
        feats = bottleneck.flatten(2).transpose(1, 2)
        feat_pos = sine_position_embedding(
            H, W, C, device=feats.device, dtype=feats.dtype).unsqueeze(0)
        qpos = None if self.query_pos is None else self.query_pos.unsqueeze(0)
        for layer in self.layers:
            queries, feats = layer(queries, feats, qpos, feat_pos)
        refined = feats.transpose(1, 2).reshape(B, C, H, W)
        return refined, queries


class PyramidPoolingFPN(nn.Module):
    """Multi-scale fusion of the three deepest encoder levels.

    The deepest level is enriched by pyramid pooling (adaptive average
    pooling at several bin sizes, 1x1 convolutions, upsampling, concat,
    3x3 merge), then fused top-down with lateral 1x1 connections onto the
    two shallower levels. Output sits at the shallowest input's stride.
    """

    def __init__(self, in_channels, out_channels=256, bins=(1, 2, 3, 6)):
        super().__init__()
        c2, c3, c4 = in_channels
        self.bins = tuple(bins)
        self.pool_branches = nn.ModuleList(
            nn.Sequential(nn.Conv2d(c4, out_channels, 1, bias=False), nn.GELU())
            for _ in self.bins)
        self.merge = nn.Sequential(
            nn.Conv2d(c4 + len(self.bins) * out_channels, out_channels, 3, padding=1),
            nn.GELU(),
        )
        self.lateral3 = nn.Conv2d(c3, out_channels, 1)
        self.lateral2 = nn.Conv2d(c2, out_channels, 1)
        self.smooth = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.out_channels = out_channels

    def forward(self, e2, e3, e4):
        if e2.shape[-2] != 2 * e3.shape[-2] or e3.shape[-2] != 2 * e4.shape[-2]:
            raise ConfigError(
                "expected strides 8/16/32: each level half the previous size, got "
                f"{tuple(e2.shape[-2:])}, {tuple(e3.shape[-2:])}, {tuple(e4.shape[-2:])}")
        size4 = e4.shape[-2:]
        pooled = [e4]
        for bin_size, branch in zip(self.bins, self.pool_branches):
            p = F.adaptive_avg_pool2d(e4, bin_size)
            p = F.interpolate(branch(p), size=size4, mode="bilinear", align_corners=False)
            pooled.append(p)
        top = self.merge(torch.cat(pooled, dim=1))
        mid = self.lateral3(e3) + F.interpolate(
            top, size=e3.shape[-2:], mode="bilinear", align_corners=False)
        low = self.lateral2(e2) + F.interpolate(
            mid, size=e2.shape[-2:], mode="bilinear", align_corners=False)
        return self.smooth(low)


class QueryMaskHead(nn.Module):
    """Auxiliary logits from per-pixel query/feature dot products.

    Queries are projected (bias-free) to the fused-feature width, so all-zero
    queries give exactly zero logits and scaling queries scales logits.
    """

    def __init__(self, query_width, feature_width):
        super().__init__()
        self.proj = nn.Linear(query_width, feature_width, bias=False)

    def forward(self, queries, fused, out_size):
        # queries: (B, Q, Dq); fused: (B, Df, h, w) -> (B, Q, out, out)
        q = self.proj(queries)
        logits = torch.einsum("bqc,bchw->bqhw", q, fused)
        if logits.shape[-2:] != (out_size, out_size):
            logits = F.interpolate(logits, size=(out_size, out_size),
                                   mode="bilinear", align_corners=False)
        return logits
