"""Edge enhancement and query seeding.

Scribble labels carry almost no boundary information, so an auxiliary edge
branch is trained on the two earliest (highest-resolution) encoder levels.
It predicts an edge map (supervised by a regression loss against the edge
ground truth) and produces an edge-attention feature map that (a) seeds the
per-class queries and (b) is injected into the upsampling path of the main
decoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import MaxViTStage
from .errors import ConfigError


@dataclass
class EdgeOutputs:
    """Results of the edge branch for one forward pass.

    edge_pred: (B, 1, H/4, W/4) linear-output edge map.
    edge_attention: (B, C, H/4, W/4) attention features at the first encoder
        level's resolution.
    d_block_injections: edge_attention resampled to each configured decoder
        fusion resolution (projection to decoder widths happens inside the
        decoder's fusion layers).
    """

    edge_pred: torch.Tensor
    edge_attention: torch.Tensor
    d_block_injections: list[torch.Tensor]


class _ConvStream(nn.Module):
    """1x1 then 3x3 convolution with batch norm and GELU."""

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.GELU(),
            nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.GELU(),
        )

    def forward(self, x):
        return self.net(x)


class EdgeEnhancement(nn.Module):
    """Two-branch edge module over the first two encoder levels.

    The second-level features are upsampled 2x to the first level's
    resolution; both streams pass through a 1x1-3x3 convolution pair and are
    concatenated. One branch maps the fused features to a single-channel
    edge prediction; the other runs one MaxViT stage to produce the
    edge-attention features.
    """

    def __init__(self, e1_channels, e2_channels, num_heads, window_size,
                 grid_size, injection_scales=(2, 1)):
        super().__init__()
        width = e1_channels
        self.stream1 = _ConvStream(e1_channels, width)
        self.stream2 = _ConvStream(e2_channels, width)
        fused = 2 * width
        self.edge_head = nn.Conv2d(fused, 1, 1)
        self.stage = MaxViTStage(fused, fused, depth=1, num_heads=num_heads,
                                 window_size=window_size, grid_size=grid_size,
                                 downsample=False)
        # downsampling factors (relative to e1) at which injections are emitted
        self.injection_scales = tuple(injection_scales)
        self.out_channels = fused

    def forward(self, e1, e2) -> EdgeOutputs:
        if e1.shape[-2] != 2 * e2.shape[-2] or e1.shape[-1] != 2 * e2.shape[-1]:
            raise ConfigError(
                f"edge branch expects the second level at half the first level's "
                f"resolution, got {tuple(e1.shape[-2:])} and {tuple(e2.shape[-2:])}")
        up2 = F.interpolate(e2, size=e1.shape[-2:], mode="bilinear", align_corners=False)
        fused = torch.cat([self.stream1(e1), self.stream2(up2)], dim=1)
        edge_pred = self.edge_head(fused)
        attention = self.stage(fused)
        injections = []
        for scale in self.injection_scales:
            if scale == 1:
                injections.append(attention)
            else:
                size = (attention.shape[-2] // scale, attention.shape[-1] // scale)
                injections.append(F.interpolate(
                    attention, size=size, mode="bilinear", align_corners=False))
        return EdgeOutputs(edge_pred, attention, injections)


class QueryEnhancer(nn.Module):
    """Builds per-class query vectors half from zero-initialized learnable
    parameters and half from pooled edge-attention features.

    The edge-attention map is adaptively pooled to one spatial token per
    class and mapped by a linear layer to width/2; the result is concatenated
    after the learnable half, giving (num_classes, width) queries.
    """

    def __init__(self, edge_channels, num_classes, width):
        super().__init__()
        if width % 2 != 0:
            raise ConfigError(f"query width must be even, got {width}")
        self.num_classes = num_classes
        self.width = width
        self.learnable = nn.Parameter(torch.zeros(num_classes, width // 2))
        self.pool = nn.AdaptiveAvgPool2d((num_classes, 1))
        self.linear = nn.Linear(edge_channels, width // 2)

    def forward(self, edge_attention):
        # edge_attention: (B, C, H, W) -> queries (B, num_classes, width)
        B = edge_attention.shape[0]
        pooled = self.pool(edge_attention).squeeze(-1).transpose(1, 2)
        conditioned = self.linear(pooled)
        learned = self.learnable.unsqueeze(0).expand(B, -1, -1)
        return torch.cat([learned, conditioned], dim=-1)
