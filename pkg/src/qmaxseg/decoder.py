"""Mirrored decoder producing the primary segmentation logits.

Three decoder blocks walk the feature pyramid back up (stride 32 -> 4).
Each block upsamples 2x, concatenates the matching encoder skip, reduces
channels, optionally adds projected edge features, and runs one MaxViT
stage. A 1x1 head plus 4x bilinear upsampling yields full-resolution logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import BackboneConfig, FeaturePyramid, MaxViTStage
from .errors import ConfigError


@dataclass
class DecoderConfig:
    num_classes: int
    d_block_depths: tuple[int, int, int] = (1, 1, 1)
    fuse_edge: bool = True

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.d_block_depths) != 3 or any(d < 1 for d in self.d_block_depths):
            raise ConfigError(f"d_block_depths must be 3 positive ints, got {self.d_block_depths}")


class EdgeFusion(nn.Module):
    """Adds an edge feature map after resampling and a bias-free 1x1
    channel-matching projection. fuse(x, e) = x + proj(resample(e))."""

    def __init__(self, edge_channels, out_channels):
        super().__init__()
        self.proj = nn.Conv2d(edge_channels, out_channels, 1, bias=False)

    def forward(self, feat, edge_feat, resample=True):
        if edge_feat.shape[-2:] != feat.shape[-2:]:
            if not resample:
                raise ConfigError(
                    f"edge feature size {tuple(edge_feat.shape[-2:])} does not match "
                    f"decoder feature size {tuple(feat.shape[-2:])}")
            edge_feat = F.interpolate(edge_feat, size=feat.shape[-2:],
                                      mode="bilinear", align_corners=False)
        return feat + self.proj(edge_feat)


class DecoderBlock(nn.Module):
    """2x bilinear upsample + 1x1, skip concat + 1x1 reduce, optional edge
    fusion, then a MaxViT stage at the skip's width."""

    def __init__(self, in_channels, skip_channels, depth, num_heads,
                 window_size, grid_size, edge_channels=None):
        super().__init__()
        self.up_proj = nn.Conv2d(in_channels, skip_channels, 1)
        self.reduce = nn.Conv2d(2 * skip_channels, skip_channels, 1)
        self.edge_fusion = (EdgeFusion(edge_channels, skip_channels)
                            if edge_channels else None)
        self.stage = MaxViTStage(skip_channels, skip_channels, depth, num_heads,
                                 window_size, grid_size, downsample=False)

    def forward(self, x, skip, edge_feat=None):
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = self.up_proj(x)
        if x.shape[-2:] != skip.shape[-2:]:
            raise ConfigError(
                f"skip size {tuple(skip.shape[-2:])} does not match upsampled "
                f"decoder size {tuple(x.shape[-2:])}")
        x = self.reduce(torch.cat([x, skip], dim=1))
        if edge_feat is not None:
            if self.edge_fusion is None:
                raise ConfigError("edge features passed to a block without edge fusion")
            x = self.edge_fusion(x, edge_feat)
        return self.stage(x)


class MaxViTDecoder(nn.Module):
    """The upsampling half of the U: blocks at strides 16, 8 and 4 consuming
    skips E3, E2 and E1. Edge features, when enabled, are injected at the two
    highest-resolution blocks (strides 8 and 4)."""

    def __init__(self, backbone_cfg: BackboneConfig, cfg: DecoderConfig,
                 edge_channels=None):
        super().__init__()
        self.cfg = cfg
        c1, c2, c3, c4 = backbone_cfg.stage_channels
        heads = backbone_cfg.num_heads_per_stage
        w, g = backbone_cfg.window_size, backbone_cfg.grid_size
        edge_ch = edge_channels if cfg.fuse_edge else None
        self.block1 = DecoderBlock(c4, c3, cfg.d_block_depths[0], heads[2], w, g)
        self.block2 = DecoderBlock(c3, c2, cfg.d_block_depths[1], heads[1], w, g,
                                   edge_channels=edge_ch)
        self.block3 = DecoderBlock(c2, c1, cfg.d_block_depths[2], heads[0], w, g,
                                   edge_channels=edge_ch)
        self.head = nn.Conv2d(c1, cfg.num_classes, 1)

    def forward(self, bottleneck, skips: FeaturePyramid, edge_feats=None):
        if bottleneck.shape != skips.e4.shape:
            raise ConfigError(
                f"bottleneck shape {tuple(bottleneck.shape)} does not match "
                f"E4 shape {tuple(skips.e4.shape)}")
        if not self.cfg.fuse_edge:
            edge_feats = None
        e_mid, e_high = (edge_feats if edge_feats is not None else (None, None))
        x = self.block1(bottleneck, skips.e3)
        x = self.block2(x, skips.e2, e_mid)
        x = self.block3(x, skips.e1, e_high)
        logits = self.head(x)
        return F.interpolate(logits, scale_factor=4, mode="bilinear",
                             align_corners=False)
