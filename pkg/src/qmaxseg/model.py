"""Full segmentation network: encoder, edge branch, query refinement, main
decoder (y1) and auxiliary multi-scale head (y2).

All components are always constructed so that checkpoints and initialization
are identical across ablation settings; the toggles only control routing.
Disabled components therefore receive no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import BackboneConfig, GrayProjection, MaxViTEncoder
from .decoder import DecoderConfig, MaxViTDecoder
from .edge import EdgeEnhancement, QueryEnhancer
from .errors import ConfigError
from .query_decoder import PyramidPoolingFPN, QueryMaskHead, TwoWayRefiner


@dataclass
class ModelConfig:
    num_classes: int = 4
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    d_fpn: int = 256
    refine_layers: int = 2
    refine_heads: int = 8
    use_dual_decoder: bool = True
    use_query: bool = True
    use_edge: bool = True
    query_pos_embed: bool = True

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        d_e4 = self.backbone.stage_channels[3]
        if d_e4 % 2 != 0:
            raise ConfigError(f"bottleneck width {d_e4} must be even")
        if d_e4 % self.refine_heads != 0:
            raise ConfigError(
                f"bottleneck width {d_e4} not divisible by {self.refine_heads} heads")

    @property
    def toggles(self) -> dict[str, bool]:
        return {"dual_decoder": self.use_dual_decoder, "query": self.use_query,
                "edge": self.use_edge}


@dataclass
class DualPrediction:
    """Segmentation logits from the two heads plus auxiliary outputs.

    y1: (B, C, H, W) main-decoder logits (the prediction head at inference).
    y2: (B, C, H, W) auxiliary logits, None when the dual decoder is off.
    edge_pred: (B, 1, H/4, W/4) edge regression output, None when the edge
        branch is off.
    queries: (B, num_classes, D_E4) updated queries, None when the query
        component is off.
    """

    y1: torch.Tensor
    y2: torch.Tensor | None = None
    edge_pred: torch.Tensor | None = None
    queries: torch.Tensor | None = None


class QMaxSeg(nn.Module):
    """Query-guided multi-axis segmentation network with edge enhancement."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        bb = cfg.backbone
        c1, c2, c3, c4 = bb.stage_channels
        self.gray_proj = GrayProjection()
        self.encoder = MaxViTEncoder(bb)
        self.edge = EdgeEnhancement(
            c1, c2, num_heads=bb.num_heads_per_stage[1],
            window_size=bb.window_size, grid_size=bb.grid_size)
        self.query_enhancer = QueryEnhancer(self.edge.out_channels,
                                            cfg.num_classes, c4)
        # full-width fallback used when the edge branch is disabled
        self.plain_queries = nn.Parameter(torch.zeros(cfg.num_classes, c4))
        self.refiner = TwoWayRefiner(c4, cfg.num_classes,
                                     layers=cfg.refine_layers,
                                     num_heads=cfg.refine_heads,
                                     query_pos_embed=cfg.query_pos_embed)
        self.decoder = MaxViTDecoder(
            bb, DecoderConfig(cfg.num_classes), edge_channels=self.edge.out_channels)
        self.ppm_fpn = PyramidPoolingFPN((c2, c3, c4), cfg.d_fpn)
        self.query_mask_head = QueryMaskHead(c4, cfg.d_fpn)
        # plain auxiliary head, used when the dual decoder runs without queries
        self.aux_conv_head = nn.Conv2d(cfg.d_fpn, cfg.num_classes, 1)

    def seed_queries(self, batch_size, edge_attention=None):
        """Initial per-class queries: edge-conditioned when the edge branch is
        active, otherwise the pure zero-initialized learnable set."""
        if self.cfg.use_edge:
            if edge_attention is None:
                raise ConfigError("edge attention required when the edge branch is on")
            return self.query_enhancer(edge_attention)
        return self.plain_queries.unsqueeze(0).expand(batch_size, -1, -1)

    def forward(self, x) -> DualPrediction:
        cfg = self.cfg
        if x.shape[-3] == 1:
            x = self.gray_proj(x)
        pyr = self.encoder(x)
        out_size = x.shape[-1]

        edge_out = None
        if cfg.use_edge:
            edge_out = self.edge(pyr.e1, pyr.e2)

        queries = None
        bottleneck = pyr.e4
        if cfg.use_query:
            seed = self.seed_queries(
                x.shape[0], edge_out.edge_attention if edge_out else None)
            bottleneck, queries = self.refiner(pyr.e4, seed)

        y1 = self.decoder(
            bottleneck, pyr,
            edge_feats=edge_out.d_block_injections if edge_out else None)

        y2 = None
        if cfg.use_dual_decoder:
            fused = self.ppm_fpn(pyr.e2, pyr.e3, pyr.e4)
            if cfg.use_query:
                y2 = self.query_mask_head(queries, fused, out_size)
            else:
                y2 = F.interpolate(self.aux_conv_head(fused),
                                   size=(out_size, out_size),
                                   mode="bilinear", align_corners=False)

        return DualPrediction(
            y1=y1, y2=y2,
            edge_pred=edge_out.edge_pred if edge_out else None,
            queries=queries)

    def predict(self, x) -> torch.Tensor:
        """Hard per-pixel labels from the main head."""
        with torch.no_grad():
            return self.forward(x).y1.argmax(dim=-3)
