"""Multi-axis attention encoder.

The encoder is a four-stage hierarchy. Every block combines an inverted
bottleneck convolution (with squeeze-and-excitation gating) with two sparse
self-attention passes: one over non-overlapping local windows ("block"
attention) and one over a strided global grid ("grid" attention). Channel
widths double per stage while the spatial size halves, yielding a feature
pyramid at strides 4/8/16/32 relative to the input.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError

ATTN_HEAD_DIM = 32
MLP_RATIO = 4


# ---------------------------------------------------------------------------
# Instrumentation: tally of attention score-matrix entries.
# ---------------------------------------------------------------------------

class ScoreTally:
    """Accumulates the number of attention score-matrix entries computed."""

    def __init__(self):
        self.entries = 0


_active_tally: ScoreTally | None = None


@contextmanager
def tally_attention_scores():
    """Count score-matrix entries of every attention forward in this scope."""
    global _active_tally
    tally = ScoreTally()
    prev = _active_tally
    _active_tally = tally
    try:
        yield tally
    finally:
        _active_tally = prev


def _record_scores(attn: torch.Tensor):
    if _active_tally is not None:
        _active_tally.entries += attn.numel()


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class BackboneConfig:
    """Encoder hyperparameters.

    window_size / grid_size / num_heads_per_stage default to values derived
    from input_size and the channel schedule (side/32 partitions, 32-wide
    attention heads).
    """

    base_channels: int = 96
    depths: tuple[int, ...] = (2, 2, 5, 2)
    window_size: int | None = None
    grid_size: int | None = None
    num_heads_per_stage: tuple[int, ...] | None = None
    input_size: int = 256
    drop_path_rate: float = 0.0

    def __post_init__(self):
        if self.input_size % 32 != 0:
            raise ConfigError(f"input_size must be divisible by 32, got {self.input_size}")
        if len(self.depths) != 4 or any(d < 1 for d in self.depths):
            raise ConfigError(f"depths must be 4 positive ints, got {self.depths}")
        if self.window_size is None:
            self.window_size = max(1, self.input_size // 32)
        if self.grid_size is None:
            self.grid_size = self.window_size
        if self.num_heads_per_stage is None:
            heads = []
            for c in self.stage_channels:
                if c % ATTN_HEAD_DIM != 0:
                    raise ConfigError(
                        f"stage width {c} not divisible by head dim {ATTN_HEAD_DIM}; "
                        "set num_heads_per_stage explicitly"
                    )
                heads.append(c // ATTN_HEAD_DIM)
            self.num_heads_per_stage = tuple(heads)
        for i, c in enumerate(self.stage_channels):
            if c % self.num_heads_per_stage[i] != 0:
                raise ConfigError(f"stage {i} width {c} not divisible by its head count")
        for side in self.stage_sides:
            if side % self.window_size != 0 or side % self.grid_size != 0:
                raise ConfigError(
                    f"feature side {side} not divisible by window {self.window_size} "
                    f"/ grid {self.grid_size}"
                )

    @property
    def stage_channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * 2 ** i for i in range(4))

    @property
    def stage_sides(self) -> tuple[int, ...]:
        return tuple(self.input_size // (4 * 2 ** i) for i in range(4))


@dataclass
class FeaturePyramid:
    """The four encoder outputs at strides 4, 8, 16 and 32."""

    e1: torch.Tensor
    e2: torch.Tensor
    e3: torch.Tensor
    e4: torch.Tensor

    STRIDES = (4, 8, 16, 32)

    @property
    def d_e4(self) -> int:
        return self.e4.shape[-3]

    def levels(self) -> tuple[torch.Tensor, ...]:
        return (self.e1, self.e2, self.e3, self.e4)


# ---------------------------------------------------------------------------
# Partition helpers (NHWC internally)
# ---------------------------------------------------------------------------

def window_partition(x: torch.Tensor, window: int) -> torch.Tensor:
    """(B, H, W, C) -> (B*nW, window*window, C), contiguous windows."""
    B, H, W, C = x.shape
    x = x.view(B, H // window, window, W // window, window, C)
    x = x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window * window, C)
    return x


def window_reverse(x: torch.Tensor, window: int, H: int, W: int) -> torch.Tensor:
    B = x.shape[0] // ((H // window) * (W // window))
    x = x.view(B, H // window, W // window, window, window, -1)
    x = x.permute(0, 1, 3, 2, 4, 5).reshape(B, H, W, -1)
    return x


def grid_partition(x: torch.Tensor, grid: int) -> torch.Tensor:
    """(B, H, W, C) -> (B*nCells, grid*grid, C); tokens strided by H//grid."""
    B, H, W, C = x.shape
    x = x.view(B, grid, H // grid, grid, W // grid, C)
    x = x.permute(0, 2, 4, 1, 3, 5).reshape(-1, grid * grid, C)
    return x


def grid_reverse(x: torch.Tensor, grid: int, H: int, W: int) -> torch.Tensor:
    B = x.shape[0] // ((H // grid) * (W // grid))
    x = x.view(B, H // grid, W // grid, grid, grid, -1)
    x = x.permute(0, 3, 1, 4, 2, 5).reshape(B, H, W, -1)
    return x


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------

class RelPosAttention(nn.Module):
    """Multi-head self-attention over fixed-size token groups with a learned
    relative position bias (groups come from window or grid partitioning)."""

    def __init__(self, dim, num_heads, partition_size):
        super().__init__()
        if dim % num_heads != 0:
            raise ConfigError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.partition_size = partition_size
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)

        p = partition_size
        self.rel_bias = nn.Parameter(torch.zeros((2 * p - 1) ** 2, num_heads))
        nn.init.trunc_normal_(self.rel_bias, std=0.02)
        coords = torch.stack(torch.meshgrid(
            torch.arange(p), torch.arange(p), indexing="ij")).flatten(1)
        rel = coords[:, :, None] - coords[:, None, :] + (p - 1)
        index = rel[0] * (2 * p - 1) + rel[1]
        self.register_buffer("rel_index", index, persistent=False)

    def forward(self, x):
        # x: (G, T, C) with T == partition_size**2
        G, T, C = x.shape
        qkv = self.qkv(x).reshape(G, T, 3, self.num_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        attn = (q * self.scale) @ k.transpose(-2, -1)
        _record_scores(attn)
        bias = self.rel_bias[self.rel_index.reshape(-1)].reshape(T, T, -1)
        attn = attn + bias.permute(2, 0, 1).unsqueeze(0)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(G, T, C)
        return self.proj(out)


class FullAttention2d(nn.Module):
    """Reference dense self-attention over all H*W tokens (quadratic cost).

    Not used by the segmentation model; kept as the baseline the sparse
    window/grid attention is measured against.
    """

    def __init__(self, dim, num_heads):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        # x: (B, C, H, W)
        B, C, H, W = x.shape
        t = x.flatten(2).transpose(1, 2)
        qkv = self.qkv(t).reshape(B, H * W, 3, self.num_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        attn = (q * self.scale) @ k.transpose(-2, -1)
        _record_scores(attn)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, H * W, C)
        out = self.proj(out).transpose(1, 2).reshape(B, C, H, W)
        return out


class Mlp(nn.Module):
    def __init__(self, dim, ratio=MLP_RATIO):
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class DropPath(nn.Module):
    """Per-sample stochastic depth (identity when rate is 0 or in eval)."""

    def __init__(self, rate=0.0):
        super().__init__()
        self.rate = rate

    def forward(self, x):
        if self.rate == 0.0 or not self.training:
            return x
        keep = 1.0 - self.rate
        mask_shape = (x.shape[0],) + (1,) * (x.ndim - 1)
        mask = torch.rand(mask_shape, dtype=x.dtype, device=x.device) < keep
        return x * mask / keep


class PartitionAttention(nn.Module):
    """Pre-norm attention + MLP sublayer over a window or grid partition.

    kind="block" restricts attention to contiguous window x window tiles;
    kind="grid" attends across tokens sampled at stride side/grid, giving
    sparse global mixing. Both preserve the input shape.
    """

    def __init__(self, dim, num_heads, partition_size, kind, drop_path=0.0):
        super().__init__()
        if kind not in ("block", "grid"):
            raise ConfigError(f"unknown partition kind {kind!r}")
        self.kind = kind
        self.partition_size = partition_size
        self.norm1 = nn.LayerNorm(dim)
        self.attn = RelPosAttention(dim, num_heads, partition_size)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim)
        self.drop_path = DropPath(drop_path)

    def _check(self, H, W):
        p = self.partition_size
        if H % p != 0 or W % p != 0:
            raise ConfigError(
                f"spatial size {H}x{W} not divisible by partition size {p}")

    def forward(self, x):
        # x: (B, C, H, W)
        B, C, H, W = x.shape
        self._check(H, W)
        p = self.partition_size
        part, unpart = (
            (window_partition, window_reverse) if self.kind == "block"
            else (grid_partition, grid_reverse)
        )
        t = x.permute(0, 2, 3, 1)
        y = part(self.norm1(t), p)
        y = self.attn(y)
        t = t + self.drop_path(unpart(y, p, H, W))
        t = t + self.drop_path(self.mlp(self.norm2(t)))
        return t.permute(0, 3, 1, 2)


# ---------------------------------------------------------------------------
# Convolutional blocks
# ---------------------------------------------------------------------------

class SqueezeExcite(nn.Module):
    """Channel gate: x * sigmoid(fc2(silu(fc1(GAP(x)))))."""

    def __init__(self, channels, rd_channels):
        super().__init__()
        self.fc1 = nn.Conv2d(channels, rd_channels, 1)
        self.act = nn.SiLU()
        self.fc2 = nn.Conv2d(rd_channels, channels, 1)

    def gate(self, x):
        g = x.mean(dim=(2, 3), keepdim=True)
        return torch.sigmoid(self.fc2(self.act(self.fc1(g))))

    def forward(self, x):
        return x * self.gate(x)


class MBConv(nn.Module):
    """Inverted bottleneck: pre-norm, 1x1 expand, 3x3 depthwise (optionally
    strided), squeeze-and-excitation, 1x1 project, plus shortcut.

    The shortcut is the identity when shapes match; on downsampling or a
    channel change it is 2x average pooling followed by a 1x1 projection.
    """

    EXPAND = 4
    SE_RATIO = 0.25

    def __init__(self, in_channels, out_channels, downsample=False, drop_path=0.0):
        super().__init__()
        stride = 2 if downsample else 1
        hidden = in_channels * self.EXPAND
        self.pre_norm = nn.BatchNorm2d(in_channels)
        self.expand = nn.Conv2d(in_channels, hidden, 1, bias=False)
        self.norm1 = nn.BatchNorm2d(hidden)
        self.dw = nn.Conv2d(hidden, hidden, 3, stride=stride, padding=1,
                            groups=hidden, bias=False)
        self.norm2 = nn.BatchNorm2d(hidden)
        self.act = nn.GELU()
        self.se = SqueezeExcite(hidden, max(1, int(in_channels * self.SE_RATIO)))
        self.project = nn.Conv2d(hidden, out_channels, 1)
        if downsample or in_channels != out_channels:
            pool = [nn.AvgPool2d(2)] if downsample else []
            self.shortcut = nn.Sequential(*pool, nn.Conv2d(in_channels, out_channels, 1))
        else:
            self.shortcut = nn.Identity()
        self.drop_path = DropPath(drop_path)

    def forward(self, x):
        y = self.pre_norm(x)
        y = self.act(self.norm1(self.expand(y)))
        y = self.act(self.norm2(self.dw(y)))
        y = self.se(y)
        y = self.project(y)
        return self.shortcut(x) + self.drop_path(y)


class MaxViTBlock(nn.Module):
    """MBConv -> block attention -> grid attention."""

    def __init__(self, in_channels, out_channels, num_heads, window_size,
                 grid_size, downsample=False, drop_path=0.0):
        super().__init__()
        self.conv = MBConv(in_channels, out_channels, downsample, drop_path)
        self.block_attn = PartitionAttention(
            out_channels, num_heads, window_size, "block", drop_path)
        self.grid_attn = PartitionAttention(
            out_channels, num_heads, grid_size, "grid", drop_path)

    def forward(self, x):
        x = self.conv(x)
        x = self.block_attn(x)
        x = self.grid_attn(x)
        return x


class MaxViTStage(nn.Module):
    """A stack of MaxViT blocks; the first block optionally downsamples 2x."""

    def __init__(self, in_channels, out_channels, depth, num_heads,
                 window_size, grid_size, downsample=True, drop_path=0.0):
        super().__init__()
        blocks = []
        for i in range(depth):
            blocks.append(MaxViTBlock(
                in_channels if i == 0 else out_channels,
                out_channels, num_heads, window_size, grid_size,
                downsample=downsample and i == 0,
                drop_path=drop_path,
            ))
        self.blocks = nn.Sequential(*blocks)

    def forward(self, x):
        return self.blocks(x)


# ---------------------------------------------------------------------------
# Stem and encoder
# ---------------------------------------------------------------------------

class GrayProjection(nn.Module):
    """Projects a single-channel image to three channels (3x3 conv, batch
    norm, ReLU) so grayscale inputs share the RGB backbone."""

    def __init__(self, bias=True):
        super().__init__()
        self.conv = nn.Conv2d(1, 3, 3, padding=1, bias=bias)
        self.norm = nn.BatchNorm2d(3)
        self.act = nn.ReLU()

    def forward(self, x):
        if x.shape[-3] != 1:
            raise ConfigError(f"expected a 1-channel input, got {x.shape[-3]} channels")
        return self.act(self.norm(self.conv(x)))


class Stem(nn.Module):
    """Two 3x3 convolutions (stride 2 then 1) bringing the input to stride 2."""

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=2, padding=1, bias=False)
        self.norm = nn.BatchNorm2d(out_channels)
        self.act = nn.GELU()
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)

    def forward(self, x):
        return self.conv2(self.act(self.norm(self.conv1(x))))


class MaxViTEncoder(nn.Module):
    """Stem plus four downsampling stages producing the feature pyramid."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        chans = cfg.stage_channels
        self.stem = Stem(3, cfg.base_channels)
        stages = []
        in_ch = cfg.base_channels
        for i in range(4):
            stages.append(MaxViTStage(
                in_ch, chans[i], cfg.depths[i], cfg.num_heads_per_stage[i],
                cfg.window_size, cfg.grid_size, downsample=True,
                drop_path=cfg.drop_path_rate,
            ))
            in_ch = chans[i]
        self.stages = nn.ModuleList(stages)

    def forward(self, x) -> FeaturePyramid:
        if x.ndim != 4 or x.shape[-3] != 3:
            raise ConfigError(f"expected (B, 3, H, W) input, got {tuple(x.shape)}")
        if x.shape[-2] != self.cfg.input_size or x.shape[-1] != self.cfg.input_size:
            raise ConfigError(
                f"expected {self.cfg.input_size}x{self.cfg.input_size} input, "
                f"got {x.shape[-2]}x{x.shape[-1]}")
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return FeaturePyramid(*feats)

    encode = forward
