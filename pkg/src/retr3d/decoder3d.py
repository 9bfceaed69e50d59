"""Voxel decoders: parallel query transformer, residual CNN upsampler, MLP head.

Query rows are linearized x-major: row ``k`` of an ``M**3`` query grid owns
cube cell ``(k // M**2, (k // M) % M, k % M)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import ConfigError, Mlp, init_weights


@dataclass(frozen=True)
class DecoderConfig:
    layers: int = 8
    heads: int = 12
    dim: int = 768
    query_side: int = 4
    ff_dim: Optional[int] = None  # defaults to 4 * dim

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"decoder dim {self.dim} not divisible by heads {self.heads}")
        if self.layers < 1 or self.query_side < 1:
            raise ConfigError("decoder needs at least one layer and one query per side")

    @property
    def num_queries(self) -> int:
        return self.query_side**3

    @property
    def hidden(self) -> int:
        return self.ff_dim or 4 * self.dim


@dataclass(frozen=True)
class CNNDecoderConfig:
    channels: int = 64
    upsample_stages: int = 3
    kernel: int = 4
    stride: int = 2
    padding: int = 1
    residual_kernels: Tuple[int, int, int] = (3, 3, 1)
    query_side: int = 4
    resolution: int = 32
    norm_groups: int = 8  # GroupNorm after each upsampling conv; 0 disables it

    def __post_init__(self):
        if self.norm_groups < 0 or (self.norm_groups and self.channels % self.norm_groups):
            raise ConfigError(f"channels {self.channels} not divisible by norm_groups {self.norm_groups}")
        sides = self.stage_sides()
        if sides[-1] != self.resolution:
            raise ConfigError(
                f"upsampling {self.query_side} through {self.upsample_stages} stages gives "
                f"{sides[-1]}, not resolution {self.resolution}"
            )
        k1, k2, k3 = self.residual_kernels
        if k1 % 2 == 0 or k2 % 2 == 0 or k3 % 2 == 0:
            raise ConfigError("residual kernels must be odd to preserve shape")

    def stage_sides(self):
        sides = [self.query_side]
        for _ in range(self.upsample_stages):
            sides.append(self.stride * (sides[-1] - 1) - 2 * self.padding + self.kernel)
        return sides


class DecoderLayer(nn.Module):
    """Pre-norm self-attention, cross-attention, feed-forward. No causal mask."""

    def __init__(self, dim: int, heads: int, hidden: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, hidden)

    def forward(self, q, memory, attn_mask=None):
        h = self.norm1(q)
        q = q + self.self_attn(h, h, h, attn_mask=attn_mask, need_weights=False)[0]
        q = q + self.cross_attn(self.norm2(q), memory, memory, need_weights=False)[0]
        return q + self.mlp(self.norm3(q))


class QueryDecoder(nn.Module):
    """Decodes ``M**3`` learned query embeddings against encoder memory in one pass."""

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        self.queries = nn.Parameter(torch.empty(cfg.num_queries, cfg.dim))
        self.layers = nn.ModuleList(
            DecoderLayer(cfg.dim, cfg.heads, cfg.hidden) for _ in range(cfg.layers)
        )
        self.norm = nn.LayerNorm(cfg.dim)
        nn.init.trunc_normal_(self.queries, std=0.02)
        self.apply(init_weights)

    def forward(self, memory: torch.Tensor) -> torch.Tensor:
        """``(B, T, D)`` memory -> ``(B, M**3, D)`` query grid."""
        if memory.shape[-1] != self.cfg.dim:
            raise ConfigError(f"memory width {memory.shape[-1]} != decoder dim {self.cfg.dim}")
        q = self.queries.unsqueeze(0).expand(memory.shape[0], -1, -1)
        for layer in self.layers:
            q = layer(q, memory)
        return self.norm(q)


def reshape_to_cube(grid: torch.Tensor, query_side: Optional[int] = None) -> torch.Tensor:
    """``(B, M**3, D)`` -> ``(B, D, M, M, M)`` following the x-major row order."""
    b, n, d = grid.shape
    m = query_side or round(n ** (1 / 3))
    if m**3 != n:
        raise ValueError(f"{n} rows do not form a cube")
    return grid.reshape(b, m, m, m, d).permute(0, 4, 1, 2, 3)


def flatten_cube(cube: torch.Tensor) -> torch.Tensor:
    b, d = cube.shape[:2]
    return cube.permute(0, 2, 3, 4, 1).reshape(b, -1, d)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, kernels=(3, 3, 1)):
        super().__init__()
        k1, k2, k3 = kernels
        self.conv1 = nn.Conv3d(channels, channels, k1, padding=k1 // 2)
        self.conv2 = nn.Conv3d(channels, channels, k2, padding=k2 // 2)
        self.skip = nn.Conv3d(channels, channels, k3, padding=k3 // 2)

    def forward(self, x):
        main = self.conv2(F.relu(self.conv1(x)))
        return F.relu(main + self.skip(x))


class CNNDecoder(nn.Module):
    """1x1x1 channel bridge, then ``upsample -> resblock -> ... -> upsample``, then 1x1x1 head.

    Residual blocks sit between consecutive upsampling stages. Each upsampling
    conv is followed by GroupNorm (unless ``norm_groups=0``) and ReLU.
    """

    def __init__(self, in_dim: int, cfg: CNNDecoderConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.bridge = nn.Conv3d(in_dim, c, 1)
        self.ups = nn.ModuleList(
            nn.ConvTranspose3d(c, c, cfg.kernel, cfg.stride, cfg.padding)
            for _ in range(cfg.upsample_stages)
        )
        self.norms = nn.ModuleList(
            nn.GroupNorm(cfg.norm_groups, c) if cfg.norm_groups else nn.Identity()
            for _ in range(cfg.upsample_stages)
        )
        self.res = nn.ModuleList(
            ResidualBlock(c, cfg.residual_kernels) for _ in range(cfg.upsample_stages - 1)
        )
        self.head = nn.Conv3d(c, 1, 1)

    def logits(self, cube: torch.Tensor) -> torch.Tensor:
        if cube.shape[-1] != self.cfg.query_side:
            raise ConfigError(f"cube side {cube.shape[-1]} != query_side {self.cfg.query_side}")
        x = self.bridge(cube)
        for i, (up, norm) in enumerate(zip(self.ups, self.norms)):
            x = F.relu(norm(up(x)))
            if i < len(self.res):
                x = self.res[i](x)
        return self.head(x).squeeze(1)

    def forward(self, cube: torch.Tensor) -> torch.Tensor:
        """``(B, D, M, M, M)`` -> ``(B, R, R, R)`` occupancy probabilities."""
        return torch.sigmoid(self.logits(cube))


class MLPDecoder(nn.Module):
    """One affine map per query to its ``(R/M)**3`` voxel sub-block."""

    def __init__(self, dim: int, query_side: int = 4, resolution: int = 32):
        super().__init__()
        if resolution % query_side:
            raise ConfigError(f"resolution {resolution} not divisible by query_side {query_side}")
        self.m = query_side
        self.block = resolution // query_side
        self.fc = nn.Linear(dim, self.block**3)
        init_weights(self.fc)

    def logits(self, grid: torch.Tensor) -> torch.Tensor:
        b, m, s = grid.shape[0], self.m, self.block
        x = self.fc(grid).reshape(b, m, m, m, s, s, s)
        return x.permute(0, 1, 4, 2, 5, 3, 6).reshape(b, m * s, m * s, m * s)

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        """``(B, M**3, D)`` query grid -> ``(B, R, R, R)`` probabilities."""
        return torch.sigmoid(self.logits(grid))
