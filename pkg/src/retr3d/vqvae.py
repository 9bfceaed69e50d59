"""Two-stage variant: a 3D VQ-VAE over voxels plus an autoregressive code decoder.

Stage 1 compresses a ``32**3`` grid into 64 codebook indices (one per cell of
a ``4**3`` latent, x-major like the query grid). Stage 2 trains an image
encoder and causal transformer to emit that sequence; at inference the
greedy sequence is decoded back to voxels by the frozen stage-1 decoder.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .decoder3d import CNNDecoder, CNNDecoderConfig, DecoderLayer, flatten_cube, reshape_to_cube
from .encoder import ConfigError, build_encoder, init_weights, pool_views
from .voxgrid import VoxelField, VoxelGrid


@dataclass(frozen=True)
class VQConfig:
    codebook_size: int = 2048
    code_dim: int = 512
    encoder_layers: int = 3
    decoder_layers: int = 3
    commitment_weight: float = 0.25
    encoder_channels: Tuple[int, ...] = (64, 128)
    decoder_channels: int = 64
    resolution: int = 32

    def __post_init__(self):
        if self.codebook_size < 2 or self.code_dim < 1:
            raise ConfigError("codebook needs K >= 2 entries of positive width")
        if len(self.encoder_channels) != self.encoder_layers - 1:
            raise ConfigError("encoder_channels lists the widths between the encoder's layers")
        if self.resolution % 2**self.encoder_layers:
            raise ConfigError("resolution must be divisible by 2**encoder_layers")

    @property
    def latent_side(self) -> int:
        return self.resolution // 2**self.encoder_layers

    @property
    def seq_len(self) -> int:
        return self.latent_side**3

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "VQConfig":
        d = dict(d)
        if "encoder_channels" in d:
            d["encoder_channels"] = tuple(d["encoder_channels"])
        return cls(**d)


TOY_VQ = VQConfig(encoder_channels=(16, 32), decoder_channels=16)


def quantize(z: torch.Tensor, codebook: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Nearest codebook row (squared Euclidean) for every row of ``z``.

    ``z`` is ``(..., code_dim)``; returns ``(indices, selected rows)``. Ties go
    to the lowest index.
    """
    flat = z.reshape(-1, z.shape[-1])
    d = (
        flat.pow(2).sum(1, keepdim=True)
        - 2 * flat @ codebook.t()
        + codebook.pow(2).sum(1)[None]
    )
    idx = torch.argmin(d, dim=1)  # first minimum on ties
    return idx.reshape(z.shape[:-1]), codebook[idx].reshape(z.shape)


class VQVAE(nn.Module):
    def __init__(self, cfg: VQConfig = VQConfig()):
        super().__init__()
        self.cfg = cfg
        widths = (1, *cfg.encoder_channels, cfg.code_dim)
        layers = []
        for i in range(cfg.encoder_layers):
            layers.append(nn.Conv3d(widths[i], widths[i + 1], 4, 2, 1))
            if i < cfg.encoder_layers - 1:
                layers.append(nn.ReLU())
        self.encoder = nn.Sequential(*layers)
        self.codebook = nn.Parameter(
            torch.empty(cfg.codebook_size, cfg.code_dim).uniform_(-1 / cfg.codebook_size, 1 / cfg.codebook_size)
        )
        self.decoder = CNNDecoder(
            cfg.code_dim,
            CNNDecoderConfig(
                channels=cfg.decoder_channels,
                upsample_stages=cfg.decoder_layers,
                query_side=cfg.latent_side,
                resolution=cfg.resolution,
            ),
        )

    def encode_latent(self, voxels: torch.Tensor) -> torch.Tensor:
        """``(B, R, R, R)`` -> pre-quantization ``(B, L, code_dim)`` (x-major cells)."""
        if voxels.shape[-1] != self.cfg.resolution:
            raise ValueError(f"expected {self.cfg.resolution}^3 voxels, got side {voxels.shape[-1]}")
        return flatten_cube(self.encoder(voxels.unsqueeze(1).float()))

    @torch.no_grad()
    def encode(self, voxels: torch.Tensor) -> torch.Tensor:
        return quantize(self.encode_latent(voxels), self.codebook)[0]

    def decode_logits(self, codes: torch.Tensor) -> torch.Tensor:
        if codes.min() < 0 or codes.max() >= self.cfg.codebook_size:
            raise ValueError(f"codes must lie in [0, {self.cfg.codebook_size})")
        return self.decoder.logits(reshape_to_cube(self.codebook[codes], self.cfg.latent_side))

    def decode(self, codes: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.decode_logits(codes))

    def forward(self, voxels: torch.Tensor):
        """Returns ``(reconstruction logits, vq loss, codes, pre-quantization latent)``."""
        z = self.encode_latent(voxels)
        codes, zq = quantize(z, self.codebook)
        vq_loss = F.mse_loss(zq, z.detach()) + self.cfg.commitment_weight * F.mse_loss(z, zq.detach())
        zq = z + (zq - z).detach()  # straight-through
        logits = self.decoder.logits(reshape_to_cube(zq, self.cfg.latent_side))
        return logits, vq_loss, codes, z

    @torch.no_grad()
    def reset_codes(self, z: torch.Tensor, used: torch.Tensor, generator: torch.Generator) -> int:
        """Re-seed unused codebook rows from random latents; returns how many were reset."""
        dead = torch.nonzero(~used).flatten()
        if len(dead) == 0:
            return 0
        flat = z.reshape(-1, z.shape[-1])
        pick = torch.randint(len(flat), (len(dead),), generator=generator)
        self.codebook[dead] = flat[pick]
        return len(dead)


def vq_encode(grid: VoxelGrid, vq: VQVAE) -> np.ndarray:
    """Code sequence (length ``seq_len``, ints in ``[0, K)``) of a single grid."""
    if grid.resolution != vq.cfg.resolution:
        raise ValueError(f"grid resolution {grid.resolution} != {vq.cfg.resolution}")
    vox = torch.from_numpy(np.array(grid.occupancy, dtype=np.float32))[None]
    return vq.encode(vox)[0].numpy()


@torch.no_grad()
def vq_decode(codes, vq: VQVAE) -> VoxelField:
    codes = torch.as_tensor(np.asarray(codes), dtype=torch.long)
    if codes.shape != (vq.cfg.seq_len,):
        raise ValueError(f"expected {vq.cfg.seq_len} codes, got shape {tuple(codes.shape)}")
    return VoxelField(vq.decode(codes[None])[0].double().numpy())


class CodeDecoder(nn.Module):
    """Causal transformer over code tokens, cross-attending to image memory."""

    def __init__(self, dim: int, heads: int, layers: int, codebook_size: int, seq_len: int = 64):
        super().__init__()
        self.codebook_size = codebook_size
        self.seq_len = seq_len
        self.start = codebook_size
        self.embed = nn.Embedding(codebook_size + 1, dim)
        self.pos = nn.Parameter(torch.empty(seq_len, dim))
        self.layers = nn.ModuleList(DecoderLayer(dim, heads, 4 * dim) for _ in range(layers))
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, codebook_size)
        nn.init.trunc_normal_(self.pos, std=0.02)
        nn.init.trunc_normal_(self.embed.weight, std=0.02)
        self.apply(init_weights)
        self.register_buffer("causal", torch.triu(torch.ones(seq_len, seq_len, dtype=torch.bool), 1), persistent=False)

    def forward(self, memory: torch.Tensor, codes: torch.Tensor) -> torch.Tensor:
        """Teacher-forced logits ``(B, n, K)`` for the first ``n`` targets ``codes``."""
        b, n = codes.shape
        inp = torch.cat([torch.full((b, 1), self.start, dtype=torch.long, device=codes.device), codes[:, :-1]], 1)
        x = self.embed(inp) + self.pos[:n]
        mask = self.causal[:n, :n]
        for layer in self.layers:
            x = layer(x, memory, attn_mask=mask)
        return self.head(self.norm(x))

    @torch.no_grad()
    def generate(self, memory: torch.Tensor) -> torch.Tensor:
        """Greedy decoding of a full ``seq_len`` sequence."""
        b = memory.shape[0]
        codes = torch.zeros(b, 0, dtype=torch.long, device=memory.device)
        for _ in range(self.seq_len):
            nxt = torch.zeros(b, 1, dtype=torch.long, device=memory.device)
            logits = self.forward(memory, torch.cat([codes, nxt], 1))
            codes = torch.cat([codes, logits[:, -1].argmax(-1, keepdim=True)], 1)
        return codes


class TwoStageReconstructor(nn.Module):
    """Image encoder + autoregressive code decoder + frozen VQ-VAE decoder."""

    def __init__(self, model_cfg, vq_cfg: VQConfig):
        super().__init__()
        self.cfg = model_cfg
        self.vq_cfg = vq_cfg
        self.encoder = build_encoder(model_cfg.encoder)
        dcfg = model_cfg.decoder
        self.decoder = CodeDecoder(dcfg.dim, dcfg.heads, dcfg.layers, vq_cfg.codebook_size, vq_cfg.seq_len)
        self.vqvae = VQVAE(vq_cfg)
        self.vqvae.requires_grad_(False)

    def encode_views(self, images: torch.Tensor) -> torch.Tensor:
        b, v = images.shape[:2]
        tokens = self.encoder(images.flatten(0, 1))
        return pool_views(tokens.reshape(b, v, *tokens.shape[1:]), dim=1)

    def code_logits(self, images: torch.Tensor, codes: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encode_views(images), codes)

    @torch.no_grad()
    def generate(self, images: torch.Tensor) -> torch.Tensor:
        return self.decoder.generate(self.encode_views(images))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.vqvae.decode(self.generate(images))
