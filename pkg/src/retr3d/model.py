"""End-to-end reconstructor: encoder -> view pooling -> query decoder -> voxel head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import torch
import torch.nn as nn

from .decoder3d import CNNDecoder, CNNDecoderConfig, DecoderConfig, MLPDecoder, QueryDecoder, reshape_to_cube
from .encoder import ENCODER_PRESETS, ConfigError, EncoderConfig, build_encoder, pool_views


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=lambda: ENCODER_PRESETS["base"])
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    cnn: CNNDecoderConfig = field(default_factory=CNNDecoderConfig)
    head: str = "cnn"  # cnn | mlp | vqvae

    def __post_init__(self):
        if self.head not in ("cnn", "mlp", "vqvae"):
            raise ConfigError(f"unknown head {self.head!r}")
        if self.encoder.dim != self.decoder.dim:
            raise ConfigError(f"encoder dim {self.encoder.dim} != decoder dim {self.decoder.dim}")
        if self.cnn.query_side != self.decoder.query_side:
            raise ConfigError("cnn.query_side must equal decoder.query_side")

    @property
    def resolution(self) -> int:
        return self.cnn.resolution

    @property
    def image_size(self) -> int:
        return self.encoder.image_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cnn = dict(d.get("cnn", {}))
        if "residual_kernels" in cnn:
            cnn["residual_kernels"] = tuple(cnn["residual_kernels"])
        return cls(
            encoder=EncoderConfig(**d.get("encoder", {})),
            decoder=DecoderConfig(**d.get("decoder", {})),
            cnn=CNNDecoderConfig(**cnn),
            head=d.get("head", "cnn"),
        )


def _preset(enc: EncoderConfig, layers: int, heads: int) -> ModelConfig:
    return ModelConfig(enc, DecoderConfig(layers, heads, enc.dim), CNNDecoderConfig())


TOY_ENCODER = EncoderConfig("tiny", layers=2, heads=2, dim=64, patch_size=4, token_grid=8)

PRESETS = {
    "base": _preset(ENCODER_PRESETS["base"], 8, 12),
    "small": _preset(ENCODER_PRESETS["tiny"], 6, 3),
    "base_faithful": _preset(ENCODER_PRESETS["base_faithful"], 8, 12),
    "small_faithful": _preset(ENCODER_PRESETS["tiny_faithful"], 6, 3),
    # desk-scale variant of "small" for the toy dataset (32 px renders)
    "toy": ModelConfig(
        TOY_ENCODER,
        DecoderConfig(layers=2, heads=2, dim=64),
        CNNDecoderConfig(channels=16),
    ),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(cfg, **overrides) if overrides else cfg


class Reconstructor(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.head == "vqvae":
            raise ConfigError("the vqvae head is built by retr3d.vqvae.TwoStageReconstructor")
        self.cfg = cfg
        self.encoder = build_encoder(cfg.encoder)
        self.decoder = QueryDecoder(cfg.decoder)
        if cfg.head == "cnn":
            self.head = CNNDecoder(cfg.decoder.dim, cfg.cnn)
        else:
            self.head = MLPDecoder(cfg.decoder.dim, cfg.decoder.query_side, cfg.resolution)

    def encode_views(self, images: torch.Tensor) -> torch.Tensor:
        """``(B, V, 3, S, S)`` -> view-averaged ``(B, T, D)`` memory."""
        b, v = images.shape[:2]
        tokens = self.encoder(images.flatten(0, 1))
        return pool_views(tokens.reshape(b, v, *tokens.shape[1:]), dim=1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """``(B, V, 3, S, S)`` -> ``(B, R, R, R)`` occupancy probabilities."""
        grid = self.decoder(self.encode_views(images))
        if self.cfg.head == "cnn":
            return self.head(reshape_to_cube(grid, self.cfg.decoder.query_side))
        return self.head(grid)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def count_params(cfg: ModelConfig) -> int:
    """Exact trainable-parameter count, built on the meta device (no memory)."""
    if cfg.encoder.pretrained:
        cfg = replace(cfg, encoder=replace(cfg.encoder, pretrained=False, weights_path=None))
    with torch.device("meta"):
        if cfg.head == "vqvae":
            from .vqvae import TwoStageReconstructor, VQConfig

            model = TwoStageReconstructor(cfg, VQConfig())
        else:
            model = Reconstructor(cfg)
    return count_parameters(model)
