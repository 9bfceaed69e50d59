"""Image encoders producing token sequences, and multi-view pooling.

The transformer encoder is a pre-norm ViT/DeiT stack. Patch tokens are kept
and the classification token is dropped from the output, so a view becomes a
``(T, D)`` sequence with ``T = token_grid ** 2``.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Dict, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class WeightImportError(RuntimeError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    variant: str = "base"  # base | tiny | resnet50
    layers: int = 12
    heads: int = 12
    dim: int = 768
    patch_size: int = 16
    token_grid: int = 14
    mlp_ratio: float = 4.0
    pretrained: bool = False
    weights_path: Optional[str] = None

    def __post_init__(self):
        if self.variant not in ("base", "tiny", "resnet50"):
            raise ConfigError(f"unknown encoder variant {self.variant!r}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.variant == "resnet50" and self.patch_size != 32:
            raise ConfigError("resnet50 features have stride 32; set patch_size=32")
        if self.pretrained and not self.weights_path:
            raise ConfigError("pretrained=True needs weights_path (weights are never downloaded)")

    @property
    def image_size(self) -> int:
        return self.patch_size * self.token_grid

    @property
    def num_tokens(self) -> int:
        return self.token_grid**2


ENCODER_PRESETS = {
    # DeiT-B / DeiT-Ti geometry: 16-pixel patches at 224 px -> 14x14 tokens.
    "base": EncoderConfig("base", 12, 12, 768, 16, 14),
    "tiny": EncoderConfig("tiny", 12, 3, 192, 16, 14),
    # 16x16 token grid; pretrained 14x14 position tables are interpolated.
    "base_faithful": EncoderConfig("base", 12, 12, 768, 16, 16),
    "tiny_faithful": EncoderConfig("tiny", 12, 3, 192, 16, 16),
    "resnet50": EncoderConfig("resnet50", 0, 12, 768, 32, 7),
}


def patchify(image: torch.Tensor, patch_size: int, token_grid: Optional[int] = None) -> torch.Tensor:
    """Split ``(..., C, S, S)`` images into ``(..., G*G, C*p*p)`` rows.

    Row ``k`` is the patch at grid position ``(k // G, k % G)``, flattened
    channel-first then row-major.
    """
    *lead, c, h, w = image.shape
    if h != w or h % patch_size:
        raise ValueError(f"image of size {h}x{w} cannot be tiled by {patch_size}-pixel patches")
    g = h // patch_size
    if token_grid is not None and g != token_grid:
        raise ValueError(f"image gives a {g}x{g} patch grid, config expects {token_grid}x{token_grid}")
    x = image.reshape(*lead, c, g, patch_size, g, patch_size)
    n = len(lead)
    x = x.permute(*range(n), n + 1, n + 3, n, n + 2, n + 4)
    return x.reshape(*lead, g * g, c * patch_size * patch_size)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class ViTEncoder(nn.Module):
    """Patch embedding + learned positions + pre-norm transformer blocks."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        if cfg.variant == "resnet50":
            raise ConfigError("use ResNetEncoder for the resnet50 variant")
        self.cfg = cfg
        d = cfg.dim
        self.patch_proj = nn.Linear(3 * cfg.patch_size**2, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_tokens + 1, d))
        self.layers = nn.ModuleList(Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(d, eps=1e-6)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        self.apply(init_weights)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """``(N, 3, S, S)`` images -> ``(N, T, D)`` patch-token states."""
        x = self.patch_proj(patchify(images, self.cfg.patch_size, self.cfg.token_grid))
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1) + self.pos_embed
        for layer in self.layers:
            x = layer(x)
        return self.norm(x)[:, 1:]


class ResNetEncoder(nn.Module):
    """ResNet-50 trunk whose final ``2048 x G' x G'`` map is projected to ``D``-wide tokens."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        from torchvision.models import resnet50

        self.cfg = cfg
        trunk = resnet50(weights=None)
        self.body = nn.Sequential(*list(trunk.children())[:-2])
        self.proj = nn.Linear(2048, cfg.dim)
        init_weights(self.proj)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.shape[-1] != self.cfg.image_size:
            raise ValueError(f"expected {self.cfg.image_size}px images, got {images.shape[-1]}px")
        fmap = self.body(images)
        return self.proj(fmap.flatten(2).transpose(1, 2))


def build_encoder(cfg: EncoderConfig) -> nn.Module:
    enc = ResNetEncoder(cfg) if cfg.variant == "resnet50" else ViTEncoder(cfg)
    if cfg.pretrained:
        if cfg.variant == "resnet50":
            enc.body.load_state_dict(load_resnet_weights(cfg.weights_path))
        else:
            enc.load_state_dict(load_pretrained(cfg.weights_path, cfg))
    return enc


def pool_views(seqs: Union[torch.Tensor, Sequence[torch.Tensor]], dim: int = 0) -> torch.Tensor:
    """Average token sequences over the view axis.

    Values are sorted along the view axis before summation so the result is
    bit-identical under any reordering of the views.
    """
    if isinstance(seqs, torch.Tensor):
        stacked = seqs
    else:
        seqs = list(seqs)
        if not seqs:
            raise ValueError("pool_views needs at least one sequence")
        shapes = {tuple(s.shape) for s in seqs}
        if len(shapes) != 1:
            raise ValueError(f"all sequences must share one shape, got {sorted(shapes)}")
        stacked = torch.stack(seqs, dim=dim)
    if stacked.shape[dim] == 0:
        raise ValueError("pool_views needs at least one sequence")
    if stacked.shape[dim] == 1:
        return stacked.squeeze(dim)
    ordered, _ = torch.sort(stacked, dim=dim)
    return ordered.sum(dim=dim) / stacked.shape[dim]


# --------------------------------------------------------------------------
# pretrained weight import
# --------------------------------------------------------------------------


def _read_archive(path) -> Dict[str, torch.Tensor]:
    path = Path(path)
    if not path.is_file():
        raise WeightImportError(f"weights file not found: {path}")
    if path.suffix == ".safetensors":
        from safetensors.torch import load_file

        state = load_file(str(path))
    elif path.suffix == ".npz":
        with np.load(path) as z:
            state = {k: torch.from_numpy(z[k]) for k in z.files}
    else:
        state = torch.load(path, map_location="cpu", weights_only=True)
    for key in ("model", "state_dict"):
        if isinstance(state, dict) and key in state and isinstance(state[key], dict):
            state = state[key]
    return state


def _name_map():
    text = resources.files("retr3d.data").joinpath("vit_name_map.json").read_text()
    entries = json.loads(text)["entries"]
    return [(e["archive"], e["param"], e.get("transform")) for e in entries]


def interpolate_pos_grid(grid: torch.Tensor, size: int) -> torch.Tensor:
    """Bilinearly resample a ``(G0*G0, D)`` positional table to ``(size*size, D)``.

    Uses ``align_corners=True`` so the four corner embeddings are kept exactly.
    """
    g0 = math.isqrt(grid.shape[0])
    if g0 * g0 != grid.shape[0]:
        raise WeightImportError(f"positional table of length {grid.shape[0]} is not a square grid")
    if g0 == size:
        return grid
    x = grid.reshape(1, g0, g0, -1).permute(0, 3, 1, 2).float()
    x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=True)
    return x.permute(0, 2, 3, 1).reshape(size * size, -1).to(grid.dtype)


def load_pretrained(weights_file, cfg: EncoderConfig) -> Dict[str, torch.Tensor]:
    """Import a DeiT/ViT checkpoint as a :class:`ViTEncoder` state dict.

    Archive names are translated through ``data/vit_name_map.json``. Every
    tensor is shape-checked against ``cfg``; the only tolerated mismatch is a
    different positional grid, which is interpolated.
    """
    archive = _read_archive(weights_file)
    expected = {k: v.shape for k, v in ViTEncoder(replace(cfg, pretrained=False)).state_dict().items()}
    params = {}
    for archive_pat, param_pat, transform in _name_map():
        layer_idx = range(cfg.layers) if "{i}" in archive_pat else [None]
        for i in layer_idx:
            src = archive_pat.format(i=i) if i is not None else archive_pat
            dst = param_pat.format(i=i) if i is not None else param_pat
            if src not in archive:
                raise WeightImportError(f"missing tensor {src!r} in {weights_file}")
            t = archive[src].detach().clone().float()
            if transform == "flatten_patch":
                t = t.reshape(t.shape[0], -1)
            elif transform == "pos_embed":
                t = t.reshape(-1, t.shape[-1])
                n_prefix = t.shape[0] - math.isqrt(t.shape[0] - 1) ** 2
                patch = interpolate_pos_grid(t[n_prefix:], cfg.token_grid)
                if patch.shape[-1] != cfg.dim:
                    raise WeightImportError(
                        f"{src}: width {patch.shape[-1]} does not match encoder dim {cfg.dim}"
                    )
                t = torch.cat([t[:1], patch]).unsqueeze(0)
            if tuple(t.shape) != tuple(expected[dst]):
                raise WeightImportError(
                    f"{src}: shape {tuple(t.shape)} incompatible with {dst} {tuple(expected[dst])}"
                )
            params[dst] = t
    extra = sorted(k for k in archive if re.match(r"blocks\.(\d+)\.", k) and int(k.split(".")[1]) >= cfg.layers)
    if extra:
        raise WeightImportError(f"archive has more layers than config ({cfg.layers}): {extra[0]} ...")
    missing = set(expected) - set(params)
    if missing:
        raise WeightImportError(f"name map does not cover {sorted(missing)}")
    return params


def load_resnet_weights(path) -> Dict[str, torch.Tensor]:
    """torchvision ResNet-50 state dict without the classifier head."""
    state = _read_archive(path)
    # the trunk is kept as a Sequential, so top-level torchvision names become child indices
    index = {"conv1": "0", "bn1": "1", "layer1": "4", "layer2": "5", "layer3": "6", "layer4": "7"}
    out = {}
    for k, v in state.items():
        head, _, rest = k.partition(".")
        if head == "fc":
            continue
        if head not in index:
            raise WeightImportError(f"unexpected tensor {k!r} in ResNet-50 archive")
        out[f"{index[head]}.{rest}"] = v
    return out


def export_deit_archive(encoder: ViTEncoder, path) -> None:
    """Write ``encoder`` weights under DeiT archive names (inverse of :func:`load_pretrained`)."""
    state = encoder.state_dict()
    cfg = encoder.cfg
    out = {}
    for archive_pat, param_pat, transform in _name_map():
        layer_idx = range(cfg.layers) if "{i}" in archive_pat else [None]
        for i in layer_idx:
            src = archive_pat.format(i=i) if i is not None else archive_pat
            dst = param_pat.format(i=i) if i is not None else param_pat
            t = state[dst]
            if transform == "flatten_patch":
                t = t.reshape(cfg.dim, 3, cfg.patch_size, cfg.patch_size)
            out[src] = t.contiguous()
    from safetensors.torch import save_file

    if str(path).endswith(".safetensors"):
        save_file(out, str(path))
    else:
        torch.save({"model": out}, path)
