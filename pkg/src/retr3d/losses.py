"""Training objectives on voxel occupancy probabilities.

Both losses take probabilities ``p`` and binary targets ``y`` of identical
shape ``(N, N, N)`` or batched ``(B, N, N, N)``. Batched inputs are reduced
per sample first and then averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

DEFAULT_EPS = 1e-6


@dataclass(frozen=True)
class LossConfig:
    kind: str = "dice"
    epsilon: float = DEFAULT_EPS

    def __post_init__(self):
        if self.kind not in ("dice", "cross_entropy"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


def _per_sample(p: torch.Tensor, y: torch.Tensor):
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: prediction {tuple(p.shape)} vs target {tuple(y.shape)}")
    if p.dim() == 3:
        return p.reshape(1, -1), y.reshape(1, -1).to(p.dtype)
    return p.flatten(1), y.flatten(1).to(p.dtype)


def _osum(x: torch.Tensor) -> torch.Tensor:
    # sorted before reduction: the result depends only on the multiset of values,
    # so any voxel permutation gives a bit-identical loss
    return torch.sort(x, dim=1).values.sum(1)


def dice_loss(p: torch.Tensor, y: torch.Tensor, eps: float = DEFAULT_EPS) -> torch.Tensor:
    """Two-sided Dice loss: one minus the foreground and background overlap ratios.

    Each denominator is clamped from below at ``eps`` so the all-empty and
    all-full corner cases stay finite without perturbing ordinary inputs.
    """
    p, y = _per_sample(p, y)
    fg = _osum(p * y) / _osum(p + y).clamp_min(eps)
    bg = _osum((1 - p) * (1 - y)) / _osum(2 - p - y).clamp_min(eps)
    return (1 - fg - bg).mean()


def ce_loss(p: torch.Tensor, y: torch.Tensor, eps: float = DEFAULT_EPS) -> torch.Tensor:
    """Voxelwise binary cross-entropy with ``p`` clamped into ``[eps, 1 - eps]``."""
    p, y = _per_sample(p, y)
    p = p.clamp(eps, 1 - eps)
    bce = -(y * torch.log(p) + (1 - y) * torch.log1p(-p))
    return (_osum(bce) / bce.shape[1]).mean()


def voxel_loss(p: torch.Tensor, y: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    if cfg.kind == "dice":
        return dice_loss(p, y, cfg.epsilon)
    return ce_loss(p, y, cfg.epsilon)
