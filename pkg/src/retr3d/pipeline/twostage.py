"""Two-stage training: VQ-VAE on voxels, then image -> code-sequence transformer."""

from __future__ import annotations

import json
import logging
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from ..voxgrid import batch_iou
from ..vqvae import VQVAE, TwoStageReconstructor, VQConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .train import batches, derive_seed, load_batch, make_optimizer, set_determinism

log = logging.getLogger(__name__)


def train_vqvae(grids: torch.Tensor, cfg: VQConfig, steps: int, lr: float = 1e-3, batch_size: int = 8,
                seed: int = 0, reset_every: int = 25, metrics_path=None) -> Tuple[VQVAE, List[dict]]:
    """Fit the VQ-VAE with voxel BCE + codebook + commitment terms.

    Codebook rows unused over the last ``reset_every`` steps are re-seeded from
    encoder outputs; the dead-code fraction of each window is logged.
    """
    set_determinism(seed)
    vq = VQVAE(cfg)
    opt = torch.optim.AdamW(vq.parameters(), lr=lr, weight_decay=0.0)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    stream = batches(len(grids), batch_size, rng)
    used = torch.zeros(cfg.codebook_size, dtype=torch.bool)
    history = []
    out = open(metrics_path, "w") if metrics_path else None
    try:
        for step in range(1, steps + 1):
            x = grids[next(stream)]
            logits, vq_loss, codes, z = vq(x)
            recon = F.binary_cross_entropy_with_logits(logits, x)
            loss = recon + vq_loss
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite VQ-VAE loss at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            used[codes.flatten()] = True
            row = {
                "step": step,
                "loss": float(loss.item()),
                "recon": float(recon.item()),
                "iou": float(batch_iou(torch.sigmoid(logits.detach()), x).mean()),
            }
            if step % reset_every == 0:
                row["dead_fraction"] = float((~used).float().mean())
                if step < steps:
                    vq.reset_codes(z.detach(), used, gen)
                used.zero_()
            if not torch.isfinite(vq.codebook).all():
                raise RuntimeError(f"codebook became non-finite at step {step}")
            history.append(row)
            if out:
                out.write(json.dumps(row) + "\n")
    finally:
        if out:
            out.close()
    return vq.eval(), history


@torch.no_grad()
def reconstruction_iou(vq: VQVAE, grids: torch.Tensor, threshold: float = 0.5) -> float:
    return float(batch_iou(vq.decode(vq.encode(grids)), grids, threshold).mean())


@torch.no_grad()
def teacher_forced_accuracy(model: TwoStageReconstructor, source, views: int, seed: int = 1234) -> float:
    model.eval()
    correct = total = 0
    for i in range(len(source)):
        images = source.views(i, views, derive_seed(seed, i))[None]
        codes = model.vqvae.encode(source.target(i)[None])
        pred = model.code_logits(images, codes).argmax(-1)
        correct += int((pred == codes).sum())
        total += codes.numel()
    return correct / total


def train_code_decoder(model: TwoStageReconstructor, source, exp: ExperimentConfig, steps: int,
                       metrics_path=None) -> List[dict]:
    """Teacher-forced cross-entropy on the frozen VQ-VAE's code sequences."""
    tcfg = exp.train
    set_determinism(tcfg.seed)
    model.train()
    model.vqvae.eval()
    opt = make_optimizer(model, tcfg)
    rng = np.random.default_rng(tcfg.seed)
    stream = batches(len(source), tcfg.batch_size, rng)
    targets_cache = {}
    history = []
    out = open(metrics_path, "w") if metrics_path else None
    try:
        for step in range(steps):
            idx = next(stream)
            images, voxels = load_batch(source, idx, tcfg.views_per_sample, tcfg.seed, step)
            key = tuple(int(i) for i in idx)
            if key not in targets_cache:
                targets_cache[key] = model.vqvae.encode(voxels)
            codes = targets_cache[key]
            logits = model.code_logits(images, codes)
            loss = F.cross_entropy(logits.flatten(0, 1), codes.flatten())
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite stage-2 loss at step {step + 1}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            row = {
                "step": step + 1,
                "loss": float(loss.item()),
                "token_acc": float((logits.argmax(-1) == codes).float().mean()),
            }
            history.append(row)
            if out:
                out.write(json.dumps(row) + "\n")
    finally:
        if out:
            out.close()
    return history


def train_two_stage(exp: ExperimentConfig, source, out_dir, stage1_steps: int, stage2_steps: int,
                    stage1_lr: float = 1e-3, vq_checkpoint: Optional[str] = None) -> Path:
    """Stage 1 (unless ``vq_checkpoint`` is given), then stage 2; returns the final checkpoint path.

    The stage-1 checkpoint is written to ``out_dir/vqvae.safetensors`` and
    stage 2 reloads it from disk, frozen.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    exp = replace(exp, model=replace(exp.model, head="vqvae"))
    if vq_checkpoint is None:
        grids = torch.stack([source.target(i) for i in range(len(source))])
        vq, _ = train_vqvae(grids, exp.vq, stage1_steps, stage1_lr, exp.train.batch_size, exp.train.seed,
                            metrics_path=out_dir / "metrics_stage1.jsonl")
        vq_checkpoint = save_checkpoint(out_dir / "vqvae.safetensors", vq, exp, stage1_steps)
    stage1 = load_checkpoint(vq_checkpoint)

    model = TwoStageReconstructor(exp.model, exp.vq)
    model.vqvae.load_state_dict(stage1.model_state)
    train_code_decoder(model, source, exp, stage2_steps, out_dir / "metrics.jsonl")
    model.eval()
    return save_checkpoint(out_dir / f"ckpt_{stage2_steps:07d}.safetensors", model, exp, stage2_steps,
                           extra={"vq_checkpoint": str(vq_checkpoint)})
