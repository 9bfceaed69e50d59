"""Training loop for the single-stage reconstructor."""

from __future__ import annotations

import contextlib
import json
import logging
import math
import random
from pathlib import Path
from typing import Callable, Iterator, List, Optional

import numpy as np
import torch

from ..datasets import RecordSource, ToySource, load_pix3d_manifest, load_shapenet_manifest, make_toy_dataset
from ..losses import voxel_loss
from ..voxgrid import batch_iou
from .checkpoint import build_model, load_checkpoint, save_checkpoint
from .config import ExperimentConfig

log = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"


class TrainingError(RuntimeError):
    pass


def set_determinism(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def make_source(exp: ExperimentConfig, split: str = "train"):
    d = exp.data
    if d.kind == "toy":
        return ToySource(make_toy_dataset(d.toy_n, d.toy_seed, d.resolution, d.toy_views, exp.preprocess))
    if d.root is None:
        raise ValueError(f"data.root is required for data.kind={d.kind!r}")
    if d.kind == "shapenet":
        records = load_shapenet_manifest(d.root, split, d.split_dir)
    elif d.kind == "pix3d":
        records = load_pix3d_manifest(d.root)
    else:
        raise ValueError(f"unknown data.kind {d.kind!r}")
    return RecordSource(records, exp.preprocess, d.resolution)


def batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless epoch-wise shuffled batches; a trailing partial batch is dropped."""
    bs = min(batch_size, n)
    while True:
        perm = rng.permutation(n)
        for start in range(0, n - bs + 1, bs):
            yield perm[start : start + bs]


def load_batch(source, idx, views: int, seed: int, step: int):
    images = torch.stack([source.views(int(i), views, derive_seed(seed, step, int(i))) for i in idx])
    targets = torch.stack([source.target(int(i)) for i in idx])
    return images, targets


def autocast_context(enabled: bool, device: torch.device):
    if not enabled:
        return contextlib.nullcontext()
    dtype = torch.float16 if device.type == "cuda" else torch.bfloat16
    return torch.autocast(device.type, dtype=dtype)


def read_metrics(path) -> List[dict]:
    """Parse a metrics file, skipping a truncated or corrupt line (e.g. after a crash)."""
    rows = []
    with open(path) as f:
        for line in f:
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError:
                continue
    return rows


def make_optimizer(model: torch.nn.Module, tcfg) -> torch.optim.Optimizer:
    return torch.optim.AdamW(
        [p for p in model.parameters() if p.requires_grad],
        lr=tcfg.learning_rate,
        betas=(tcfg.beta1, tcfg.beta2),
        weight_decay=tcfg.weight_decay,
    )


def make_scheduler(opt, tcfg):
    if tcfg.lr_schedule == "cosine":
        total = max(tcfg.max_steps, 1)
        return torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 0.5 * (1 + math.cos(math.pi * min(s, total) / total)))
    return None


def train(
    exp: ExperimentConfig,
    source,
    out_dir,
    resume=None,
    device: Optional[str] = None,
    model: Optional[torch.nn.Module] = None,
    on_step: Optional[Callable[[int, dict], None]] = None,
) -> List[Path]:
    """Run ``exp.train.max_steps`` optimizer steps; returns the checkpoint paths written.

    Metrics (``step``, ``loss``, ``iou``) are appended to ``out_dir/metrics.jsonl``.
    With mixed precision off the run is reproducible bit-for-bit from the seed.
    """
    tcfg = exp.train
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dev = torch.device(device or ("cuda" if torch.cuda.is_available() else "cpu"))
    set_determinism(tcfg.seed)

    if model is None:
        model = build_model(exp) if resume else _fresh_model(exp)
    model.to(dev).train()
    opt = make_optimizer(model, tcfg)
    sched = make_scheduler(opt, tcfg)
    scaler = torch.amp.GradScaler(dev.type, enabled=tcfg.mixed_precision and dev.type == "cuda")

    rng = np.random.default_rng(tcfg.seed)
    start = 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        model.load_state_dict(ckpt.model_state)
        if ckpt.optim_state is not None:
            opt.load_state_dict(ckpt.optim_state)
        start = ckpt.step
        if "rng" in ckpt.extra:
            rng.bit_generator.state = ckpt.extra["rng"]
        if sched is not None:
            sched.last_epoch = start
    elif (out_dir / METRICS_FILE).exists():
        (out_dir / METRICS_FILE).unlink()

    stream = batches(len(source), tcfg.batch_size, rng)
    saved = []
    with open(out_dir / METRICS_FILE, "a") as metrics:
        for step in range(start, tcfg.max_steps):
            idx = next(stream)
            images, targets = load_batch(source, idx, tcfg.views_per_sample, tcfg.seed, step)
            images, targets = images.to(dev), targets.to(dev)
            with autocast_context(tcfg.mixed_precision, dev):
                probs = model(images)
            loss = voxel_loss(probs.float(), targets, tcfg.loss)
            if not torch.isfinite(loss):
                ids = [source.object_id(int(i)) for i in idx]
                raise TrainingError(f"non-finite loss {loss.item()} at step {step + 1}; batch objects {ids}")
            opt.zero_grad(set_to_none=True)
            scaler.scale(loss).backward()
            scaler.step(opt)
            scaler.update()
            if sched is not None:
                sched.step()
            done = step + 1
            row = {
                "step": done,
                "loss": float(loss.item()),
                "iou": float(batch_iou(probs.detach().float(), targets, exp.eval.threshold).mean()),
            }
            if done % tcfg.log_every == 0 or done == tcfg.max_steps:
                metrics.write(json.dumps(row) + "\n")
                metrics.flush()
            if on_step is not None:
                on_step(done, row)
            if (tcfg.checkpoint_every and done % tcfg.checkpoint_every == 0) or done == tcfg.max_steps:
                path = out_dir / f"ckpt_{done:07d}.safetensors"
                save_checkpoint(path, model, exp, done, opt, {"rng": rng.bit_generator.state})
                saved.append(path)
    return saved


def _fresh_model(exp: ExperimentConfig) -> torch.nn.Module:
    from ..model import Reconstructor

    if exp.model.head == "vqvae":
        raise ValueError("the two-stage model is trained with retr3d.pipeline.twostage")
    return Reconstructor(exp.model)
