"""IoU evaluation, multi-view sweeps and train/eval view-count cross tables."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Sequence, Union

import torch

from ..voxgrid import batch_iou
from .checkpoint import Checkpoint, load_checkpoint, model_from_checkpoint
from .train import derive_seed

EVAL_SEED = 1234
TABLE2_VIEWS = (1, 2, 3, 4, 5, 8, 12, 16, 20)


@dataclass
class EvalReport:
    per_category_iou: Dict[str, float]
    overall_iou: float  # mean over categories
    views_used: int
    threshold: float
    sample_count: int
    per_example_iou: float = float("nan")  # mean over objects, for comparison only
    label: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _as_model(model_or_ckpt) -> torch.nn.Module:
    if isinstance(model_or_ckpt, torch.nn.Module):
        return model_or_ckpt
    return model_from_checkpoint(model_or_ckpt)


def aggregate(categories: Sequence[str], ious: Sequence[float], views: int, threshold: float, label: str = "") -> EvalReport:
    by_cat = defaultdict(list)
    for c, v in zip(categories, ious):
        by_cat[c].append(v)
    per_cat = {c: sum(by_cat[c]) / len(by_cat[c]) for c in sorted(by_cat)}
    overall = sum(per_cat.values()) / len(per_cat)
    return EvalReport(per_cat, overall, views, threshold, len(ious), sum(ious) / len(ious), label)


@torch.no_grad()
def evaluate(model_or_ckpt, source, views: int, threshold: float = 0.5, seed: int = EVAL_SEED,
             batch_size: int = 16, device=None, label: str = "") -> EvalReport:
    """Per-object IoU with ``views`` sampled views, averaged per category then across categories."""
    if len(source) == 0:
        raise ValueError("cannot evaluate on an empty split")
    model = _as_model(model_or_ckpt)
    was_training = model.training
    model.eval()
    dev = torch.device(device) if device else next(model.parameters()).device
    cats, ious = [], []
    try:
        for start in range(0, len(source), batch_size):
            idx = range(start, min(start + batch_size, len(source)))
            for i in idx:
                if views > source.num_views(i):
                    raise ValueError(f"object {source.object_id(i)} has {source.num_views(i)} views, asked for {views}")
            images = torch.stack([source.views(i, views, derive_seed(seed, i)) for i in idx]).to(dev)
            targets = torch.stack([source.target(i) for i in idx]).to(dev)
            probs = model(images).float()
            ious.extend(batch_iou(probs, targets, threshold).tolist())
            cats.extend(source.category(i) for i in idx)
    finally:
        model.train(was_training)
    return aggregate(cats, ious, views, threshold, label)


def sweep(model_or_ckpt, source, views_list: Sequence[int] = TABLE2_VIEWS, **kw) -> List[EvalReport]:
    model = _as_model(model_or_ckpt)
    return [evaluate(model, source, v, **kw) for v in views_list]


def format_sweep(reports: Sequence[EvalReport], name: str = "model") -> str:
    head = "| Model | " + " | ".join(f"{r.views_used} view{'s' if r.views_used > 1 else ''}" for r in reports) + " |"
    sep = "|" + "---|" * (len(reports) + 1)
    row = f"| {name} | " + " | ".join(f"{r.overall_iou:.3f}" for r in reports) + " |"
    return "\n".join([head, sep, row])


@dataclass
class CrossTable:
    train_views: List[int]
    eval_views: List[int]
    cells: List[List[float]] = field(default_factory=list)

    def to_markdown(self) -> str:
        lines = ["| Train \\ Eval | " + " | ".join(str(v) for v in self.eval_views) + " |"]
        lines.append("|" + "---|" * (len(self.eval_views) + 1))
        for tv, row in zip(self.train_views, self.cells):
            lines.append(f"| {tv} | " + " | ".join(f"{c:.3f}" for c in row) + " |")
        return "\n".join(lines)


def multi_view_cross_table(ckpts: Mapping[int, Union[Checkpoint, str]], source, eval_views: Sequence[int],
                           threshold: float = 0.5, seed: int = EVAL_SEED) -> CrossTable:
    """Rows are training view counts, columns evaluation view counts, cells overall IoU."""
    loaded = {v: c if isinstance(c, (Checkpoint, torch.nn.Module)) else load_checkpoint(c) for v, c in ckpts.items()}
    geometries = set()
    for c in loaded.values():
        if isinstance(c, Checkpoint):
            geometries.add(json.dumps(c.config["model"], sort_keys=True))
        else:
            geometries.add(json.dumps(c.cfg.to_dict(), sort_keys=True))
    if len(geometries) > 1:
        raise ValueError("all checkpoints in a cross table must share one model geometry")
    table = CrossTable(sorted(loaded), list(eval_views))
    for tv in table.train_views:
        model = _as_model(loaded[tv])
        table.cells.append([evaluate(model, source, ev, threshold, seed).overall_iou for ev in eval_views])
    return table
