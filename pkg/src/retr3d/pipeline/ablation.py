"""Ablation setups 1-6 as config deltas over a base experiment."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

from ..encoder import EncoderConfig
from ..losses import LossConfig
from .config import ExperimentConfig
from .evaluate import EvalReport, evaluate
from .train import train
from .twostage import train_two_stage

# Reference IoUs on ShapeNet (single view, base model) for labelling report rows.
REFERENCE_IOU = {0: 0.680, 1: 0.667, 2: 0.279, 3: 0.670, 4: 0.598, 5: 0.668, 6: 0.658}


@dataclass(frozen=True)
class AblationSpec:
    setup: int
    name: str
    encoder: str
    first_decoder: str
    second_decoder: str
    loss: str

    def __post_init__(self):
        if self.setup not in SETUPS:
            raise ValueError(f"ablation setup must be one of {sorted(SETUPS)}, got {self.setup}")


SETUPS = {
    0: ("Base", "Base", "CNN", "Dice"),
    1: ("Base", "Tiny", "CNN", "Dice"),
    2: ("Base (w/o pre.)", "Base", "CNN", "Dice"),
    3: ("ResNet-50", "Base", "CNN", "Dice"),
    4: ("Base", "Base", "VQ-VAE", "-"),
    5: ("Base", "Base", "CNN", "CE"),
    6: ("Base", "Base", "MLP", "Dice"),
}


def spec(setup: int) -> AblationSpec:
    if setup not in SETUPS:
        raise ValueError(f"ablation setup must be one of {sorted(SETUPS)}, got {setup}")
    name = "Base" if setup == 0 else f"Setup {setup}"
    return AblationSpec(setup, name, *SETUPS[setup])


def ablation_config(setup: int, exp: ExperimentConfig, resnet_weights: Optional[str] = None) -> ExperimentConfig:
    """Apply the setup's delta to ``exp``; everything else is left untouched."""
    spec(setup)
    m = exp.model
    if setup == 1:
        return replace(exp, model=replace(m, decoder=replace(m.decoder, layers=1, heads=1)))
    if setup == 2:
        return replace(exp, model=replace(m, encoder=replace(m.encoder, pretrained=False, weights_path=None)))
    if setup == 3:
        if exp.model.image_size % 32:
            raise ValueError(f"image size {exp.model.image_size} is not a multiple of the ResNet stride 32")
        enc = EncoderConfig(
            variant="resnet50",
            layers=0,
            heads=m.encoder.heads,
            dim=m.encoder.dim,
            patch_size=32,
            token_grid=exp.model.image_size // 32,
            pretrained=m.encoder.pretrained,
            weights_path=resnet_weights if m.encoder.pretrained else None,
        )
        return replace(exp, model=replace(m, encoder=enc))
    if setup == 4:
        return replace(exp, model=replace(m, head="vqvae"))
    if setup == 5:
        return replace(exp, train=replace(exp.train, loss=LossConfig("cross_entropy", exp.train.loss.epsilon)))
    if setup == 6:
        return replace(exp, model=replace(m, head="mlp"))
    return exp


def run_ablation(setup: int, exp: ExperimentConfig, source, out_dir, eval_source=None,
                 eval_views: Optional[int] = None, resnet_weights: Optional[str] = None,
                 stage1_steps: Optional[int] = None) -> EvalReport:
    """Train the setup's model, evaluate it and label the report with the setup name."""
    s = spec(setup)
    cfg = ablation_config(setup, exp, resnet_weights)
    out_dir = Path(out_dir) / f"setup{setup}"
    if setup == 4:
        ckpt = train_two_stage(cfg, source, out_dir, stage1_steps or cfg.train.max_steps, cfg.train.max_steps)
    else:
        ckpt = train(cfg, source, out_dir)[-1]
    return evaluate(ckpt, eval_source or source, eval_views or cfg.eval.views, cfg.eval.threshold,
                    cfg.eval.seed, label=s.name)


def format_ablation(rows) -> str:
    """Markdown table with the columns Name | Encoder | First Decoder | Second Decoder | Loss | IoU."""
    lines = ["| Name | Encoder | First Decoder | Second Decoder | Loss | IoU |", "|---|---|---|---|---|---|"]
    for setup, report in rows:
        s = spec(setup)
        lines.append(f"| {s.name} | {s.encoder} | {s.first_decoder} | {s.second_decoder} | {s.loss} | {report.overall_iou:.3f} |")
    return "\n".join(lines)
