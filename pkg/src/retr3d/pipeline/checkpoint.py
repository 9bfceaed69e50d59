"""Checkpoints as a single safetensors archive.

Tensors are stored under ``model/<name>`` and ``optim/<param index>/<key>``;
the resolved experiment config, step counter, optimizer hyper-parameters and
loop state travel as JSON strings in the archive metadata. Any safetensors
reader (numpy, torch, ...) can open the file.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Optional

import torch
from safetensors import safe_open
from safetensors.torch import save_file

from .config import ExperimentConfig


@dataclass
class Checkpoint:
    model_state: Dict[str, torch.Tensor]
    config: Dict[str, Any]
    step: int = 0
    optim_state: Optional[dict] = None
    extra: Dict[str, Any] = field(default_factory=dict)
    path: Optional[str] = None

    @property
    def experiment(self) -> ExperimentConfig:
        return ExperimentConfig.from_dict(self.config)


def _flatten_optim(state: dict) -> Dict[str, torch.Tensor]:
    out = {}
    for idx, entry in state["state"].items():
        for key, value in entry.items():
            t = value if torch.is_tensor(value) else torch.tensor(value)
            out[f"optim/{idx}/{key}"] = t.detach().cpu().contiguous()
    return out


def save_checkpoint(path, model: torch.nn.Module, config: ExperimentConfig, step: int,
                    optimizer: Optional[torch.optim.Optimizer] = None, extra: Optional[dict] = None) -> Path:
    """Write atomically: a temp file in the target directory, then ``os.replace``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {f"model/{k}": v.detach().cpu().contiguous() for k, v in model.state_dict().items()}
    meta = {
        "format": "retr3d-checkpoint-1",
        "config": json.dumps(config.to_dict()),
        "step": str(step),
        "extra": json.dumps(extra or {}),
    }
    if optimizer is not None:
        sd = optimizer.state_dict()
        tensors.update(_flatten_optim(sd))
        meta["param_groups"] = json.dumps(sd["param_groups"])
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", suffix=".safetensors", dir=path.parent)
    os.close(fd)
    try:
        save_file(tensors, tmp, metadata=meta)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path) -> Checkpoint:
    model_state, optim = {}, {}
    with safe_open(str(path), framework="pt") as f:
        meta = f.metadata() or {}
        if meta.get("format") != "retr3d-checkpoint-1":
            raise ValueError(f"{path} is not a retr3d checkpoint")
        for key in f.keys():
            kind, rest = key.split("/", 1)
            if kind == "model":
                model_state[rest] = f.get_tensor(key)
            else:
                idx, name = rest.split("/", 1)
                optim.setdefault(int(idx), {})[name] = f.get_tensor(key)
    optim_state = None
    if "param_groups" in meta:
        optim_state = {"state": optim, "param_groups": json.loads(meta["param_groups"])}
    return Checkpoint(
        model_state=model_state,
        config=json.loads(meta["config"]),
        step=int(meta["step"]),
        optim_state=optim_state,
        extra=json.loads(meta.get("extra", "{}")),
        path=str(path),
    )


def build_model(config: ExperimentConfig) -> torch.nn.Module:
    """Instantiate the architecture described by ``config`` (no weight files are read)."""
    from ..model import Reconstructor
    from ..vqvae import TwoStageReconstructor

    mcfg = replace(config.model, encoder=replace(config.model.encoder, pretrained=False, weights_path=None))
    if mcfg.head == "vqvae":
        return TwoStageReconstructor(mcfg, config.vq)
    return Reconstructor(mcfg)


def model_from_checkpoint(ckpt) -> torch.nn.Module:
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    model = build_model(ckpt.experiment)
    model.load_state_dict(ckpt.model_state)
    return model.eval()
