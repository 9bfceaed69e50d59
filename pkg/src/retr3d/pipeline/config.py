"""Experiment configuration: one YAML file, dotted CLI overrides, typed dataclasses.

Precedence is ``--set`` overrides > config file > preset defaults. Keys::

    preset: small            # base | small | base_faithful | small_faithful | toy
    model:   {encoder: {...}, decoder: {...}, cnn: {...}, head: cnn}
    vq:      {codebook_size: 2048, code_dim: 512, ...}           # two-stage setup only
    train:   {learning_rate: 1.0e-4, batch_size: 16, max_steps: ..., loss: {kind: dice}}
    preprocess: {target_size: 224, channel_means: [...], ...}
    data:    {kind: shapenet | pix3d | toy, root: ..., toy_n: 8, toy_seed: 0, toy_views: 8}
    eval:    {views: 1, threshold: 0.5, seed: 1234}
"""

from __future__ import annotations

import copy
import re
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional

import yaml

from ..datasets import TOY_PREPROCESS, PreprocessConfig
from ..encoder import ConfigError
from ..losses import LossConfig
from ..model import PRESETS, ModelConfig
from ..vqvae import TOY_VQ, VQConfig


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-2
    batch_size: int = 16
    max_steps: int = 1000
    views_per_sample: int = 1
    mixed_precision: bool = False
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    lr_schedule: str = "constant"  # constant | cosine
    checkpoint_every: int = 0  # 0: only at the end
    log_every: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 1 <= self.views_per_sample <= 24:
            raise ConfigError("views_per_sample must lie in 1..24")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossConfig(**self.loss))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EvalConfig:
    views: int = 1
    threshold: float = 0.5
    seed: int = 1234
    batch_size: int = 16


@dataclass(frozen=True)
class DataConfig:
    kind: str = "toy"
    root: Optional[str] = None
    split_dir: Optional[str] = None
    resolution: int = 32
    toy_n: int = 8
    toy_seed: int = 0
    toy_views: int = 8


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig
    train: TrainConfig = field(default_factory=TrainConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    vq: VQConfig = field(default_factory=VQConfig)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "preprocess": asdict(self.preprocess),
            "data": asdict(self.data),
            "eval": asdict(self.eval),
            "vq": self.vq.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        pre = dict(d.get("preprocess", {}))
        for k in ("channel_means", "channel_stds", "background_fill"):
            if k in pre:
                pre[k] = tuple(pre[k])
        return cls(
            model=ModelConfig.from_dict(d["model"]),
            train=TrainConfig(**d.get("train", {})),
            preprocess=PreprocessConfig(**pre),
            data=DataConfig(**d.get("data", {})),
            eval=EvalConfig(**d.get("eval", {})),
            vq=VQConfig.from_dict(d.get("vq", {})),
        )


def defaults(preset: str = "small") -> dict:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    toy = preset == "toy"
    cfg = ExperimentConfig(
        model=PRESETS[preset],
        preprocess=TOY_PREPROCESS if toy else PreprocessConfig(PRESETS[preset].image_size),
        vq=TOY_VQ if toy else VQConfig(),
    )
    return cfg.to_dict()


def _merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_override(item: str) -> Dict[str, Any]:
    """``"train.loss.kind=cross_entropy"`` -> nested dict, value parsed as YAML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    value = yaml.safe_load(raw)
    for part in reversed(key.strip().split(".")):
        value = {part: value}
    return value


_FLOAT_RE = re.compile(r"^[-+]?(\d+\.?\d*|\.\d+)[eE][-+]?\d+$")


def _coerce(obj):
    # YAML 1.1 reads "1e-4" as a string
    if isinstance(obj, dict):
        return {k: _coerce(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_coerce(v) for v in obj]
    if isinstance(obj, str) and _FLOAT_RE.match(obj):
        return float(obj)
    return obj


def resolve(path: Optional[str] = None, overrides: List[str] = (), preset: Optional[str] = None,
            base: Optional[dict] = None) -> ExperimentConfig:
    """Merge defaults (a preset, or ``base``), the YAML file at ``path``, then ``overrides``."""
    file_cfg = {}
    if path:
        with open(path) as f:
            file_cfg = yaml.safe_load(f) or {}
    flag_cfg = {}
    for item in overrides:
        flag_cfg = _merge(flag_cfg, parse_override(item))
    name = preset or flag_cfg.pop("preset", None) or file_cfg.pop("preset", None) or "small"
    file_cfg.pop("preset", None)
    merged = _coerce(_merge(_merge(base if base is not None else defaults(name), file_cfg), flag_cfg))
    try:
        return ExperimentConfig.from_dict(merged)
    except TypeError as e:
        raise ConfigError(f"bad configuration key: {e}") from e
