from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from ..datasets import load_image
from ..voxgrid import VoxelField, save_binvox, threshold as binarize
from .checkpoint import Checkpoint, load_checkpoint, model_from_checkpoint

MAX_PREDICT_VIEWS = 20


@torch.no_grad()
def predict(ckpt, images: Sequence[str], out, V: Optional[int] = None, threshold: float = 0.5,
            sidecar: bool = False) -> Path:
    """Reconstruct from image files and write ``out`` as binvox.

    Uses the first ``V`` images (all by default). With ``sidecar`` the raw
    probability field is also saved next to ``out`` as ``.npy``.
    """
    if not 1 <= len(images) <= MAX_PREDICT_VIEWS:
        raise ValueError(f"predict takes 1..{MAX_PREDICT_VIEWS} images, got {len(images)}")
    V = V or len(images)
    if not 1 <= V <= len(images):
        raise ValueError(f"V={V} but {len(images)} images were given")
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    exp = ckpt.experiment
    model = model_from_checkpoint(ckpt)
    views = torch.stack([load_image(p, exp.preprocess) for p in images[:V]])
    probs = model(views[None])[0].double().clamp(0, 1).numpy()
    out = Path(out)
    save_binvox(binarize(VoxelField(probs), threshold), out)
    if sidecar:
        np.save(out.with_suffix(".npy"), probs.astype(np.float32))
    return out
