"""Voxel occupancy grids, the binvox codec, thresholding and IoU.

Grids are stored as ``(N, N, N)`` arrays indexed ``[x, y, z]``. On disk binvox
orders voxels with y running fastest, then z, then x; the codec converts
between the two layouts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Tuple

import numpy as np
import torch


class BinvoxError(ValueError):
    """Base class for binvox decoding failures."""


class BinvoxFormatError(BinvoxError):
    """Malformed header line."""


class BinvoxTruncationError(BinvoxError):
    """Run-length payload does not expand to exactly N**3 voxels."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    occupancy: np.ndarray
    translate: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    scale: float = 1.0

    def __post_init__(self):
        occ = np.asarray(self.occupancy)
        if occ.ndim != 3 or len(set(occ.shape)) != 1 or occ.shape[0] < 1:
            raise ValueError(f"occupancy must be a cube of shape (N, N, N), got {occ.shape}")
        if occ.dtype != np.uint8:
            if not np.all((occ == 0) | (occ == 1)):
                raise ValueError("occupancy values must be exactly 0 or 1")
            occ = occ.astype(np.uint8)
        elif occ.max(initial=0) > 1:
            raise ValueError("occupancy values must be exactly 0 or 1")
        if len(self.translate) != 3:
            raise ValueError("translate must have three components")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "occupancy", _frozen(occ))
        object.__setattr__(self, "translate", tuple(float(t) for t in self.translate))
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def resolution(self) -> int:
        return self.occupancy.shape[0]

    @classmethod
    def empty(cls, resolution: int = 32) -> "VoxelGrid":
        return cls(np.zeros((resolution,) * 3, dtype=np.uint8))

    def count(self) -> int:
        return int(self.occupancy.sum())

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return (
            np.array_equal(self.occupancy, other.occupancy)
            and self.translate == other.translate
            and self.scale == other.scale
        )


@dataclass(frozen=True, eq=False)
class VoxelField:
    """Real-valued occupancy probabilities on an ``(N, N, N)`` grid."""

    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 3 or len(set(vals.shape)) != 1:
            raise ValueError(f"values must be a cube of shape (N, N, N), got {vals.shape}")
        if not np.all(np.isfinite(vals)) or vals.min() < 0.0 or vals.max() > 1.0:
            raise ValueError("field values must lie in [0, 1]")
        object.__setattr__(self, "values", _frozen(vals))

    @property
    def resolution(self) -> int:
        return self.values.shape[0]


# --------------------------------------------------------------------------
# binvox codec
# --------------------------------------------------------------------------


def _fmt_float(x: float) -> str:
    s = repr(float(x))
    return s[:-2] if s.endswith(".0") else s


def _parse_header(buf: bytes):
    lines = []
    pos = 0
    while True:
        end = buf.find(b"\n", pos)
        if end < 0:
            raise BinvoxFormatError(
                f"header line {len(lines) + 1}: unexpected end of file before 'data'"
            )
        line = buf[pos:end].strip()
        pos = end + 1
        lines.append(line)
        if line == b"data":
            break
        if len(lines) > 16:
            raise BinvoxFormatError("header: no 'data' line within the first 16 lines")

    if not lines[0].startswith(b"#binvox"):
        raise BinvoxFormatError(f"header line 1: expected '#binvox 1', got {lines[0]!r}")
    dims = translate = scale = None
    for lineno, line in enumerate(lines[1:-1], start=2):
        parts = line.split()
        if not parts:
            continue
        key = parts[0]
        try:
            if key == b"dim":
                dims = [int(p) for p in parts[1:]]
                if len(dims) != 3:
                    raise ValueError
            elif key == b"translate":
                translate = tuple(float(p) for p in parts[1:])
                if len(translate) != 3:
                    raise ValueError
            elif key == b"scale":
                if len(parts) != 2:
                    raise ValueError
                scale = float(parts[1])
            else:
                raise ValueError
        except ValueError:
            raise BinvoxFormatError(f"header line {lineno}: malformed {line!r}") from None
    if dims is None:
        raise BinvoxFormatError("header: missing 'dim' line")
    if len(set(dims)) != 1 or dims[0] < 1:
        raise BinvoxFormatError(f"header: only cubic grids are supported, got dim {dims}")
    return dims[0], translate or (0.0, 0.0, 0.0), 1.0 if scale is None else scale, pos


def read_binvox(data: bytes) -> VoxelGrid:
    """Decode a binvox v1 byte string into a :class:`VoxelGrid`."""
    n, translate, scale, offset = _parse_header(data)
    payload = np.frombuffer(data, dtype=np.uint8, offset=offset)
    if payload.size % 2:
        raise BinvoxTruncationError(f"RLE payload has odd length {payload.size}")
    values, counts = payload[0::2], payload[1::2]
    total = int(counts.sum(dtype=np.int64))
    if total != n**3:
        raise BinvoxTruncationError(f"RLE payload expands to {total} voxels, expected {n ** 3}")
    if values.max(initial=0) > 1:
        raise BinvoxFormatError("RLE payload: voxel values must be 0 or 1")
    flat = np.repeat(values, counts)
    # stored order is (x, z, y) with y fastest
    occ = flat.reshape(n, n, n).transpose(0, 2, 1)
    return VoxelGrid(occ, translate=translate, scale=scale)


def _rle(flat: np.ndarray) -> bytes:
    if flat.size == 0:
        return b""
    change = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate(([0], change))
    lengths = np.diff(np.concatenate((starts, [flat.size])))
    out = bytearray()
    for start, length in zip(starts.tolist(), lengths.tolist()):
        v = int(flat[start])
        full, rest = divmod(length, 255)
        out += bytes((v, 255)) * full
        if rest:
            out += bytes((v, rest))
    return bytes(out)


def write_binvox(grid: VoxelGrid) -> bytes:
    """Canonical binvox v1 encoding: maximal runs, each capped at 255."""
    n = grid.resolution
    header = (
        "#binvox 1\n"
        f"dim {n} {n} {n}\n"
        f"translate {' '.join(_fmt_float(t) for t in grid.translate)}\n"
        f"scale {_fmt_float(grid.scale)}\n"
        "data\n"
    ).encode("ascii")
    flat = np.ascontiguousarray(grid.occupancy.transpose(0, 2, 1)).reshape(-1)
    return header + _rle(flat)


def load_binvox(path) -> VoxelGrid:
    with open(path, "rb") as f:
        return read_binvox(f.read())


def save_binvox(grid: VoxelGrid, path) -> None:
    with open(path, "wb") as f:
        f.write(write_binvox(grid))


# --------------------------------------------------------------------------
# thresholding and IoU
# --------------------------------------------------------------------------


def threshold(
    field: VoxelField,
    t: float = 0.5,
    translate: Sequence[float] = (0.0, 0.0, 0.0),
    scale: float = 1.0,
) -> VoxelGrid:
    """Binarize ``field``: a voxel is occupied iff its value is strictly above ``t``."""
    if not 0.0 < t < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {t}")
    return VoxelGrid((field.values > t).astype(np.uint8), translate=translate, scale=scale)


def iou(a: VoxelGrid, b: VoxelGrid) -> float:
    """Intersection over union of two grids; two empty grids score 1.0."""
    if a.resolution != b.resolution:
        raise ValueError(f"resolution mismatch: {a.resolution} vs {b.resolution}")
    x = a.occupancy.astype(bool)
    y = b.occupancy.astype(bool)
    union = int(np.count_nonzero(x | y))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(x & y)) / union


def batch_iou(pred: torch.Tensor, target: torch.Tensor, t: float = 0.5) -> torch.Tensor:
    """Per-sample IoU of thresholded probabilities ``pred`` against binary ``target``.

    Both tensors are ``(B, N, N, N)``; returns a ``(B,)`` float64 tensor using the
    same empty-grid convention as :func:`iou`.
    """
    p = (pred > t).flatten(1)
    y = target.flatten(1) > 0.5
    inter = (p & y).sum(1).double()
    union = (p | y).sum(1).double()
    return torch.where(union > 0, inter / union.clamp_min(1), torch.ones_like(union))
