"""Dataset manifests, image preprocessing, view sampling and a procedural toy set.

ShapeNet layout::

    root/<category>/<object_id>/rendering/*.png
    root/<category>/<object_id>/model.binvox
    root/splits/{train,val,test}.txt      # one object id (or category/object_id) per line

Pix3D layout: ``root/pix3d.json`` with entries carrying ``img``, ``voxel``,
``truncated``, ``occluded`` and ``category`` (paths relative to ``root``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .voxgrid import VoxelGrid, load_binvox

SHAPENET13 = {
    "02691156": "aeroplane",
    "02828884": "bench",
    "02933112": "cabinet",
    "02958343": "car",
    "03001627": "chair",
    "03211117": "display",
    "03636649": "lamp",
    "03691459": "speaker",
    "04090263": "rifle",
    "04256520": "sofa",
    "04379243": "table",
    "04401088": "telephone",
    "04530566": "watercraft",
}

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
MAX_VIEWS = 24


class ManifestError(RuntimeError):
    pass


@dataclass(frozen=True)
class SampleRecord:
    object_id: str
    category: str
    view_paths: Tuple[str, ...]
    voxel_path: str

    def __post_init__(self):
        if not self.view_paths:
            raise ManifestError(f"{self.category}/{self.object_id}: no views")


@dataclass
class ViewSet:
    images: List[torch.Tensor]
    object_id: str = ""
    category: str = ""

    def __post_init__(self):
        if not 1 <= len(self.images) <= MAX_VIEWS:
            raise ValueError(f"a ViewSet holds 1..{MAX_VIEWS} images, got {len(self.images)}")
        sizes = {tuple(im.shape) for im in self.images}
        if len(sizes) != 1 or len(next(iter(sizes))) != 3:
            raise ValueError(f"views must share one 3xSxS shape, got {sorted(sizes)}")

    def __len__(self):
        return len(self.images)

    def stack(self) -> torch.Tensor:
        return torch.stack(self.images)


@dataclass(frozen=True)
class PreprocessConfig:
    target_size: int = 224
    channel_means: Tuple[float, float, float] = IMAGENET_MEAN
    channel_stds: Tuple[float, float, float] = IMAGENET_STD
    background_fill: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.target_size < 1:
            raise ValueError("target_size must be positive")
        if any(s <= 0 for s in self.channel_stds):
            raise ValueError("channel_stds must be positive")

    def check_patch(self, patch_size: int) -> None:
        if self.target_size % patch_size:
            raise ValueError(f"target_size {self.target_size} not divisible by patch size {patch_size}")


# --------------------------------------------------------------------------
# manifests
# --------------------------------------------------------------------------


def _read_split(path: Path) -> List[str]:
    if not path.is_file():
        raise ManifestError(f"split file not found: {path}")
    return [ln.strip() for ln in path.read_text().splitlines() if ln.strip() and not ln.startswith("#")]


def load_shapenet_manifest(root, split: str, split_dir=None) -> List[SampleRecord]:
    """Records of one split, sorted by (category, object_id)."""
    if split not in ("train", "val", "test"):
        raise ValueError(f"split must be train, val or test, got {split!r}")
    root = Path(root)
    ids = _read_split(Path(split_dir or root / "splits") / f"{split}.txt")
    categories = sorted(p.name for p in root.iterdir() if p.is_dir() and p.name != "splits")
    records = []
    for entry in ids:
        if "/" in entry:
            cat, obj = entry.split("/", 1)
            obj_dir = root / cat / obj
        else:
            obj = entry
            hits = [root / c / obj for c in categories if (root / c / obj).is_dir()]
            if not hits:
                raise ManifestError(f"object {obj}: not found under any category of {root}")
            obj_dir, cat = hits[0], hits[0].parent.name
        voxel = obj_dir / "model.binvox"
        views = sorted((obj_dir / "rendering").glob("*.png"))
        if not voxel.is_file():
            raise ManifestError(f"object {cat}/{obj}: missing {voxel.name}")
        if not views:
            raise ManifestError(f"object {cat}/{obj}: no rendered views")
        records.append(SampleRecord(obj, cat, tuple(str(v) for v in views), str(voxel)))
    records.sort(key=lambda r: (r.category, r.object_id))
    return records


def load_pix3d_manifest(root, annotation: str = "pix3d.json") -> List[SampleRecord]:
    """Untruncated, unoccluded chair images; one view per record."""
    root = Path(root)
    try:
        entries = json.loads((root / annotation).read_text())
    except (OSError, ValueError) as e:
        raise ManifestError(f"cannot read Pix3D annotation {root / annotation}: {e}") from e
    records = []
    for e in entries:
        if e.get("category") != "chair" or e.get("truncated") or e.get("occluded"):
            continue
        records.append(
            SampleRecord(
                object_id=str(Path(e["img"]).with_suffix("")),
                category="chair",
                view_paths=(str(root / e["img"]),),
                voxel_path=str(root / e["voxel"]),
            )
        )
    records.sort(key=lambda r: (r.category, r.object_id))
    return records


def load_voxels(path, resolution: int = 32) -> VoxelGrid:
    """Load a binvox (or Pix3D ``.mat``) grid, max-pooling down to ``resolution`` if finer."""
    path = Path(path)
    if path.suffix == ".mat":
        from scipy.io import loadmat

        grid = VoxelGrid((loadmat(path)["voxel"] > 0).astype(np.uint8))
    else:
        grid = load_binvox(path)
    n = grid.resolution
    if n == resolution:
        return grid
    if n % resolution:
        raise ManifestError(f"{path}: resolution {n} cannot be pooled to {resolution}")
    f = n // resolution
    occ = grid.occupancy.reshape(resolution, f, resolution, f, resolution, f).max(axis=(1, 3, 5))
    return VoxelGrid(occ, grid.translate, grid.scale)


def validate_manifest(records: Sequence[SampleRecord], resolution: int = 32) -> List[str]:
    """Return a list of problems (empty when every record loads at ``resolution``)."""
    problems = []
    for r in records:
        try:
            g = load_voxels(r.voxel_path, resolution)
            if g.resolution != resolution:
                problems.append(f"{r.category}/{r.object_id}: resolution {g.resolution}")
        except Exception as e:  # report and keep scanning
            problems.append(f"{r.category}/{r.object_id}: {e}")
        for p in r.view_paths:
            if not Path(p).is_file():
                problems.append(f"{r.category}/{r.object_id}: missing view {p}")
    return problems


# --------------------------------------------------------------------------
# images
# --------------------------------------------------------------------------


def preprocess_image(raw, cfg: PreprocessConfig = PreprocessConfig()) -> torch.Tensor:
    """``H x W x {3,4}`` image (uint8 or float in [0, 1], or PIL) -> normalized ``3 x S x S``."""
    if isinstance(raw, Image.Image):
        raw = np.asarray(raw.convert("RGBA") if "A" in raw.getbands() else raw.convert("RGB"))
    arr = np.asarray(raw)
    if arr.ndim != 3 or arr.shape[2] not in (3, 4):
        raise ValueError(f"expected an H x W x 3|4 image, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError("degenerate image with zero area")
    x = torch.from_numpy(arr.astype(np.float32) / 255.0 if arr.dtype == np.uint8 else arr.astype(np.float32))
    x = x.permute(2, 0, 1)
    if x.shape[0] == 4:
        alpha = x[3:]
        bg = torch.tensor(cfg.background_fill, dtype=torch.float32).view(3, 1, 1)
        x = x[:3] * alpha + bg * (1 - alpha)
    s = cfg.target_size
    if x.shape[1:] != (s, s):
        x = F.interpolate(x[None], size=(s, s), mode="bilinear", align_corners=False)[0]
    mean = torch.tensor(cfg.channel_means, dtype=torch.float32).view(3, 1, 1)
    std = torch.tensor(cfg.channel_stds, dtype=torch.float32).view(3, 1, 1)
    return (x - mean) / std


def load_image(path, cfg: PreprocessConfig = PreprocessConfig()) -> torch.Tensor:
    try:
        with Image.open(path) as im:
            im.load()
            return preprocess_image(im, cfg)
    except (OSError, ValueError) as e:
        raise OSError(f"cannot read image {path}: {e}") from e


def sample_views(
    source: Union[SampleRecord, ViewSet],
    V: int,
    seed: int,
    cfg: PreprocessConfig = PreprocessConfig(),
) -> ViewSet:
    """Draw ``V`` distinct views in a seed-determined order."""
    n = len(source.view_paths) if isinstance(source, SampleRecord) else len(source.images)
    if not 1 <= V <= n:
        raise ValueError(f"cannot sample {V} views from {n} available")
    idx = np.random.default_rng(seed).permutation(n)[:V]
    if isinstance(source, SampleRecord):
        images = [load_image(source.view_paths[i], cfg) for i in idx]
    else:
        images = [source.images[i] for i in idx]
    return ViewSet(images, source.object_id, source.category)


# --------------------------------------------------------------------------
# procedural toy dataset
# --------------------------------------------------------------------------

TOY_PREPROCESS = PreprocessConfig(32, (0.5, 0.5, 0.5), (0.5, 0.5, 0.5))
_AXIS_COLORS = np.array([[0.85, 0.25, 0.2], [0.2, 0.7, 0.3], [0.25, 0.35, 0.9]])


def view_geometry(view: int) -> Tuple[int, bool, int]:
    """View index -> (camera axis, looking from the far side, quarter turns in-plane)."""
    return view % 3, bool((view // 3) % 2), (view // 6) % 4


def _orient(img: np.ndarray, view: int) -> np.ndarray:
    _, flip, rot = view_geometry(view)
    if flip:
        img = img[:, ::-1]
    return np.rot90(img, rot)


def silhouette(occ: np.ndarray, view: int) -> np.ndarray:
    """Orthographic max-projection of ``occ`` as seen from ``view`` (R x R, bool)."""
    axis = view_geometry(view)[0]
    return _orient(occ.max(axis=axis).astype(bool), view)


def render_view(occ: np.ndarray, view: int, size: Optional[int] = None) -> np.ndarray:
    """Depth-shaded orthographic render (``size x size x 3`` floats, white background).

    Foreground hue identifies the camera axis; brightness falls off with depth
    of the first occupied voxel, so the non-white pixels equal :func:`silhouette`.
    """
    axis, flip, _ = view_geometry(view)
    r = occ.shape[0]
    size = size or r
    if size % r:
        raise ValueError(f"render size {size} must be a multiple of resolution {r}")
    vol = np.moveaxis(occ.astype(bool), axis, 0)
    if flip:
        vol = vol[::-1]
    hit = vol.any(axis=0)
    depth = np.where(hit, vol.argmax(axis=0), 0) / max(r - 1, 1)
    shade = 1.0 - 0.6 * depth
    img = np.ones((r, r, 3))
    img[hit] = _AXIS_COLORS[axis] * shade[hit, None]
    img = _orient(img, view)
    k = size // r
    return np.ascontiguousarray(np.kron(img, np.ones((k, k, 1))))


def _box(r, lo, hi):
    occ = np.zeros((r, r, r), dtype=np.uint8)
    occ[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] = 1
    return occ


def _random_shape(rng: np.random.Generator, r: int) -> Tuple[str, np.ndarray]:
    kind = ("cuboid", "sphere", "lshape")[rng.integers(3)]
    if kind == "cuboid":
        ext = rng.integers(r // 4, 3 * r // 4 + 1, size=3)
        lo = np.array([rng.integers(0, r - e + 1) for e in ext])
        occ = _box(r, lo, lo + ext)
    elif kind == "sphere":
        rad = rng.uniform(r / 6, r / 2.5)
        c = rng.uniform(rad, r - rad, size=3)
        g = np.indices((r, r, r)).transpose(1, 2, 3, 0) + 0.5
        occ = (((g - c) ** 2).sum(-1) <= rad**2).astype(np.uint8)
    else:
        t = rng.integers(r // 6, r // 3 + 1)
        ext = rng.integers(r // 2, 3 * r // 4 + 1, size=3)
        lo = np.array([rng.integers(0, r - e + 1) for e in ext])
        hi = lo + ext
        a = _box(r, lo, [hi[0], lo[1] + t, hi[2]])
        b = _box(r, lo, [lo[0] + t, hi[1], hi[2]])
        occ = a | b
    return kind, occ


def _toy_shapes(n: int, seed: int, resolution: int):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        while True:
            kind, occ = _random_shape(rng, resolution)
            if 0 < occ.sum() < occ.size:
                break
        yield kind, occ


def make_toy_dataset(
    n: int,
    seed: int,
    resolution: int = 32,
    views: int = 4,
    cfg: PreprocessConfig = TOY_PREPROCESS,
) -> List[Tuple[ViewSet, VoxelGrid]]:
    """Random cuboids, spheres and L-shapes with ``views`` shaded orthographic renders each.

    Views cycle through the six signed axis directions, then repeat with a
    quarter turn in-plane.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 1 <= views <= MAX_VIEWS:
        raise ValueError(f"views must lie in 1..{MAX_VIEWS}")
    out = []
    for i, (kind, occ) in enumerate(_toy_shapes(n, seed, resolution)):
        images = [preprocess_image(render_view(occ, v, cfg.target_size), cfg) for v in range(views)]
        out.append((ViewSet(images, f"toy{i:04d}", kind), VoxelGrid(occ)))
    return out


def write_toy_dataset(root, n: int, seed: int, resolution: int = 32, views: int = 4, size: int = 32,
                      splits: Tuple[float, float] = (0.8, 0.1)) -> List[str]:
    """Write the toy set in the ShapeNet directory layout (PNG renders, binvox, split files)."""
    from .voxgrid import save_binvox

    root = Path(root)
    ids = []
    for i, (kind, occ) in enumerate(_toy_shapes(n, seed, resolution)):
        obj = root / kind / f"toy{i:04d}"
        (obj / "rendering").mkdir(parents=True, exist_ok=True)
        for v in range(views):
            rgb = np.round(render_view(occ, v, size) * 255).astype(np.uint8)
            Image.fromarray(rgb).save(obj / "rendering" / f"{v:02d}.png")
        save_binvox(VoxelGrid(occ), obj / "model.binvox")
        ids.append(f"{kind}/toy{i:04d}")
    n_train = max(1, int(round(splits[0] * n)))
    n_val = int(round(splits[1] * n))
    parts = {"train": ids[:n_train], "val": ids[n_train : n_train + n_val], "test": ids[n_train + n_val :]}
    (root / "splits").mkdir(parents=True, exist_ok=True)
    for name, members in parts.items():
        (root / "splits" / f"{name}.txt").write_text("".join(m + "\n" for m in members))
    return ids


# --------------------------------------------------------------------------
# indexable sources for training / evaluation
# --------------------------------------------------------------------------


class ToySource:
    """In-memory ``(ViewSet, VoxelGrid)`` pairs."""

    def __init__(self, samples: Sequence[Tuple[ViewSet, VoxelGrid]]):
        if not samples:
            raise ValueError("empty dataset")
        self.samples = list(samples)
        self._targets = [torch.from_numpy(np.array(g.occupancy, dtype=np.float32)) for _, g in self.samples]

    def __len__(self):
        return len(self.samples)

    def category(self, i: int) -> str:
        return self.samples[i][0].category

    def object_id(self, i: int) -> str:
        return self.samples[i][0].object_id

    def num_views(self, i: int) -> int:
        return len(self.samples[i][0])

    def grid(self, i: int) -> VoxelGrid:
        return self.samples[i][1]

    def target(self, i: int) -> torch.Tensor:
        return self._targets[i]

    def views(self, i: int, V: int, seed: int) -> torch.Tensor:
        return sample_views(self.samples[i][0], V, seed).stack()


class RecordSource:
    """Disk-backed records; voxel grids are loaded on first use."""

    def __init__(self, records: Sequence[SampleRecord], cfg: PreprocessConfig = PreprocessConfig(), resolution: int = 32):
        if not records:
            raise ValueError("empty dataset")
        self.records = list(records)
        self.cfg = cfg
        self.resolution = resolution
        self._grids = {}

    def __len__(self):
        return len(self.records)

    def category(self, i: int) -> str:
        return self.records[i].category

    def object_id(self, i: int) -> str:
        return self.records[i].object_id

    def num_views(self, i: int) -> int:
        return len(self.records[i].view_paths)

    def grid(self, i: int) -> VoxelGrid:
        g = self._grids.get(i)
        if g is None:
            g = self._grids[i] = load_voxels(self.records[i].voxel_path, self.resolution)
        return g

    def target(self, i: int) -> torch.Tensor:
        return torch.from_numpy(np.array(self.grid(i).occupancy, dtype=np.float32))

    def views(self, i: int, V: int, seed: int) -> torch.Tensor:
        return sample_views(self.records[i], V, seed, self.cfg).stack()
