"""Dataset indexing, synthetic paired-view generation, batch sampling and augmentation.

On-disk layout (University-1652 style)::

    <root>/<split>/<view>/<class_id>/<image files>

Only the ``drone`` and ``satellite`` views are read; other view folders
(``street``, ``google``) are skipped with a notice.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from mean_cvgl.backbone import ImageBatch, View
from mean_cvgl.config import AugmentPolicy

log = logging.getLogger(__name__)

VIEWS = ("drone", "satellite")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp", ".tif", ".tiff"}


class IndexingError(ValueError):
    pass


@dataclass
class DatasetIndex:
    split: str
    classes: List[str]
    drone: Dict[str, List[str]]
    satellite: Dict[str, List[str]]
    notices: List[str] = field(default_factory=list)

    def __post_init__(self):
        self._label = {c: i for i, c in enumerate(self.classes)}

    def label_of(self, class_id: str) -> int:
        return self._label[class_id]

    @property
    def num_drone(self) -> int:
        return sum(len(v) for v in self.drone.values())

    @property
    def num_satellite(self) -> int:
        return sum(len(v) for v in self.satellite.values())

    def counts(self) -> dict:
        return {"classes": len(self.classes), "drone": self.num_drone, "satellite": self.num_satellite}

    def items(self, view: str) -> List[Tuple[str, int]]:
        """(key, label) for every image of ``view`` in class order."""
        table = self.drone if view == "drone" else self.satellite
        return [(key, self._label[c]) for c in self.classes for key in table.get(c, [])]

    def validate(self) -> None:
        if not self.classes:
            raise IndexingError(f"split {self.split!r} has no classes")
        for c in self.classes:
            if self.split == "train" and not self.satellite.get(c):
                raise IndexingError(f"class {c!r} in split {self.split!r} has no satellite image")
            if not self.satellite.get(c) and not self.drone.get(c):
                raise IndexingError(f"class {c!r} in split {self.split!r} has no images")


def load_layout(root, split: str = "train") -> DatasetIndex:
    """Index ``<root>/<split>/<view>/<class_id>/*`` and validate it."""
    base = Path(root) / split
    if not base.is_dir():
        raise IndexingError(f"no split directory {base}")
    notices = []
    tables: Dict[str, Dict[str, List[str]]] = {v: {} for v in VIEWS}
    for view_dir in sorted(p for p in base.iterdir() if p.is_dir()):
        if view_dir.name not in VIEWS:
            msg = f"ignoring view folder {view_dir.name!r}"
            log.info(msg)
            notices.append(msg)
            continue
        for class_dir in sorted(p for p in view_dir.iterdir() if p.is_dir()):
            files = sorted(str(f) for f in class_dir.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES)
            if files:
                tables[view_dir.name][class_dir.name] = files
    classes = sorted(set(tables["drone"]) | set(tables["satellite"]))
    if not classes:
        raise IndexingError(f"no drone or satellite images under {base}")
    index = DatasetIndex(split, classes, tables["drone"], tables["satellite"], notices)
    index.validate()
    log.info("indexed %s: %s", split, index.counts())
    return index


def check_disjoint(train: DatasetIndex, test: DatasetIndex) -> None:
    overlap = set(train.classes) & set(test.classes)
    if overlap:
        raise IndexingError(f"train and test share classes: {sorted(overlap)[:5]}")


def load_splits(root, splits=("train", "test")) -> Dict[str, DatasetIndex]:
    out = {s: load_layout(root, s) for s in splits if (Path(root) / s).is_dir()}
    if "train" in out:
        for name, idx in out.items():
            if name.startswith("test"):
                check_disjoint(out["train"], idx)
    if not out:
        raise IndexingError(f"none of the splits {splits} exist under {root}")
    return out


# -- image stores ----------------------------------------------------------------


class MemoryStore:
    """Images held as uint8 HWC arrays keyed by name."""

    def __init__(self, images: Dict[str, np.ndarray]):
        self.images = images

    def load(self, key: str) -> np.ndarray:
        return self.images[key].transpose(2, 0, 1).astype(np.float32) / 255.0


class FileStore:
    """Reads image files with Pillow, converts to RGB and resizes to a square resolution."""

    def __init__(self, resolution: int):
        self.resolution = resolution
        self._cache: Dict[str, np.ndarray] = {}

    def load(self, key: str) -> np.ndarray:
        if key not in self._cache:
            from PIL import Image

            with Image.open(key) as im:
                im = im.convert("RGB")
                if im.size != (self.resolution, self.resolution):
                    im = im.resize((self.resolution, self.resolution), Image.BILINEAR)
                arr = np.asarray(im, dtype=np.float32) / 255.0
            self._cache[key] = arr.transpose(2, 0, 1)
        return self._cache[key]


def stack_view(index: DatasetIndex, store, view: str, dtype=torch.float32):
    """All images of one view as a pixel tensor plus labels."""
    items = index.items(view)
    if not items:
        raise IndexingError(f"split {index.split!r} has no {view} images")
    pixels = torch.from_numpy(np.stack([store.load(k) for k, _ in items])).to(dtype)
    labels = torch.tensor([lab for _, lab in items], dtype=torch.long)
    return ImageBatch(pixels, View(view), labels)


# -- synthetic data ----------------------------------------------------------------


@dataclass
class SyntheticSpec:
    num_classes: int = 8
    drone_per_class: int = 4
    satellite_per_class: int = 1
    resolution: int = 64
    seed: int = 0
    test_classes: int = 0
    pattern_grid: int = 6
    drone_rotation: float = 20.0
    drone_scale_jitter: float = 0.1
    drone_shift: float = 0.05
    drone_color: Tuple[float, float, float] = (0.06, -0.03, 0.02)
    satellite_color: Tuple[float, float, float] = (-0.04, 0.03, 0.05)
    drone_blur: float = 0.8
    satellite_blur: float = 0.4
    noise: float = 0.03

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("synthetic data needs at least 2 classes")
        if self.resolution < 16:
            raise ValueError("synthetic resolution must be at least 16")
        if self.drone_per_class < 1 or self.satellite_per_class < 1:
            raise ValueError("each class needs at least one image per view")


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    splits: Dict[str, DatasetIndex]
    store: object
    root: Optional[Path] = None

    @property
    def train(self) -> DatasetIndex:
        return self.splits["train"]

    @property
    def num_images(self) -> int:
        return sum(i.num_drone + i.num_satellite for i in self.splits.values())


def _gaussian_blur(img: torch.Tensor, sigma: float) -> torch.Tensor:
    if sigma <= 0:
        return img
    radius = max(1, int(math.ceil(2.5 * sigma)))
    x = torch.arange(-radius, radius + 1, dtype=img.dtype)
    k = torch.exp(-0.5 * (x / sigma) ** 2)
    k = k / k.sum()
    c = img.shape[1]
    img = F.conv2d(F.pad(img, (radius, radius, 0, 0), mode="reflect"), k.view(1, 1, 1, -1).repeat(c, 1, 1, 1), groups=c)
    img = F.conv2d(F.pad(img, (0, 0, radius, radius), mode="reflect"), k.view(1, 1, -1, 1).repeat(c, 1, 1, 1), groups=c)
    return img


def _affine(img: torch.Tensor, angle_deg: float, scale: float, tx: float, ty: float, flip: bool = False):
    a = math.radians(angle_deg)
    cos, sin = math.cos(a) * scale, math.sin(a) * scale
    fx = -1.0 if flip else 1.0
    theta = torch.tensor([[cos * fx, -sin, tx], [sin * fx, cos, ty]], dtype=img.dtype)[None]
    grid = F.affine_grid(theta, list(img.shape), align_corners=False)
    return F.grid_sample(img, grid, mode="bilinear", padding_mode="reflection", align_corners=False)


def _base_pattern(rng: np.random.Generator, spec: SyntheticSpec) -> torch.Tensor:
    coarse = torch.from_numpy(rng.random((1, 3, spec.pattern_grid, spec.pattern_grid)))
    fine = torch.from_numpy(rng.random((1, 3, 2 * spec.pattern_grid, 2 * spec.pattern_grid)))
    size = (spec.resolution, spec.resolution)
    up = lambda t: F.interpolate(t, size=size, mode="bicubic", align_corners=False)  # noqa: E731
    return (0.7 * up(coarse) + 0.3 * up(fine)).clamp(0, 1)


def _to_uint8(img: torch.Tensor) -> np.ndarray:
    arr = img[0].clamp(0, 1).permute(1, 2, 0).numpy()
    return np.round(arr * 255.0).astype(np.uint8)


def base_patterns(spec: SyntheticSpec) -> np.ndarray:
    """Per-class base patterns (float64, (N, 3, R, R)) exactly as used by the generator."""
    rng = np.random.default_rng(spec.seed)
    return np.stack([_base_pattern(rng, spec)[0].numpy() for _ in range(spec.num_classes + spec.test_classes)])


def generate_synthetic(spec: SyntheticSpec, out_dir=None) -> SyntheticDataset:
    """Render a paired drone/satellite dataset from random per-class base patterns.

    Satellite images are the base pattern with a fixed colour shift and light
    blur. Drone images add a random rotation, scale and shift, a different
    colour shift, stronger blur and pixel noise. Everything derives from
    ``spec.seed``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    bases = [_base_pattern(rng, spec) for _ in range(spec.num_classes + spec.test_classes)]
    drone_c = torch.tensor(spec.drone_color, dtype=torch.float64).view(1, 3, 1, 1)
    sat_c = torch.tensor(spec.satellite_color, dtype=torch.float64).view(1, 3, 1, 1)

    images: Dict[str, np.ndarray] = {}
    splits: Dict[str, DatasetIndex] = {}
    for split, ids in (("train", range(spec.num_classes)),
                       ("test", range(spec.num_classes, spec.num_classes + spec.test_classes))):
        if not len(ids):
            continue
        classes, drone, sat = [], {}, {}
        for ci in ids:
            cid = f"{ci:04d}"
            classes.append(cid)
            base = bases[ci]
            sat[cid] = []
            for j in range(spec.satellite_per_class):
                img = _gaussian_blur(base + sat_c, spec.satellite_blur)
                key = f"{split}/satellite/{cid}/{j:03d}.png"
                images[key] = _to_uint8(img)
                sat[cid].append(key)
            drone[cid] = []
            for j in range(spec.drone_per_class):
                angle = rng.uniform(-spec.drone_rotation, spec.drone_rotation)
                scale = 1.0 + rng.uniform(-spec.drone_scale_jitter, spec.drone_scale_jitter)
                tx, ty = rng.uniform(-spec.drone_shift, spec.drone_shift, size=2)
                img = _affine(base, angle, scale, tx, ty) + drone_c
                img = _gaussian_blur(img, spec.drone_blur)
                img = img + torch.from_numpy(rng.normal(0.0, spec.noise, size=img.shape))
                key = f"{split}/drone/{cid}/{j:03d}.png"
                images[key] = _to_uint8(img)
                drone[cid].append(key)
        splits[split] = DatasetIndex(split, classes, drone, sat)

    root = None
    if out_dir is not None:
        root = Path(out_dir)
        from PIL import Image

        for key, arr in images.items():
            path = root / key
            path.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(arr).save(path)
        manifest = {
            "format_version": 1,
            "generator": "synthetic",
            "spec": asdict(spec),
            "splits": {s: idx.counts() for s, idx in splits.items()},
        }
        (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
        splits = {s: _rekey(idx, root) for s, idx in splits.items()}
        images = {str(root / k): v for k, v in images.items()}
    for idx in splits.values():
        idx.validate()
    return SyntheticDataset(spec, splits, MemoryStore(images), root)


def _rekey(index: DatasetIndex, root: Path) -> DatasetIndex:
    fix = lambda table: {c: [str(root / k) for k in v] for c, v in table.items()}  # noqa: E731
    return DatasetIndex(index.split, index.classes, fix(index.drone), fix(index.satellite))


# -- sampling and augmentation ----------------------------------------------------


def sample_batch(index: DatasetIndex, store, batch_classes: int, rng: np.random.Generator,
                 dtype=torch.float32) -> Tuple[ImageBatch, ImageBatch]:
    """Draw ``batch_classes`` distinct classes, one drone and one satellite image each.

    Row ``i`` of both batches belongs to the same class, so the diagonal of
    the cross-view similarity matrix holds the positives.
    """
    if batch_classes < 1:
        raise ValueError("batch_classes must be positive")
    eligible = [c for c in index.classes if index.drone.get(c) and index.satellite.get(c)]
    if batch_classes > len(eligible):
        raise ValueError(f"requested {batch_classes} classes but only {len(eligible)} have both views")
    chosen = rng.choice(len(eligible), size=batch_classes, replace=False)
    d_keys, s_keys, labels = [], [], []
    for i in chosen:
        c = eligible[i]
        d_keys.append(index.drone[c][rng.integers(len(index.drone[c]))])
        s_keys.append(index.satellite[c][rng.integers(len(index.satellite[c]))])
        labels.append(index.label_of(c))
    lab = torch.tensor(labels, dtype=torch.long)
    load = lambda keys: torch.from_numpy(np.stack([store.load(k) for k in keys])).to(dtype)  # noqa: E731
    return ImageBatch(load(d_keys), View.DRONE, lab), ImageBatch(load(s_keys), View.SATELLITE, lab.clone())


def hflip(images: torch.Tensor) -> torch.Tensor:
    return torch.flip(images, dims=[3])


def augment(images: torch.Tensor, policy: AugmentPolicy, generator: torch.Generator,
            output_size: Optional[int] = None) -> torch.Tensor:
    """Random crop (resized back), horizontal flip and rotation as one affine resample per image.

    Parameters are drawn from ``generator`` only, in a fixed order, so the
    same generator state reproduces the same output.
    """
    size = output_size or images.shape[-1]
    if policy.is_identity and size == images.shape[-1]:
        return images
    b = images.shape[0]
    u = torch.rand((b, 5), generator=generator, dtype=torch.float64)
    lo, hi = policy.crop_scale
    thetas = []
    for i in range(b):
        s = lo + (hi - lo) * float(u[i, 0]) if policy.crop else 1.0
        tx = (1.0 - s) * (2 * float(u[i, 1]) - 1) if policy.crop else 0.0
        ty = (1.0 - s) * (2 * float(u[i, 2]) - 1) if policy.crop else 0.0
        a = math.radians(policy.max_rotation * (2 * float(u[i, 3]) - 1)) if policy.rotate else 0.0
        fx = -1.0 if policy.hflip and float(u[i, 4]) < 0.5 else 1.0
        cos, sin = math.cos(a) * s, math.sin(a) * s
        thetas.append([[cos * fx, -sin, tx], [sin * fx, cos, ty]])
    theta = torch.tensor(thetas, dtype=images.dtype)
    grid = F.affine_grid(theta, [b, images.shape[1], size, size], align_corners=False)
    return F.grid_sample(images, grid, mode="bilinear", padding_mode="reflection", align_corners=False)
