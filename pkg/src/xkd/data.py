"""Dataset ingestion, split policies, preprocessing and the synthetic blob task."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")
ROLES = ("train", "val", "test")
MANIFEST_NAME = "manifest.json"
BOXES_NAME = "boxes.json"


def _canonical_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _check_policy(policy: Sequence[float]) -> tuple[Fraction, Fraction, Fraction]:
    if len(policy) != 3:
        raise ValueError(f"split policy needs three percentages (train, val, test), got {list(policy)}")
    fr = tuple(Fraction(str(p)) for p in policy)
    if any(p < 0 for p in fr):
        raise ValueError(f"split percentages must be non-negative, got {list(policy)}")
    if sum(fr) != 100:
        raise ValueError(f"split percentages must sum to 100, got {list(policy)} (sum {float(sum(fr))})")
    return fr


def split_counts(n: int, policy: Sequence[float]) -> tuple[int, int, int]:
    """Per-class item counts: val and test are floored, train takes the remainder."""
    _, val, test = _check_policy(policy)
    n_val = math.floor(n * val / 100)
    n_test = math.floor(n * test / 100)
    return n - n_val - n_test, n_val, n_test


@dataclass
class DatasetSplit:
    role: str
    root: Path
    class_names: list[str]
    items: list[tuple[str, int]]
    boxes: dict[str, list[int]] | None = None
    target_size: int | None = None
    channels: int = 3
    _cache: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False, compare=False)

    def __len__(self):
        return len(self.items)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def label_rows(self) -> np.ndarray:
        idx = np.array([c for _, c in self.items], dtype=np.int64)
        return np.eye(self.num_classes)[idx]

    def box(self, i: int) -> list[int] | None:
        if not self.boxes:
            return None
        return self.boxes.get(self.items[i][0])

    def load(self) -> tuple[np.ndarray, np.ndarray]:
        """All images as float32 ``[N, C, H, W]`` plus one-hot float64 labels."""
        if not self.items:
            raise ValueError(f"{self.role} split is empty")
        if self._cache is None:
            xs = np.stack([preprocess(self.root / rel, self.target_size, self.channels) for rel, _ in self.items])
            self._cache = (xs, self.label_rows())
        return self._cache


@dataclass
class DatasetManifest:
    root: Path
    class_names: list[str]
    files: dict[str, list[str]]
    policy: tuple[float, float, float]
    seed: int
    splits: dict[str, list[tuple[str, int]]]
    content_hash: str = ""
    rejected: list[str] = field(default_factory=list)
    has_boxes: bool = False

    def __post_init__(self):
        self.root = Path(self.root)
        if not self.content_hash:
            self.content_hash = self.compute_hash()

    def compute_hash(self) -> str:
        return _canonical_hash(
            {
                "class_names": self.class_names,
                "files": self.files,
                "policy": [str(p) for p in self.policy],
                "seed": self.seed,
                "splits": {r: [list(it) for it in v] for r, v in self.splits.items()},
            }
        )

    def split(self, role: str, target_size: int | None = None, channels: int = 3) -> DatasetSplit:
        if role not in ROLES:
            raise ValueError(f"unknown split role {role!r}")
        boxes = None
        if self.has_boxes:
            boxes = json.loads((self.root / BOXES_NAME).read_text())
        return DatasetSplit(role, self.root, list(self.class_names), [tuple(it) for it in self.splits[role]], boxes, target_size, channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["root"] = str(self.root)
        d["policy"] = list(self.policy)
        d["splits"] = {r: [list(it) for it in v] for r, v in self.splits.items()}
        return d

    def save(self, path=None) -> Path:
        path = Path(path) if path is not None else self.root / MANIFEST_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        d = json.loads(Path(path).read_text())
        d["policy"] = tuple(d["policy"])
        d["splits"] = {r: [tuple(it) for it in v] for r, v in d["splits"].items()}
        m = cls(**d)
        if m.compute_hash() != m.content_hash:
            raise ValueError(f"{path}: manifest content hash does not match its contents")
        return m


def _decodable(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            im.verify()
        return True
    except (UnidentifiedImageError, OSError, SyntaxError):
        return False


def scan_folder(root, policy: Sequence[float] = (65, 15, 20), seed: int = 0) -> DatasetManifest:
    """Index ``root/<class_name>/*`` and split each class independently.

    Within a class the sorted file list is shuffled with a generator keyed on
    ``(seed, class_index)``; the first ``n_val`` items go to val, the next
    ``n_test`` to test, the rest to train.
    """
    root = Path(root)
    policy = tuple(policy)
    _check_policy(policy)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ValueError(f"{root} contains no class subdirectories")

    files: dict[str, list[str]] = {}
    rejected: list[str] = []
    for d in class_dirs:
        good = []
        for f in sorted(p for p in d.iterdir() if p.is_file()):
            rel = f.relative_to(root).as_posix()
            if f.suffix.lower() not in IMAGE_EXTENSIONS or not _decodable(f):
                rejected.append(rel)
                continue
            good.append(rel)
        if not good:
            raise ValueError(f"class directory {d} holds no decodable images")
        files[d.name] = good
    if rejected:
        warnings.warn(f"excluded {len(rejected)} unsupported or undecodable files: {rejected[:10]}")

    splits: dict[str, list[tuple[str, int]]] = {r: [] for r in ROLES}
    for k, (name, flist) in enumerate(files.items()):
        order = np.random.default_rng([seed, k]).permutation(len(flist))
        shuffled = [flist[i] for i in order]
        n_train, n_val, n_test = split_counts(len(flist), policy)
        splits["val"] += [(f, k) for f in shuffled[:n_val]]
        splits["test"] += [(f, k) for f in shuffled[n_val : n_val + n_test]]
        splits["train"] += [(f, k) for f in shuffled[n_val + n_test :]]
    return DatasetManifest(root, list(files), files, policy, seed, splits, rejected=rejected, has_boxes=(root / BOXES_NAME).exists())


def preprocess(image, target_size: int | None = 224, channels: int = 3) -> np.ndarray:
    """Decode, bilinearly resize to ``target_size`` and scale to ``[0, 1]``.

    ``target_size=None`` keeps the native resolution. Grayscale images are
    replicated across ``channels``.
    """
    try:
        im = image if isinstance(image, Image.Image) else Image.open(image)
        im.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise ValueError(f"cannot decode image {image}: {exc}") from exc
    gray = im.mode in ("1", "L", "LA", "I", "I;16", "F") or channels == 1
    im = im.convert("L" if gray else "RGB")
    if target_size is not None and im.size != (target_size, target_size):
        im = im.resize((target_size, target_size), Image.BILINEAR)
    a = np.asarray(im, dtype=np.float32) / np.float32(255.0)
    if a.ndim == 2:
        a = np.repeat(a[None], channels, axis=0)
    else:
        a = a.transpose(2, 0, 1)
    return np.ascontiguousarray(a)


@dataclass(frozen=True)
class SyntheticSpec:
    """Blob-location task: class ``k`` places a Gaussian blob inside grid cell ``k``.

    ``counts`` are per-class (train, val, test) sizes; the default gives
    300/60/90 over three classes.
    """

    image_size: int = 32
    num_classes: int = 3
    blob_radius: float = 6.0
    noise: float = 0.1
    counts: tuple[int, int, int] = (100, 20, 30)
    seed: int = 0

    @property
    def samples_per_class(self) -> int:
        return sum(self.counts)

    def grid(self) -> tuple[int, int, int]:
        cols = math.ceil(math.sqrt(self.num_classes))
        rows = math.ceil(self.num_classes / cols)
        return rows, cols, self.image_size // max(rows, cols)

    def validate(self):
        if self.num_classes < 2:
            raise ValueError("synthetic task needs at least two classes")
        if self.blob_radius <= 0:
            raise ValueError("blob radius must be positive")
        if self.noise < 0:
            raise ValueError("noise level must be >= 0")
        if any(c < 0 for c in self.counts) or self.counts[0] < 1:
            raise ValueError(f"invalid per-class counts {self.counts}")
        _, _, cell = self.grid()
        if 2 * self.blob_radius > cell - 1:
            raise ValueError(f"blob radius {self.blob_radius} does not fit a {cell}px class region of a {self.image_size}px frame")


def render_blob(spec: SyntheticSpec, cls: int, rng: np.random.Generator) -> tuple[np.ndarray, list[int]]:
    """One uint8 image and its inclusive pixel box ``[x0, y0, x1, y1]``."""
    _, cols, cell = spec.grid()
    r = spec.blob_radius
    cx0, cy0 = (cls % cols) * cell, (cls // cols) * cell
    cx = rng.uniform(cx0 + r, cx0 + cell - 1 - r)
    cy = rng.uniform(cy0 + r, cy0 + cell - 1 - r)
    yy, xx = np.mgrid[0 : spec.image_size, 0 : spec.image_size]
    sigma = r / 2.0
    img = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma**2))
    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    box = [math.floor(cx - r), math.floor(cy - r), math.ceil(cx + r), math.ceil(cy + r)]
    return np.round(img * 255).astype(np.uint8), box


def generate_synthetic(spec: SyntheticSpec, root) -> DatasetManifest:
    """Materialize the synthetic task as ``root/<class>/*.png`` plus ``boxes.json``."""
    spec.validate()
    root = Path(root)
    rng = np.random.default_rng(spec.seed)
    class_names = [f"region{k}" for k in range(spec.num_classes)]
    files: dict[str, list[str]] = {}
    boxes: dict[str, list[int]] = {}
    splits: dict[str, list[tuple[str, int]]] = {r: [] for r in ROLES}
    for k, name in enumerate(class_names):
        (root / name).mkdir(parents=True, exist_ok=True)
        files[name] = []
        i = 0
        for role, count in zip(ROLES, spec.counts):
            for _ in range(count):
                img, box = render_blob(spec, k, rng)
                rel = f"{name}/{name}_{i:04d}.png"
                Image.fromarray(img, mode="L").save(root / rel, optimize=False)
                files[name].append(rel)
                boxes[rel] = box
                splits[role].append((rel, k))
                i += 1
    (root / BOXES_NAME).write_text(json.dumps(boxes, indent=0, sort_keys=True))
    n = spec.samples_per_class
    policy = tuple(float(Fraction(c * 100, n)) for c in spec.counts)
    manifest = DatasetManifest(root, class_names, files, policy, spec.seed, splits, has_boxes=True)
    manifest.save()
    (root / "synthetic_spec.json").write_text(json.dumps(asdict(spec), sort_keys=True))
    log.info("wrote %d synthetic images to %s", n * spec.num_classes, root)
    return manifest


def batches(
    split: DatasetSplit,
    batch_size: int,
    seed: int | None = 0,
    epoch: int = 0,
    augment: Callable[[np.ndarray, np.random.Generator], np.ndarray] | None = None,
) -> Iterator[tuple[torch.Tensor, np.ndarray]]:
    """Yield ``(images, labels)`` mini-batches; the last batch may be short.

    ``seed=None`` keeps file order. Otherwise the order is a permutation
    drawn from a generator keyed on ``(seed, epoch)``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    x, y = split.load()
    n = len(x)
    order = np.arange(n) if seed is None else np.random.default_rng([seed, epoch]).permutation(n)
    aug_rng = np.random.default_rng([seed or 0, epoch, 1])
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        xb = x[idx]
        if augment is not None:
            xb = augment(xb, aug_rng)
        yield torch.from_numpy(np.ascontiguousarray(xb)), y[idx]
