"""Dataset I/O for the data-using stages (pretraining and evaluation).

Two on-disk layouts are accepted:

* a packed tensor file (``torch.save``) holding ``images`` (uint8, N x C x H x W)
  and ``labels`` (int64, N);
* a class-per-subfolder image tree (``root/<class_name>/*.png``), classes
  sorted by folder name.

Every read goes through :func:`load_dataset`, which refuses to run while a
:func:`data_free` block is active. The training loop wraps each step in that
block so a stray dataset read during fine-tuning fails loudly.
"""
from __future__ import annotations

import contextlib
import logging
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import DataBoundaryViolation, DatasetNotFound

log = logging.getLogger(__name__)

_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}
_guard = threading.local()


@contextlib.contextmanager
def data_free():
    """Forbid dataset reads inside the block (re-entrant)."""
    depth = getattr(_guard, "depth", 0)
    _guard.depth = depth + 1
    try:
        yield
    finally:
        _guard.depth = depth


def reads_forbidden() -> bool:
    return getattr(_guard, "depth", 0) > 0


@dataclass
class ImageSet:
    images: torch.Tensor  # uint8, N x C x H x W
    labels: torch.Tensor  # int64, N

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def num_classes(self) -> int:
        return int(self.labels.max().item()) + 1 if len(self) else 0

    def normalized(self, mean, std) -> torch.Tensor:
        x = self.images.float() / 255.0
        m = torch.tensor(mean, dtype=torch.float32).view(1, -1, 1, 1)
        s = torch.tensor(std, dtype=torch.float32).view(1, -1, 1, 1)
        return (x - m) / s


def load_dataset(path: str | Path) -> ImageSet:
    if reads_forbidden():
        raise DataBoundaryViolation(f"dataset read attempted during data-free training: {path}")
    path = Path(path)
    if not path.exists():
        raise DatasetNotFound(f"no dataset at {path}")
    if path.is_dir():
        return _load_tree(path)
    blob = torch.load(path, map_location="cpu", weights_only=True)
    try:
        images, labels = blob["images"], blob["labels"]
    except (KeyError, TypeError) as exc:
        raise DatasetNotFound(f"{path} lacks 'images'/'labels' entries") from exc
    return ImageSet(images.to(torch.uint8), labels.to(torch.int64))


def _load_tree(root: Path) -> ImageSet:
    from PIL import Image

    classes = sorted(p for p in root.iterdir() if p.is_dir())
    if not classes:
        raise DatasetNotFound(f"{root} has no class subfolders")
    images, labels = [], []
    for idx, cdir in enumerate(classes):
        for f in sorted(cdir.iterdir()):
            if f.suffix.lower() not in _IMAGE_SUFFIXES:
                continue
            arr = np.asarray(Image.open(f).convert("RGB"), dtype=np.uint8)
            images.append(arr.transpose(2, 0, 1))
            labels.append(idx)
    if not images:
        raise DatasetNotFound(f"{root} contains no images")
    return ImageSet(torch.from_numpy(np.stack(images)), torch.tensor(labels, dtype=torch.int64))


def save_packed(ds: ImageSet, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"images": ds.images, "labels": ds.labels}, path)


def save_tree(ds: ImageSet, root: str | Path) -> None:
    from PIL import Image

    root = Path(root)
    for i, (img, lab) in enumerate(zip(ds.images, ds.labels)):
        d = root / f"class_{int(lab):03d}"
        d.mkdir(parents=True, exist_ok=True)
        Image.fromarray(img.permute(1, 2, 0).numpy()).save(d / f"{i:06d}.png")


# --------------------------------------------------------------------------
# procedural shapes dataset

SHAPES = (
    "disc", "square", "triangle", "plus", "cross",
    "ring", "hstripes", "vstripes", "checker", "diamond",
)


def _shape_mask(kind: str, u: np.ndarray, v: np.ndarray, r: float) -> np.ndarray:
    au, av = np.abs(u), np.abs(v)
    if kind == "disc":
        return u**2 + v**2 <= r**2
    if kind == "square":
        return (au <= 0.8 * r) & (av <= 0.8 * r)
    if kind == "triangle":
        return (v <= 0.7 * r) & (v >= 2.0 * au - r)
    if kind == "plus":
        w = 0.3 * r
        return ((au <= w) & (av <= r)) | ((av <= w) & (au <= r))
    if kind == "cross":
        w = 0.3 * r
        return (np.abs(u - v) <= w * 1.4) & (au <= r) & (av <= r) | (
            (np.abs(u + v) <= w * 1.4) & (au <= r) & (av <= r)
        )
    if kind == "ring":
        d2 = u**2 + v**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    inside = (au <= r) & (av <= r)
    period = max(r / 2.0, 2.0)
    if kind == "hstripes":
        return inside & (np.floor(v / (period / 2)) % 2 == 0)
    if kind == "vstripes":
        return inside & (np.floor(u / (period / 2)) % 2 == 0)
    if kind == "checker":
        return inside & ((np.floor(u / period) + np.floor(v / period)) % 2 == 0)
    if kind == "diamond":
        return au + av <= r
    raise ValueError(kind)


def make_shapes(n: int, size: int = 32, num_classes: int = 10, seed: int = 0,
                noise: float = 12.0) -> ImageSet:
    """Render ``n`` images of ``num_classes`` shape categories.

    The class decides only the shape; colours, position, size and pixel noise
    are drawn independently of it.
    """
    if not 2 <= num_classes <= len(SHAPES):
        raise ValueError(f"num_classes must be in [2, {len(SHAPES)}]")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = np.empty((n, 3, size, size), dtype=np.uint8)
    for i, lab in enumerate(labels):
        cx, cy = rng.uniform(size * 0.35, size * 0.65, size=2)
        r = rng.uniform(0.25, 0.4) * size
        mask = _shape_mask(SHAPES[lab], xx - cx, yy - cy, r)
        bg = rng.uniform(0, 255, size=3)
        fg = rng.uniform(0, 255, size=3)
        while np.abs(fg - bg).sum() < 150:
            fg = rng.uniform(0, 255, size=3)
        img = np.where(mask[None], fg[:, None, None], bg[:, None, None])
        img = img + rng.normal(0.0, noise, size=img.shape)
        out[i] = np.clip(img, 0, 255).astype(np.uint8)
    return ImageSet(torch.from_numpy(out), torch.from_numpy(labels.astype(np.int64)))


def write_synthetic(root: str | Path, n_train: int = 6000, n_test: int = 2000,
                    size: int = 32, num_classes: int = 10, seed: int = 0) -> tuple[Path, Path]:
    """Write ``train.pt`` and ``test.pt`` shape datasets under ``root``."""
    root = Path(root)
    train, test = root / "train.pt", root / "test.pt"
    save_packed(make_shapes(n_train, size, num_classes, seed), train)
    save_packed(make_shapes(n_test, size, num_classes, seed + 1_000_003), test)
    log.info("wrote synthetic shapes dataset to %s", root)
    return train, test
