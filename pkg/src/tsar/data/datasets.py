"""Image datasets: a class-per-subfolder loader and a synthetic glyph generator."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".ppm", ".pgm", ".jpg", ".jpeg", ".bmp", ".gif"}


@dataclass
class ImageDataset:
    """Images ``(M, C, H, W)`` in [0, 1] with integer class labels.

    ``is_train`` carries the meta-learning split (15 train / 5 test per class
    for Omniglot-style data); it is all-True for datasets without a split.
    """

    images: np.ndarray
    labels: np.ndarray
    class_names: list[str]
    is_train: np.ndarray | None = None
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.is_train is None:
            self.is_train = np.ones(len(self.labels), dtype=bool)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def in_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def indices(self, cls: int, split: str | None = None) -> np.ndarray:
        mask = self.labels == cls
        if split == "train":
            mask &= self.is_train
        elif split == "test":
            mask &= ~self.is_train
        return np.flatnonzero(mask)

    def counts(self, split: str | None = None) -> np.ndarray:
        return np.array([len(self.indices(c, split)) for c in range(self.num_classes)])

    def subset_classes(self, classes) -> "ImageDataset":
        """Keep only ``classes`` (relabelled 0..len-1 in the given order)."""
        classes = list(classes)
        remap = {c: i for i, c in enumerate(classes)}
        keep = np.flatnonzero(np.isin(self.labels, classes))
        return ImageDataset(
            images=self.images[keep],
            labels=np.array([remap[c] for c in self.labels[keep]], dtype=np.int64),
            class_names=[self.class_names[c] for c in classes],
            is_train=self.is_train[keep],
            name=self.name,
            meta=dict(self.meta),
        )

    def with_split(self, n_train: int = 15, n_test: int = 5) -> "ImageDataset":
        """Mark the first ``n_train`` images of each class as train, next ``n_test`` as test.

        Classes with fewer than ``n_train + n_test`` images are rejected.
        """
        short = [self.class_names[c] for c, n in enumerate(self.counts()) if n < n_train + n_test]
        if short:
            raise ValueError(f"classes with fewer than {n_train + n_test} images: {short[:10]}")
        is_train = np.zeros(len(self), dtype=bool)
        keep = np.zeros(len(self), dtype=bool)
        for c in range(self.num_classes):
            idx = self.indices(c)
            is_train[idx[:n_train]] = True
            keep[idx[: n_train + n_test]] = True
        ds = ImageDataset(self.images[keep], self.labels[keep], list(self.class_names), is_train[keep], self.name)
        ds.meta = dict(self.meta, split=[n_train, n_test])
        return ds


def scarce_subset(dataset: ImageDataset, num_classes: int = 25, seed: int = 0) -> ImageDataset:
    """Random class subset for data-scarce meta-learning."""
    if num_classes > dataset.num_classes:
        raise ValueError(f"cannot draw {num_classes} classes from {dataset.num_classes}")
    rng = np.random.default_rng(seed)
    classes = np.sort(rng.choice(dataset.num_classes, size=num_classes, replace=False))
    return dataset.subset_classes(classes)


# ---------------------------------------------------------------------------
# resizing
# ---------------------------------------------------------------------------


def _axis_weights(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize(image: np.ndarray, size: tuple[int, int], method: str = "bilinear") -> np.ndarray:
    """Resize a (C, H, W) image with half-pixel-centre sampling."""
    c, h, w = image.shape
    oh, ow = size
    if method == "nearest":
        rows = np.minimum(((np.arange(oh) + 0.5) * h / oh).astype(int), h - 1)
        cols = np.minimum(((np.arange(ow) + 0.5) * w / ow).astype(int), w - 1)
        return image[:, rows][:, :, cols]
    if method != "bilinear":
        raise ValueError(f"unknown resize method {method!r}")
    r0, r1, fr = _axis_weights(h, oh)
    c0, c1, fc = _axis_weights(w, ow)
    top = image[:, r0] * (1 - fr)[None, :, None] + image[:, r1] * fr[None, :, None]
    return top[:, :, c0] * (1 - fc)[None, None, :] + top[:, :, c1] * fc[None, None, :]


def _read_image(path: Path, in_shape: tuple[int, int, int], method: str) -> np.ndarray:
    with Image.open(path) as im:
        mode = "L" if im.mode in ("1", "L", "LA", "I", "I;16", "F") else "RGB"
        arr = np.asarray(im.convert(mode), dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    channels = in_shape[0]
    if arr.shape[0] == 1 and channels == 3:
        arr = np.repeat(arr, 3, axis=0)
    elif arr.shape[0] == 3 and channels == 1:
        arr = arr.mean(axis=0, keepdims=True)
    if arr.shape[1:] != tuple(in_shape[1:]):
        arr = resize(arr, in_shape[1:], method)
    return arr


def load_image_folder(
    path: str | os.PathLike,
    in_shape: tuple[int, int, int] = (3, 28, 28),
    split_spec: tuple[int, int] | None = (15, 5),
    min_images: int | None = None,
    resize_method: str = "bilinear",
) -> ImageDataset:
    """Load ``root/<class>/<image>`` folders in lexicographic order.

    Grayscale images are replicated to three channels.  Classes below
    ``min_images`` (default: the split total) are excluded with a warning.
    """
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset folder not found: {root}")
    need = min_images if min_images is not None else (sum(split_spec) if split_spec else 1)
    images, labels, names, excluded = [], [], [], []
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(f for f in class_dir.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES)
        if len(files) < need:
            excluded.append(class_dir.name)
            continue
        label = len(names)
        names.append(class_dir.name)
        for f in files:
            images.append(_read_image(f, in_shape, resize_method))
            labels.append(label)
    if excluded:
        log.warning("excluded %d classes with fewer than %d images: %s", len(excluded), need, excluded[:10])
    if not names:
        raise ValueError(f"no usable classes under {root}")
    ds = ImageDataset(np.stack(images), np.array(labels, dtype=np.int64), names, name=root.name)
    ds.meta["excluded"] = excluded
    if split_spec:
        ds = ds.with_split(*split_spec)
    return ds


# ---------------------------------------------------------------------------
# synthetic glyphs
# ---------------------------------------------------------------------------


def _segment_distance(yy, xx, p0, p1):
    d = p1 - p0
    denom = max(float(d @ d), 1e-12)
    t = np.clip(((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / denom, 0.0, 1.0)
    return np.hypot(yy - (p0[0] + t * d[0]), xx - (p0[1] + t * d[1]))


def _template(rng: np.random.Generator, domain: int) -> dict:
    n_strokes = rng.integers(2, 5)
    pts = rng.uniform(0.15, 0.85, size=(n_strokes, 2, 2))
    n_blobs = rng.integers(0, 3) if domain == 0 else rng.integers(1, 4)
    blobs = np.column_stack([rng.uniform(0.2, 0.8, size=(n_blobs, 2)), rng.uniform(0.05, 0.12, size=n_blobs)])
    # domain 1 draws ink and background per image, so colour carries no class information
    return {"strokes": pts, "blobs": blobs, "tinted": domain != 0}


def _render(tpl: dict, h: int, w: int, rng: np.random.Generator, jitter: float) -> np.ndarray:
    if tpl["tinted"]:
        color, background = rng.uniform(0.3, 1.0, size=3), rng.uniform(0.0, 0.3, size=3)
    else:
        color, background = np.ones(3), np.zeros(3)
    angle = rng.normal(0.0, 0.25 * jitter)
    scale = 1.0 + rng.normal(0.0, 0.08 * jitter)
    shift = rng.normal(0.0, 0.05 * jitter, size=2)
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]]) * scale

    def place(p):
        return (p - 0.5) @ rot.T + 0.5 + shift

    yy, xx = np.mgrid[0:h, 0:w]
    yy = (yy + 0.5) / h
    xx = (xx + 0.5) / w
    thickness = 0.045 * (1.0 + rng.normal(0.0, 0.15 * jitter))
    ink = np.zeros((h, w))
    for p0, p1 in tpl["strokes"]:
        p0 = place(p0 + rng.normal(0.0, 0.03 * jitter, size=2))
        p1 = place(p1 + rng.normal(0.0, 0.03 * jitter, size=2))
        ink = np.maximum(ink, np.clip(1.5 - _segment_distance(yy, xx, p0, p1) / thickness, 0.0, 1.0))
    for cy, cx, r in tpl["blobs"]:
        c = place(np.array([cy, cx]))
        ink = np.maximum(ink, np.clip(1.5 - np.hypot(yy - c[0], xx - c[1]) / (r * scale), 0.0, 1.0))
    img = background[:, None, None] * (1 - ink) + color[:, None, None] * ink
    img = img + rng.normal(0.0, 0.05 * jitter, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synthetic_glyphs(
    num_classes: int,
    per_class: int,
    in_shape: tuple[int, int, int] = (3, 28, 28),
    seed: int = 0,
    domain: int = 0,
    jitter: float = 1.0,
    split: tuple[int, int] | None = None,
) -> ImageDataset:
    """Stroke-and-blob glyph classes rendered with random jitter and noise.

    ``domain=0`` gives white-on-black glyphs (the meta-learning stand-in);
    ``domain=1`` gives glyphs in a random colour on a random tinted background
    per image, an unseen domain for transfer where only shape identifies
    the class.  Same arguments always give the same pixels.
    """
    rng = np.random.default_rng([seed, domain])
    c, h, w = in_shape
    templates = [_template(rng, domain) for _ in range(num_classes)]
    images = np.empty((num_classes * per_class, 3, h, w))
    labels = np.repeat(np.arange(num_classes), per_class)
    for k, tpl in enumerate(templates):
        for j in range(per_class):
            images[k * per_class + j] = _render(tpl, h, w, rng, jitter)
    if c == 1:
        images = images.mean(axis=1, keepdims=True)
    ds = ImageDataset(
        images=images,
        labels=labels.astype(np.int64),
        class_names=[f"glyph{domain}_{k:04d}" for k in range(num_classes)],
        name=f"synthetic-glyphs-d{domain}",
        meta={"seed": seed, "domain": domain, "per_class": per_class, "jitter": jitter},
    )
    if split:
        ds = ds.with_split(*split)
    return ds


def save_image_folder(dataset: ImageDataset, path: str | os.PathLike) -> Path:
    """Write a dataset as ``path/<class>/<index>.png`` (8-bit)."""
    root = Path(path)
    for c, name in enumerate(dataset.class_names):
        d = root / name
        d.mkdir(parents=True, exist_ok=True)
        for j, idx in enumerate(dataset.indices(c)):
            arr = np.round(dataset.images[idx].transpose(1, 2, 0) * 255).astype(np.uint8)
            Image.fromarray(arr if arr.shape[2] == 3 else arr[:, :, 0]).save(d / f"{j:04d}.png")
    return root
