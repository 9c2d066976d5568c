"""Datasets: IDX (MNIST-style) files and deterministic synthetic tasks."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, shift as nd_shift

from .errors import ConfigError, DataFormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
IDX_UBYTE = 0x08
MAX_IDX_ITEMS = 1 << 31


class IdxFormatError(DataFormatError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    normalization: tuple = field(default=None)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range for num_classes")
        if self.normalization is None and len(self.inputs):
            axes = tuple(i for i in range(self.inputs.ndim) if i != 1) if self.inputs.ndim > 2 else (0,)
            self.normalization = (self.inputs.mean(axis=axes), self.inputs.std(axis=axes))

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self) -> tuple:
        return self.inputs.shape[1:]

    def subset(self, idx, split: str | None = None) -> Dataset:
        return replace(self, inputs=self.inputs[idx], labels=self.labels[idx],
                       split=split or self.split, normalization=None)


# ----------------------------------------------------------------------- IDX


def parse_idx(data: bytes, expected_magic: int | None = None) -> np.ndarray:
    """Parse an unsigned-byte IDX payload. Any input either parses or raises IdxFormatError."""
    data = bytes(data)
    if len(data) < 4:
        raise IdxFormatError("truncated magic number", len(data))
    (magic,) = struct.unpack(">I", data[:4])
    if expected_magic is not None and magic != expected_magic:
        raise IdxFormatError(f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    if magic >> 16 != 0 or (magic >> 8) & 0xFF != IDX_UBYTE:
        raise IdxFormatError(f"unsupported IDX magic 0x{magic:08x}", 0)
    ndim = magic & 0xFF
    if ndim == 0:
        raise IdxFormatError("IDX file declares zero dimensions", 3)
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxFormatError(f"truncated dimension header ({ndim} dims)", len(data))
    dims = struct.unpack(f">{ndim}I", data[4:header])
    total = 1
    for i, d in enumerate(dims):
        total *= d
        if total > MAX_IDX_ITEMS:
            raise IdxFormatError("dimension product overflows", 4 + 4 * i)
    if len(data) - header < total:
        raise IdxFormatError(f"payload truncated: need {total} bytes, have {len(data) - header}", len(data))
    if len(data) - header > total:
        raise IdxFormatError("trailing bytes after payload", header + total)
    return np.frombuffer(data, dtype=np.uint8, count=total, offset=header).reshape(dims)


def idx_bytes(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError("only uint8 arrays can be written as IDX")
    magic = (IDX_UBYTE << 8) | array.ndim
    return struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes()


def write_idx(array: np.ndarray, path) -> None:
    Path(path).write_bytes(idx_bytes(array))


def dataset_from_idx(images: bytes, labels: bytes, num_classes: int | None = None) -> Dataset:
    imgs = parse_idx(images, IDX_IMAGES_MAGIC)
    labs = parse_idx(labels, IDX_LABELS_MAGIC)
    if len(imgs) != len(labs):
        raise IdxFormatError(f"{len(imgs)} images but {len(labs)} labels", 4)
    x = imgs.astype(np.float64)[:, None, :, :] / 255.0
    y = labs.astype(np.int64)
    n_cls = num_classes or (int(y.max()) + 1 if len(y) else 1)
    if len(y) and y.max() >= n_cls:
        raise IdxFormatError(f"label {int(y.max())} exceeds class count {n_cls}", 8)
    return Dataset(x, y, n_cls)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    return dataset_from_idx(Path(images_path).read_bytes(), Path(labels_path).read_bytes(), num_classes)


# ----------------------------------------------------------------- synthetic


def gen_synthetic(
    classes: int,
    per_class: int,
    dim,
    seed: int = 0,
    separation: float = 6.0,
    noise: float = 0.3,
) -> Dataset:
    """Deterministic multiclass task.

    A 1-d ``dim`` gives Gaussian blobs with unit covariance whose centres are
    pairwise ``separation`` apart. A ``(C, H, W)`` ``dim`` gives images in
    [0, 1]: each class is a smooth stroke prototype, and samples are shifted,
    rescaled, noisy copies of it.
    """
    if classes < 2:
        raise ConfigError("need at least two classes")
    if per_class <= 0:
        raise ConfigError("per_class must be positive (empty split)")
    dim = (dim,) if np.isscalar(dim) else tuple(dim)
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), per_class)
    if len(dim) == 1:
        x = _blobs(rng, classes, per_class, dim[0], separation)
    elif len(dim) == 3:
        x = _stroke_images(rng, classes, per_class, dim, noise)
    else:
        raise ConfigError(f"dim must be (D,) or (C, H, W), got {dim}")
    order = rng.permutation(len(labels))
    return Dataset(x[order], labels[order], classes)


def _blobs(rng, classes, per_class, d, separation):
    if d >= classes:
        q, _ = np.linalg.qr(rng.standard_normal((d, classes)))
        centres = (separation / np.sqrt(2.0)) * q.T
    else:
        centres = rng.standard_normal((classes, d))
        gaps = np.linalg.norm(centres[:, None] - centres[None], axis=-1)
        centres *= separation / gaps[np.triu_indices(classes, 1)].min()
    return np.repeat(centres, per_class, axis=0) + rng.standard_normal((classes * per_class, d))


def _stroke_images(rng, classes, per_class, dim, noise):
    c, h, w = dim
    yy, xx = np.mgrid[0:h, 0:w]
    protos = np.zeros((classes, c, h, w))
    for k in range(classes):
        for ch in range(c):
            img = np.zeros((h, w))
            for _ in range(3):
                # elongated gaussian stroke
                cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
                ang = rng.uniform(0, np.pi)
                length, width = rng.uniform(0.15, 0.35) * max(h, w), rng.uniform(0.6, 1.2)
                u = (yy - cy) * np.cos(ang) + (xx - cx) * np.sin(ang)
                v = -(yy - cy) * np.sin(ang) + (xx - cx) * np.cos(ang)
                img = np.maximum(img, np.exp(-0.5 * ((u / length) ** 2 + (v / width) ** 2)))
            protos[k, ch] = img / img.max()
    n = classes * per_class
    out = np.empty((n, c, h, w))
    for i in range(n):
        base = protos[i // per_class]
        dy, dx = rng.uniform(-1.5, 1.5, size=2)
        img = nd_shift(base, (0, dy, dx), order=1, mode="constant")
        img = img * rng.uniform(0.6, 1.2)
        blob_noise = gaussian_filter(rng.standard_normal((c, h, w)), sigma=(0, 1.0, 1.0)) * 2.5
        img = img + noise * blob_noise
        out[i] = np.clip(img, 0.0, 1.0)
    return out


def split(dataset: Dataset, fractions=(0.8, 0.15, 0.05), seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Disjoint (train, val, calib) partition after a seeded shuffle."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_val = min(n_val, n - n_train)
    parts = np.split(order, [n_train, n_train + n_val])
    return tuple(dataset.subset(p, name) for p, name in zip(parts, ("train", "val", "calib")))
