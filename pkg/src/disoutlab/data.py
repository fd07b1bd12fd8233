"""Dataset ingestion and batching.

Supports MNIST-format IDX files, CIFAR-10 binary files, and two synthetic
generators: Gaussian class blobs for fast smoke tests and a procedural
digit renderer that stands in for MNIST when the real files are absent.
Images are (N, C, H, W) float arrays in [0, 1]; batching shuffles with a
permutation that is a pure function of (seed, epoch).
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
SPLITS = ("train", "val", "test")

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


@dataclass
class Dataset:
    """Immutable image batch: (N, C, H, W) floats in [0, 1] plus labels."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "train"

    def validate(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        n = self.images.shape[0]
        if n == 0:
            raise ValueError("dataset is empty")
        if self.labels.shape != (n,):
            raise ValueError(
                f"label count {self.labels.shape} does not match {n} images")
        if not np.all(np.isfinite(self.images)):
            raise ValueError("images contain non-finite values")
        lo, hi = float(self.images.min()), float(self.images.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"images must lie in [0, 1], got [{lo}, {hi}]")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        return self

    def __len__(self):
        return self.images.shape[0]


def _read_bytes(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw, path, magic, rank):
    header = 4 + 4 * rank
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header")
    fields = struct.unpack(f">{rank + 1}i", raw[:header])
    if fields[0] != magic:
        raise FormatError(
            f"{path}: bad IDX magic 0x{fields[0]:08x}, expected 0x{magic:08x}")
    dims = fields[1:]
    count = int(np.prod(dims))
    if len(raw) != header + count:
        raise FormatError(
            f"{path}: payload of {len(raw) - header} bytes does not match "
            f"dims {dims}")
    data = np.frombuffer(raw, dtype=np.uint8, offset=header)
    return data.reshape(dims)


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """Parse an IDX image/label file pair into a Dataset.

    Big-endian headers; 0x803 for (N, H, W) image bytes, 0x801 for label
    bytes.  Gzipped files are accepted.  Pixels are scaled by 1/255.
    """
    images = _parse_idx(_read_bytes(images_path), images_path,
                        IDX_IMAGES_MAGIC, 3)
    labels = _parse_idx(_read_bytes(labels_path), labels_path,
                        IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"{images_path} holds {images.shape[0]} images but "
            f"{labels_path} holds {labels.shape[0]} labels")
    scaled = (images.astype(np.float32) / 255.0)[:, None, :, :]
    classes = int(labels.max()) + 1 if len(labels) else 0
    return Dataset(scaled, labels.astype(np.int64), max(classes, 10),
                   split).validate()


def save_idx(dataset: Dataset, images_path, labels_path):
    """Write a single-channel Dataset as an IDX image/label pair.

    Pixels are stored as round(value * 255); reloading a dataset that came
    from IDX files reproduces it bit-exactly.
    """
    if dataset.images.shape[1] != 1:
        raise ValueError("IDX export requires single-channel images")
    n, _, h, w = dataset.images.shape
    pixels = np.round(dataset.images[:, 0] * 255.0).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">4i", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">2i", IDX_LABELS_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


def load_mnist(root=None, split: str = "train") -> Dataset:
    """Load the MNIST IDX files from ``root`` (default: $DISOUTLAB_DATA or
    ./data/mnist).  Raises FileNotFoundError when the files are absent."""
    root = root or os.environ.get("DISOUTLAB_DATA", os.path.join("data", "mnist"))
    prefix = "train" if split == "train" else "test"
    images = os.path.join(root, MNIST_FILES[f"{prefix}_images"])
    labels = os.path.join(root, MNIST_FILES[f"{prefix}_labels"])
    for path in (images, labels):
        if not os.path.exists(path) and not os.path.exists(path + ".gz"):
            raise FileNotFoundError(f"MNIST file not found: {path}")
    images = images if os.path.exists(images) else images + ".gz"
    labels = labels if os.path.exists(labels) else labels + ".gz"
    return load_idx(images, labels, split)


RECORD_BYTES = 3073


def load_cifar10_bin(paths, split: str = "train") -> Dataset:
    """Parse CIFAR-10 binary batches (1 label byte + 3072 pixel bytes per
    record) into an (N, 3, 32, 32) Dataset."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    chunks = []
    labels = []
    for path in paths:
        raw = _read_bytes(path)
        if len(raw) == 0 or len(raw) % RECORD_BYTES != 0:
            raise FormatError(
                f"{path}: length {len(raw)} is not a positive multiple of "
                f"{RECORD_BYTES}")
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
        labels.append(records[:, 0].astype(np.int64))
        chunks.append(records[:, 1:].reshape(-1, 3, 32, 32))
    images = np.concatenate(chunks).astype(np.float32) / 255.0
    return Dataset(images, np.concatenate(labels), 10, split).validate()


def synthetic_blobs(n: int, classes: int, dims, seed: int,
                    separation: float = 6.0, split: str = "train") -> Dataset:
    """Gaussian class clusters, min-max scaled into [0, 1].

    ``dims`` is either a feature count (stored as (N, 1, 1, D)) or a full
    (C, H, W) image shape.  ``separation`` scales the distance between
    cluster centers in units of the within-cluster standard deviation.
    """
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}")
    if n < 1:
        raise ConfigError(f"need at least 1 sample, got {n}")
    shape = (1, 1, int(dims)) if np.isscalar(dims) else tuple(dims)
    d = int(np.prod(shape))
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((classes, d))
    labels = rng.permutation(np.arange(n) % classes)
    points = separation * centers[labels] + rng.standard_normal((n, d))
    lo, hi = points.min(), points.max()
    span = hi - lo if hi > lo else 1.0
    images = ((points - lo) / span).astype(np.float32).reshape((n,) + shape)
    return Dataset(images, labels.astype(np.int64), classes, split).validate()


_SEGMENTS = {
    "A": (0, 3, 0, 12), "B": (0, 9, 9, 12), "C": (9, 18, 9, 12),
    "D": (15, 18, 0, 12), "E": (9, 18, 0, 3), "F": (0, 9, 0, 3),
    "G": (8, 11, 0, 12),
}
_DIGIT_SEGMENTS = {
    0: "ABCDEF", 1: "BC", 2: "ABGED", 3: "ABGCD", 4: "FGBC",
    5: "AFGCD", 6: "AFGECD", 7: "ABC", 8: "ABCDEFG", 9: "ABCDFG",
}


def synthetic_digits(n: int, seed: int, noise: float = 0.25,
                     max_shift: int = 4, occlusions: int = 2,
                     split: str = "train") -> Dataset:
    """Procedural 28x28 digit images in the MNIST format.

    Each sample renders its class as seven-segment strokes with per-sample
    intensity jitter, random translation, square occlusion patches, and
    additive pixel noise, so a small network can learn the task yet a
    5,000-image subset still leaves a visible train/test gap.
    """
    if n < 1:
        raise ConfigError(f"need at least 1 sample, got {n}")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=n)
    images = np.zeros((n, 1, 28, 28), dtype=np.float32)
    for i in range(n):
        glyph = np.zeros((18, 12), dtype=np.float32)
        for seg in _DIGIT_SEGMENTS[int(labels[i])]:
            y0, y1, x0, x1 = _SEGMENTS[seg]
            glyph[y0:y1, x0:x1] = 0.6 + 0.4 * rng.random()
        dy = 5 + int(rng.integers(-max_shift, max_shift + 1))
        dx = 8 + int(rng.integers(-max_shift, max_shift + 1))
        canvas = images[i, 0]
        canvas[dy:dy + 18, dx:dx + 12] = glyph
        for _ in range(occlusions):
            oy = int(rng.integers(0, 24))
            ox = int(rng.integers(0, 24))
            canvas[oy:oy + 5, ox:ox + 5] = 0.0
        canvas += noise * rng.standard_normal((28, 28)).astype(np.float32)
    np.clip(images, 0.0, 1.0, out=images)
    return Dataset(images, labels.astype(np.int64), 10, split).validate()


def split_dataset(dataset: Dataset, counts: dict) -> dict:
    """Slice a dataset into named splits; counts must not oversubscribe."""
    total = sum(counts.values())
    if total > len(dataset):
        raise ConfigError(
            f"splits need {total} samples but dataset has {len(dataset)}")
    out = {}
    start = 0
    for name, count in counts.items():
        if name not in SPLITS:
            raise ConfigError(f"unknown split {name!r}")
        out[name] = Dataset(dataset.images[start:start + count],
                            dataset.labels[start:start + count],
                            dataset.class_count, name)
        start += count
    return out


@dataclass
class AugmentConfig:
    """Per-batch augmentation switches; all off means identity."""

    flip: bool = False
    crop_pad: int = 0
    rotate_deg: float = 0.0

    def active(self) -> bool:
        return self.flip or self.crop_pad > 0 or self.rotate_deg > 0.0

    def validate(self):
        if self.crop_pad < 0:
            raise ConfigError(f"crop_pad must be >= 0, got {self.crop_pad}")
        if self.rotate_deg < 0:
            raise ConfigError(f"rotate_deg must be >= 0, got {self.rotate_deg}")
        return self


def _rotate_nn(image: np.ndarray, angle_rad: float) -> np.ndarray:
    """Rotate one (C, H, W) image about its center, nearest-neighbor,
    zero fill outside."""
    _, h, w = image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    cos, sin = np.cos(angle_rad), np.sin(angle_rad)
    src_y = np.rint(cos * (ys - cy) - sin * (xs - cx) + cy).astype(np.int64)
    src_x = np.rint(sin * (ys - cy) + cos * (xs - cx) + cx).astype(np.int64)
    valid = (src_y >= 0) & (src_y < h) & (src_x >= 0) & (src_x < w)
    out = np.zeros_like(image)
    out[:, valid] = image[:, src_y[valid], src_x[valid]]
    return out


def augment(batch: np.ndarray, cfg: AugmentConfig,
            rng: np.random.Generator) -> np.ndarray:
    """Per-sample random flip, pad-then-crop, and rotation.

    Draw order is fixed (flip coins, then crop offsets, then angles) so a
    shared RNG stream stays aligned across runs with equal flags.
    """
    if not cfg.active():
        return batch
    out = np.array(batch, copy=True)
    n = out.shape[0]
    if cfg.flip:
        coins = rng.random(n) < 0.5
        out[coins] = out[coins][..., ::-1]
    if cfg.crop_pad > 0:
        k = cfg.crop_pad
        h, w = out.shape[2], out.shape[3]
        offsets = rng.integers(0, 2 * k + 1, size=(n, 2))
        padded = np.pad(out, ((0, 0), (0, 0), (k, k), (k, k)), mode="edge")
        for i in range(n):
            dy, dx = offsets[i]
            out[i] = padded[i, :, dy:dy + h, dx:dx + w]
    if cfg.rotate_deg > 0.0:
        angles = rng.uniform(-cfg.rotate_deg, cfg.rotate_deg, size=n)
        for i in range(n):
            out[i] = _rotate_nn(out[i], np.deg2rad(angles[i]))
    return out


class BatchIterator:
    """Deterministic shuffled mini-batches over a dataset.

    The permutation for an epoch is derived solely from (seed, epoch), so
    any run with the same seed visits samples in the same order; every
    index appears exactly once per epoch (the final batch may be short).
    """

    def __init__(self, dataset: Dataset, batch_size: int, seed: int,
                 augment_cfg: AugmentConfig | None = None,
                 augment_rng: np.random.Generator | None = None):
        if batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
        self.dataset = dataset
        self.batch_size = int(batch_size)
        self.seed = int(seed)
        self.augment_cfg = augment_cfg
        self.augment_rng = augment_rng

    @property
    def batches_per_epoch(self) -> int:
        return -(-len(self.dataset) // self.batch_size)

    def epoch(self, epoch: int):
        order = np.random.default_rng(
            np.random.SeedSequence([self.seed, int(epoch)])
        ).permutation(len(self.dataset))
        for start in range(0, len(order), self.batch_size):
            idx = order[start:start + self.batch_size]
            x = self.dataset.images[idx]
            y = self.dataset.labels[idx]
            if self.augment_cfg is not None and self.augment_cfg.active():
                x = augment(x, self.augment_cfg, self.augment_rng)
            yield x, y


def normalize_images(images: np.ndarray, mean, std) -> np.ndarray:
    """Per-channel (x - mean) / std; mean/std are scalars or length-C."""
    mean = np.asarray(mean, dtype=images.dtype).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=images.dtype).reshape(1, -1, 1, 1)
    if np.any(std == 0):
        raise ConfigError("normalization std must be nonzero")
    return (images - mean) / std
