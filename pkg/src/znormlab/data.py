"""Bit-exact dataset parsers, synthetic task generators, and batching.

Byte-image datasets (MNIST IDX, CIFAR-10 binary) are scaled to [0,1] and
then per-channel standardized; synthetic 2-D tasks are standardized
directly. The constants used are recorded on the split so run manifests can
reproduce the exact preprocessing. All randomness flows through the
deterministic xoshiro generator, so shuffles and generated data are
identical across machines.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .tensor import Tensor

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes

SYNTHETIC_TASKS = ("spirals", "ring-gaussians")


class DatasetFormatError(ValueError):
    """Base class for malformed dataset files."""


class BadMagicError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class CountMismatchError(DatasetFormatError):
    pass


class RecordSizeError(DatasetFormatError):
    pass


class LabelRangeError(DatasetFormatError):
    pass


@dataclass
class DatasetSplit:
    images: Tensor  # [N, C, H, W] float32, standardized
    labels: np.ndarray  # [N] int64 in [0, num_classes)
    name: str
    num_classes: int
    standardization: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.images.shape[0]


def _standardize(images: np.ndarray, name: str) -> tuple[np.ndarray, dict]:
    """Zero-mean unit-std per channel; stats accumulated in float64."""
    d = images.astype(np.float64)
    mean = d.mean(axis=(0, 2, 3))
    std = d.std(axis=(0, 2, 3))
    safe = np.where(std > 0, std, 1.0)
    out = ((d - mean.reshape(1, -1, 1, 1)) / safe.reshape(1, -1, 1, 1)).astype(np.float32)
    record = {"dataset": name, "channel_mean": mean.tolist(), "channel_std": safe.tolist()}
    return out, record


# ---------------------------------------------------------------------------
# MNIST IDX


def _read_exact(f, n: int, what: str, path) -> bytes:
    chunk = f.read(n)
    if len(chunk) != n:
        raise TruncatedFileError(f"{path}: truncated while reading {what}")
    return chunk


def load_mnist_idx(images_path, labels_path) -> DatasetSplit:
    """Parse the IDX pair: big-endian headers, unsigned-byte payloads.

    Images file: magic 0x00000803, then N/rows/cols as big-endian u32 and
    N*rows*cols pixels. Labels file: magic 0x00000801, then N and N label
    bytes. Output layout is [N, 1, rows, cols].
    """
    with open(images_path, "rb") as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, "magic", images_path))
        if magic != IDX_IMAGES_MAGIC:
            raise BadMagicError(
                f"{images_path}: magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"
            )
        n, rows, cols = struct.unpack(">III", _read_exact(f, 12, "dimensions", images_path))
        pixels = _read_exact(f, n * rows * cols, "pixels", images_path)
    with open(labels_path, "rb") as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, "magic", labels_path))
        if magic != IDX_LABELS_MAGIC:
            raise BadMagicError(
                f"{labels_path}: magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"
            )
        (n_labels,) = struct.unpack(">I", _read_exact(f, 4, "count", labels_path))
        raw_labels = _read_exact(f, n_labels, "labels", labels_path)
    if n_labels != n:
        raise CountMismatchError(f"{n} images but {n_labels} labels")
    images = np.frombuffer(pixels, dtype=np.uint8).reshape(n, 1, rows, cols)
    images, record = _standardize(images.astype(np.float64) / 255.0, "mnist")
    labels = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)
    return DatasetSplit(images, labels, "mnist", 10, record)


# ---------------------------------------------------------------------------
# CIFAR-10 binary


def load_cifar10_bin(paths) -> DatasetSplit:
    """Parse CIFAR-10 batch files: per record one label byte then 3072 bytes
    of 32x32 pixels in R,G,B plane order."""
    all_images = []
    all_labels = []
    for path in paths:
        with open(path, "rb") as f:
            blob = f.read()
        if len(blob) == 0 or len(blob) % CIFAR_RECORD_BYTES != 0:
            raise RecordSizeError(
                f"{path}: size {len(blob)} is not a positive multiple of {CIFAR_RECORD_BYTES}"
            )
        records = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        labels = records[:, 0]
        if labels.max(initial=0) > 9:
            bad = int(labels[labels > 9][0])
            raise LabelRangeError(f"{path}: label {bad} > 9")
        all_images.append(records[:, 1:].reshape(-1, 3, 32, 32))
        all_labels.append(labels.astype(np.int64))
    images = np.concatenate(all_images)
    labels = np.concatenate(all_labels)
    images, record = _standardize(images.astype(np.float64) / 255.0, "cifar10")
    return DatasetSplit(images, labels, "cifar10", 10, record)


# ---------------------------------------------------------------------------
# synthetic non-convex tasks


def synthetic_nonconvex(task: str, n: int, noise: float, seed: int) -> DatasetSplit:
    """Two-class 2-D benchmarks with non-convex decision boundaries.

    spirals: two interleaved arms (pi-rotated copies); noise adds isotropic
    gaussian jitter. ring-gaussians: 8 blobs on the unit circle with
    alternating labels. Classes balanced by construction; features embedded
    as [n, 1, 1, 2] and standardized.
    """
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    if task not in SYNTHETIC_TASKS:
        raise ValueError(f"unknown synthetic task {task!r}; expected one of {SYNTHETIC_TASKS}")
    gen = rng.generator(seed, "synthetic", task)
    counts = (n - n // 2, n // 2)  # class 0 gets the extra point when n is odd
    xs = np.zeros((n, 2), dtype=np.float64)
    ys = np.zeros(n, dtype=np.int64)
    row = 0
    if task == "spirals":
        turns = 1.75
        for cls in (0, 1):
            m = counts[cls]
            for i in range(m):
                t = i / max(1, m - 1)
                theta = 2.0 * np.pi * turns * t + np.pi * cls
                r = 0.15 + 0.85 * t
                xs[row, 0] = r * np.cos(theta) + noise * gen.normal()
                xs[row, 1] = r * np.sin(theta) + noise * gen.normal()
                ys[row] = cls
                row += 1
    else:
        blobs = 8
        centers = [
            (np.cos(2 * np.pi * k / blobs), np.sin(2 * np.pi * k / blobs))
            for k in range(blobs)
        ]
        for cls in (0, 1):
            own = [c for k, c in enumerate(centers) if k % 2 == cls]
            m = counts[cls]
            base, extra = divmod(m, len(own))
            for j, (cx, cy) in enumerate(own):
                for _ in range(base + (1 if j < extra else 0)):
                    xs[row, 0] = cx + noise * gen.normal()
                    xs[row, 1] = cy + noise * gen.normal()
                    ys[row] = cls
                    row += 1
    images, record = _standardize(xs.reshape(n, 1, 1, 2), task)
    return DatasetSplit(images, ys, task, 2, record)


# ---------------------------------------------------------------------------
# batching and split utilities


def batches(split: DatasetSplit, batch_size: int, seed: int, epoch: int):
    """Deterministic shuffled minibatches; the last partial batch is kept.

    The permutation is a Fisher-Yates shuffle from the (seed, epoch) stream,
    so the sequence is identical across runs and independent of how many
    batches the caller consumes.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(split)
    perm = np.array(rng.generator(seed, "shuffle", epoch).permutation(n), dtype=np.int64)
    out = []
    for start in range(0, n, batch_size):
        idx = perm[start : start + batch_size]
        out.append((split.images[idx], split.labels[idx]))
    return out


def subset(split: DatasetSplit, limit: int) -> DatasetSplit:
    """First `limit` examples in file order; 0 means no cap."""
    if limit <= 0 or limit >= len(split):
        return split
    return DatasetSplit(split.images[:limit], split.labels[:limit], split.name,
                        split.num_classes, split.standardization)


def split_train_val(split: DatasetSplit, fraction: float = 0.1):
    """Deterministic split: the last `fraction` of examples (pre-shuffle
    order) become validation."""
    n = len(split)
    if n < 2:
        raise ValueError(f"need at least 2 examples to split, got {n}")
    n_val = max(1, int(n * fraction))
    train = DatasetSplit(split.images[: n - n_val], split.labels[: n - n_val],
                         split.name, split.num_classes, split.standardization)
    val = DatasetSplit(split.images[n - n_val :], split.labels[n - n_val :],
                       split.name, split.num_classes, split.standardization)
    return train, val


def augment_flip_crop(images: Tensor, gen: rng.Xoshiro256StarStar, pad: int = 4) -> Tensor:
    """Horizontal flip (p=0.5) plus zero-pad-and-crop jitter, per image."""
    n, _, h, w = images.shape
    padded = np.pad(images, [(0, 0), (0, 0), (pad, pad), (pad, pad)])
    out = np.empty_like(images)
    for i in range(n):
        dy = gen.randint_below(2 * pad + 1)
        dx = gen.randint_below(2 * pad + 1)
        crop = padded[i, :, dy : dy + h, dx : dx + w]
        if gen.random() < 0.5:
            crop = crop[:, :, ::-1]
        out[i] = crop
    return out
