"""CIFAR binary loading, synthetic blobs, and train-time augmentation."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
CIFAR100_MEAN = (0.5071, 0.4865, 0.4409)
CIFAR100_STD = (0.2673, 0.2564, 0.2762)

PIXELS = 3 * 32 * 32
RECORD_SIZE = {"c10": 1 + PIXELS, "c100": 2 + PIXELS}
NUM_CLASSES = {"c10": 10, "c100": 100}

CIFAR10_TRAIN = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST = ["test_batch.bin"]
CIFAR100_TRAIN = ["train.bin"]
CIFAR100_TEST = ["test.bin"]


@dataclass
class Dataset:
    images: np.ndarray  # N x 3 x H x W float32
    labels: np.ndarray  # N int64
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, limit: int | None) -> "Dataset":
        if limit is None or limit >= len(self):
            return self
        return Dataset(self.images[:limit], self.labels[:limit], self.num_classes)


def _decode(buf: bytes, variant: str, offset: int) -> tuple[np.ndarray, np.ndarray]:
    rec = RECORD_SIZE[variant]
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, rec)
    labels = raw[:, rec - PIXELS - 1].astype(np.int64)  # fine label for c100
    pixels = raw[:, rec - PIXELS :].reshape(-1, 3, 32, 32)
    if labels.size and labels.max() >= NUM_CLASSES[variant]:
        bad = int(np.argmax(labels >= NUM_CLASSES[variant]))
        raise FormatError(f"label {labels[bad]} out of range at byte {offset + bad * rec}")
    return labels, pixels


def read_cifar_records(path, variant: str = "c10", limit: int | None = None,
                       chunk_records: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Raw (labels, uint8 pixels N x 3 x 32 x 32) from one binary batch file."""
    if variant not in RECORD_SIZE:
        raise ConfigError(f"variant must be 'c10' or 'c100', got {variant!r}")
    rec = RECORD_SIZE[variant]
    path = Path(path)
    size = path.stat().st_size
    if size % rec:
        whole = size // rec
        raise FormatError(
            f"{path}: truncated record at byte offset {whole * rec} "
            f"(size {size} is not a multiple of {rec})"
        )
    total = size // rec if limit is None else min(limit, size // rec)
    step = total if not chunk_records else chunk_records
    labels, pixels = [], []
    with open(path, "rb") as fh:
        done = 0
        while done < total:
            take = min(step, total - done)
            buf = fh.read(take * rec)
            lab, pix = _decode(buf, variant, done * rec)
            labels.append(lab)
            pixels.append(pix)
            done += take
    if not labels:
        return np.zeros(0, np.int64), np.zeros((0, 3, 32, 32), np.uint8)
    return np.concatenate(labels), np.concatenate(pixels)


def normalize(pixels: np.ndarray, mean=CIFAR10_MEAN, std=CIFAR10_STD) -> np.ndarray:
    x = pixels.astype(np.float32) / np.float32(255.0)
    m = np.asarray(mean, dtype=np.float32).reshape(1, 3, 1, 1)
    s = np.asarray(std, dtype=np.float32).reshape(1, 3, 1, 1)
    return (x - m) / s


def load_cifar(path, variant: str = "c10", limit: int | None = None, split: str = "train",
               mean=None, std=None, chunk_records: int | None = None) -> Dataset:
    """Load a CIFAR binary file, or the train/test files of an extracted directory."""
    if variant not in RECORD_SIZE:
        raise ConfigError(f"variant must be 'c10' or 'c100', got {variant!r}")
    path = Path(path)
    if path.is_dir():
        names = {
            ("c10", "train"): CIFAR10_TRAIN, ("c10", "test"): CIFAR10_TEST,
            ("c100", "train"): CIFAR100_TRAIN, ("c100", "test"): CIFAR100_TEST,
        }[(variant, split)]
        files = [path / n for n in names]
        missing = [str(f) for f in files if not f.exists()]
        if missing:
            raise FileNotFoundError(f"missing CIFAR files: {', '.join(missing)}")
    else:
        files = [path]
    labels, pixels = [], []
    remaining = limit
    for f in files:
        if remaining is not None and remaining <= 0:
            break
        lab, pix = read_cifar_records(f, variant, remaining, chunk_records)
        labels.append(lab)
        pixels.append(pix)
        if remaining is not None:
            remaining -= len(lab)
    if mean is None:
        mean = CIFAR10_MEAN if variant == "c10" else CIFAR100_MEAN
    if std is None:
        std = CIFAR10_STD if variant == "c10" else CIFAR100_STD
    images = normalize(np.concatenate(pixels), mean, std)
    return Dataset(images, np.concatenate(labels), NUM_CLASSES[variant])


def synth_blobs(num_classes: int, per_class: int, dim: int = 32, seed: int = 0,
                noise: float = 0.25, split: str = "train", period: int = 4) -> Dataset:
    """Gaussian clusters shaped as 3 x dim x dim images.

    Each class mean is a 3 x period x period texture tiled over the image.
    Textures are scaled orthonormal vectors, so two class means differ by
    exactly one unit inside every tile and by ``sqrt(tiles)`` over the whole
    image.  ``noise`` is the per-pixel standard deviation.  The means depend
    only on ``seed``; ``split`` selects an independent noise stream, so train
    and val splits share their clusters.  Samples are interleaved by class.
    """
    if num_classes < 2:
        raise ConfigError(f"synth_blobs needs at least 2 classes, got {num_classes}")
    if dim % period:
        raise ConfigError(f"image size {dim} is not a multiple of the texture period {period}")
    d = 3 * period * period
    if num_classes > d:
        raise ConfigError(f"at most {d} classes fit a period-{period} texture, got {num_classes}")
    q, _ = np.linalg.qr(np.random.default_rng([seed, 7]).standard_normal((d, num_classes)))
    patches = (q.T / np.sqrt(2.0)).reshape(num_classes, 3, period, period)
    reps = dim // period
    means = np.tile(patches, (1, 1, reps, reps))
    split_id = {"train": 0, "val": 1, "test": 2}[split]
    rng = np.random.default_rng([seed, 8, split_id])
    labels = np.tile(np.arange(num_classes), per_class)
    x = means[labels] + noise * rng.standard_normal((len(labels), 3, dim, dim))
    return Dataset(x.astype(np.float32), labels.astype(np.int64), num_classes)


def flip(image: np.ndarray) -> np.ndarray:
    return image[..., ::-1].copy()


def crop(image: np.ndarray, top: int, left: int, pad: int = 4) -> np.ndarray:
    """Crop an HxW window at (top, left) from the zero-padded image."""
    h, w = image.shape[-2:]
    padded = np.pad(image, [(0, 0)] * (image.ndim - 2) + [(pad, pad), (pad, pad)])
    return padded[..., top : top + h, left : left + w].copy()


def augment(image: np.ndarray, rng: np.random.Generator, pad: int = 4, flip_p: float = 0.5) -> np.ndarray:
    """Random crop from a ``pad``-pixel zero border, then horizontal flip with ``flip_p``."""
    top, left = rng.integers(0, 2 * pad + 1, size=2)
    out = crop(image, int(top), int(left), pad)
    if rng.random() < flip_p:
        out = flip(out)
    return out


def augment_batch(images: np.ndarray, rng: np.random.Generator, pad: int = 4, flip_p: float = 0.5) -> np.ndarray:
    n, _, h, w = images.shape
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < flip_p
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(images)
    for i, ((top, left), f) in enumerate(zip(offsets, flips)):
        win = padded[i, :, top : top + h, left : left + w]
        out[i] = win[..., ::-1] if f else win
    return out


def write_cifar_records(path, labels, pixels, variant: str = "c10") -> None:
    """Write records in the CIFAR binary layout (used for fixtures and tests)."""
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(len(labels), PIXELS)
    with open(path, "wb") as fh:
        for lab, pix in zip(labels, pixels):
            head = bytes([0, int(lab)]) if variant == "c100" else bytes([int(lab)])
            fh.write(head + pix.tobytes())


def cifar_dir_from_env(var: str = "GRAMHEAD_CIFAR10") -> Path | None:
    val = os.environ.get(var)
    return Path(val) if val else None
