"""Dataset ingestion: CIFAR-10 binary archives and synthetic class blobs.

Images are float32 NCHW, scaled to [0,1] and then per-channel standardized
with constants computed from the training split.  Every dataset carries a
split tag; downstream stages check the tag so the test split never leaks
into pair collection or search.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .ops import resize_bilinear

CIFAR_RECORD = 3073  # 1 label byte + 3 * 1024 pixel bytes
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray        # (N, C, H, W) float32, standardized
    labels: np.ndarray        # (N,) int64
    split: str                # train / val / test
    provenance: str
    n_classes: int
    mean: np.ndarray          # per-channel standardization constants
    std: np.ndarray

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images vs {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0
                                 or self.labels.max() >= self.n_classes):
            raise DataError("labels out of range")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def resolution(self) -> int:
        return self.images.shape[2]

    def subset(self, idx: np.ndarray, split: str | None = None) -> "Dataset":
        return replace(self, images=self.images[idx], labels=self.labels[idx],
                       split=split or self.split)


def _parse_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    raw = path.read_bytes()
    if len(raw) % CIFAR_RECORD != 0:
        bad = (len(raw) // CIFAR_RECORD) * CIFAR_RECORD
        raise DataError(f"{path}: malformed record at byte offset {bad} "
                        f"(file length {len(raw)} is not a multiple of {CIFAR_RECORD})")
    n = len(raw) // CIFAR_RECORD
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    images = rec[:, 1:].reshape(n, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def load_cifar10_binary(path) -> tuple[Dataset, Dataset]:
    """Load the standard CIFAR-10 binary layout from a directory.

    Returns (train, test).  Standardization constants come from the train
    split and are stored on both datasets.
    """
    root = Path(path)
    train_parts = [_parse_cifar_file(root / f) for f in CIFAR_TRAIN_FILES]
    images = np.concatenate([p[0] for p in train_parts])
    labels = np.concatenate([p[1] for p in train_parts])
    test_images, test_labels = _parse_cifar_file(root / CIFAR_TEST_FILE)
    mean = images.mean(axis=(0, 2, 3)).astype(np.float32)
    std = images.std(axis=(0, 2, 3)).astype(np.float32)
    std = np.maximum(std, 1e-6)

    def standardize(x):
        return ((x - mean[None, :, None, None]) / std[None, :, None, None]
                ).astype(np.float32)

    train = Dataset(standardize(images), labels, "train", f"cifar10:{root}",
                    10, mean, std)
    test = Dataset(standardize(test_images), test_labels, "test",
                   f"cifar10:{root}", 10, mean, std)
    return train, test


def synth_dataset(n: int, n_classes: int, resolution: int, seed: int,
                  separation: float = 3.0, split: str = "train") -> Dataset:
    """Class-conditional Gaussian blobs in pixel space.

    Each class gets a smooth mean pattern (coarse random grid upsampled to
    the target resolution, unit L2 norm) scaled by `separation`; samples add
    unit-variance pixel noise.  separation=0 is pure noise (chance level);
    large separation makes the task linearly separable.
    """
    if n < n_classes:
        raise DataError(f"need at least {n_classes} samples, got {n}")
    rng = np.random.default_rng(seed)
    coarse = rng.standard_normal((n_classes, 3, 4, 4)).astype(np.float32)
    patterns = resize_bilinear(coarse, resolution)
    patterns /= np.sqrt((patterns ** 2).sum(axis=(1, 2, 3), keepdims=True))
    labels = rng.integers(0, n_classes, size=n).astype(np.int64)
    noise = rng.standard_normal((n, 3, resolution, resolution)).astype(np.float32)
    images = separation * patterns[labels] + noise
    mean = images.mean(axis=(0, 2, 3)).astype(np.float32)
    std = np.maximum(images.std(axis=(0, 2, 3)), 1e-6).astype(np.float32)
    images = (images - mean[None, :, None, None]) / std[None, :, None, None]
    return Dataset(images.astype(np.float32), labels, split,
                   f"synthetic:seed={seed},sep={separation}", n_classes,
                   mean, std)


def split_dataset(ds: Dataset, counts: dict[str, int],
                  seed: int = 0) -> dict[str, Dataset]:
    """Carve disjoint tagged splits out of one dataset (shuffled by seed)."""
    total = sum(counts.values())
    if total > len(ds):
        raise DataError(f"requested {total} samples, dataset has {len(ds)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ds))
    out, start = {}, 0
    for tag, cnt in counts.items():
        out[tag] = ds.subset(order[start:start + cnt], split=tag)
        start += cnt
    return out


def iter_batches(ds: Dataset, batch_size: int,
                 rng: np.random.Generator | None = None):
    """Yield (images, labels) minibatches; shuffled when rng is given."""
    order = rng.permutation(len(ds)) if rng is not None else np.arange(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start:start + batch_size]
        yield ds.images[idx], ds.labels[idx]
