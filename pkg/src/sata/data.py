"""CIFAR-style binary datasets, class subsets, synthetic data and light augmentation.

Binary layout, one record per image, no header:

* cifar10:  1 label byte, then 3 * S * S pixel bytes
* cifar100: 1 coarse label byte, 1 fine label byte, then 3 * S * S pixel bytes

Pixels are channel planes (R, G, B), each row-major S x S. ``S`` is 32 for the
real datasets; any other square size (e.g. 64 for a converted Tiny-ImageNet)
uses the same layout. Images are scaled to [0, 1] and normalized per channel
with constants taken from the training split.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorruptionError, DataError, FormatError

VARIANTS = {"cifar10": (1, 10), "cifar100": (2, 100)}
SPLIT_FILES = {
    ("cifar10", "train"): [f"data_batch_{i}.bin" for i in range(1, 6)],
    ("cifar10", "test"): ["test_batch.bin"],
    ("cifar100", "train"): ["train.bin"],
    ("cifar100", "test"): ["test.bin"],
}
DATA_DIR_ENV = "SATA_DATA_DIR"


@dataclass
class Dataset:
    """Raw uint8 pixels plus the per-channel constants used to normalize them."""

    pixels: np.ndarray  # count x 3 x H x W, uint8
    labels: np.ndarray  # count, int64
    class_count: int
    split: str
    mean: np.ndarray  # per channel, on the [0, 1] scale
    std: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.pixels) == 0:
            raise DataError("dataset is empty")
        if len(self.pixels) != len(self.labels):
            raise DataError(f"{len(self.pixels)} images but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise CorruptionError(f"labels outside [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_size(self) -> int:
        return self.pixels.shape[-1]

    def normalized(self, index=slice(None)) -> np.ndarray:
        x = self.pixels[index].astype(np.float64) / 255.0
        return (x - self.mean[:, None, None]) / self.std[:, None, None]

    @property
    def images(self) -> np.ndarray:
        return self.normalized()


def channel_stats(pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std of ``pixels / 255``; zero std falls back to 1."""
    # chunked so a full 50k-image split never materializes as float64
    total = np.zeros(pixels.shape[1])
    for i in range(0, len(pixels), 4096):
        total += pixels[i:i + 4096].sum(axis=(0, 2, 3), dtype=np.float64)
    count = pixels.shape[0] * pixels.shape[2] * pixels.shape[3]
    mean = total / count / 255.0
    sq = np.zeros(pixels.shape[1])
    for i in range(0, len(pixels), 4096):
        x = pixels[i:i + 4096].astype(np.float64) / 255.0 - mean[:, None, None]
        sq += (x * x).sum(axis=(0, 2, 3))
    std = np.sqrt(sq / count)
    return mean, np.where(std > 0, std, 1.0)


def _record_layout(variant: str, image_size: int) -> tuple[int, int]:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown dataset variant {variant!r}; expected one of {sorted(VARIANTS)}")
    label_bytes = VARIANTS[variant][0]
    return label_bytes, label_bytes + 3 * image_size * image_size


def load_cifar_binary(
    path,
    variant: str = "cifar10",
    split: str = "train",
    *,
    image_size: int = 32,
    class_count: int | None = None,
    mean=None,
    std=None,
) -> Dataset:
    """Parse one binary file. Normalization constants default to this file's own stats."""
    label_bytes, record = _record_layout(variant, image_size)
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such dataset file: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % record:
        raise FormatError(
            f"{path}: {raw.size} bytes is not a whole number of {record}-byte {variant} records "
            f"(expected a multiple of {record}, nearest {max(1, round(raw.size / record)) * record})"
        )
    return _from_records(raw.reshape(-1, record), variant, split, image_size, class_count, mean, std, str(path))


def _from_records(rows, variant, split, image_size, class_count, mean, std, source) -> Dataset:
    label_bytes = VARIANTS[variant][0]
    class_count = class_count or VARIANTS[variant][1]
    labels = rows[:, label_bytes - 1].astype(np.int64)
    if labels.max() >= class_count:
        bad = int(np.argmax(labels >= class_count))
        raise CorruptionError(f"{source}: record {bad} has label {labels[bad]} >= class count {class_count}")
    pixels = rows[:, label_bytes:].reshape(-1, 3, image_size, image_size)
    if mean is None or std is None:
        mean, std = channel_stats(pixels)
    return Dataset(pixels, labels, class_count, split, np.asarray(mean, float), np.asarray(std, float))


def load_split(
    data_dir,
    variant: str,
    split: str,
    *,
    image_size: int = 32,
    class_count: int | None = None,
    mean=None,
    std=None,
) -> Dataset:
    """Load and concatenate the standard files of a split from ``data_dir``."""
    data_dir = resolve_data_dir(data_dir)
    try:
        names = SPLIT_FILES[(variant, split)]
    except KeyError:
        raise ConfigError(f"unknown split {split!r} for {variant!r}") from None
    label_bytes, record = _record_layout(variant, image_size)
    chunks = []
    for name in names:
        path = data_dir / name
        if not path.is_file():
            raise DataError(f"missing dataset file {path}")
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size == 0 or raw.size % record:
            raise FormatError(f"{path}: {raw.size} bytes is not a multiple of the {record}-byte record size")
        chunks.append(raw.reshape(-1, record))
    rows = np.concatenate(chunks)
    return _from_records(rows, variant, split, image_size, class_count, mean, std, str(data_dir))


def resolve_data_dir(data_dir=None) -> Path:
    if data_dir:
        return Path(data_dir)
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env)
    raise ConfigError(f"no data directory given and {DATA_DIR_ENV} is not set")


def write_cifar_binary(dataset: Dataset, path, variant: str = "cifar10") -> Path:
    """Write ``dataset`` in the binary layout (cifar100 coarse label is written as 0)."""
    label_bytes, _ = _record_layout(variant, dataset.image_size)
    if dataset.class_count > 256:
        raise DataError("labels do not fit in one byte")
    n = len(dataset)
    rows = np.zeros((n, label_bytes + dataset.pixels[0].size), dtype=np.uint8)
    rows[:, label_bytes - 1] = dataset.labels
    rows[:, label_bytes:] = dataset.pixels.reshape(n, -1)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows.tofile(path)
    return path


def subset(dataset: Dataset, classes, per_class: int | None, seed: int = 0) -> Dataset:
    """Seeded ``per_class`` examples of each listed class, relabelled 0..k-1 in list order.

    ``per_class=None`` keeps every example of the listed classes.
    """
    classes = [int(c) for c in classes]
    if not classes:
        raise DataError("subset needs at least one class")
    if len(set(classes)) != len(classes):
        raise DataError(f"duplicate classes in {classes}")
    rng = np.random.default_rng(seed)
    picked, labels = [], []
    for new, c in enumerate(classes):
        if not 0 <= c < dataset.class_count:
            raise DataError(f"class {c} does not exist (class count {dataset.class_count})")
        idx = np.flatnonzero(dataset.labels == c)
        k = len(idx) if per_class is None else per_class
        if k < 1 or len(idx) < k:
            raise DataError(f"class {c} has {len(idx)} examples, {k} requested")
        picked.append(np.sort(rng.choice(idx, size=k, replace=False)))
        labels.append(np.full(k, new))
    idx = np.concatenate(picked)
    return replace(dataset, pixels=dataset.pixels[idx], labels=np.concatenate(labels), class_count=len(classes))


def make_synthetic(
    n: int,
    classes: int,
    image_size: int = 8,
    seed: int = 0,
    *,
    noise: float = 40.0,
    split: str = "train",
) -> Dataset:
    """Class-conditional Gaussian blobs in pixel space.

    Each class gets a random prototype image; samples are the prototype plus
    isotropic pixel noise, clipped and quantized to uint8. Labels cycle
    through the classes so every class is represented when ``n >= classes``.
    """
    if classes < 1 or n < classes:
        raise DataError(f"need n >= classes >= 1, got n={n}, classes={classes}")
    rng = np.random.default_rng(seed)
    shape = (3, image_size, image_size)
    prototypes = rng.uniform(48.0, 208.0, size=(classes,) + shape)
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    x = prototypes[labels] + rng.normal(0.0, noise, size=(n,) + shape)
    pixels = np.clip(np.rint(x), 0, 255).astype(np.uint8)
    mean, std = channel_stats(pixels)
    return Dataset(pixels, labels, classes, split, mean, std)


def split_dataset(dataset: Dataset, val_fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded train/validation split sharing the parent's normalization constants."""
    n = len(dataset)
    n_val = int(round(n * val_fraction))
    if not 0 < n_val < n:
        raise DataError(f"validation fraction {val_fraction} leaves an empty split for {n} examples")
    perm = np.random.default_rng(seed).permutation(n)
    val_idx, train_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    train = replace(dataset, pixels=dataset.pixels[train_idx], labels=dataset.labels[train_idx], split="train")
    val = replace(dataset, pixels=dataset.pixels[val_idx], labels=dataset.labels[val_idx], split="val")
    return train, val


def augment_basic(image: np.ndarray, rng: np.random.Generator, *, pad: int = 4, offset=None, flip=None) -> np.ndarray:
    """Random shift via zero-padded crop plus random horizontal flip.

    ``offset`` is the (dy, dx) displacement of the crop window from centre,
    each in ``[-pad, pad]``; (0, 0) returns the image unchanged. Passing
    ``offset``/``flip`` fixes those choices instead of drawing them.
    """
    c, h, w = image.shape
    if offset is None:
        offset = tuple(int(v) for v in rng.integers(-pad, pad + 1, size=2))
    if flip is None:
        flip = bool(rng.random() < 0.5)
    dy, dx = offset
    if abs(dy) > pad or abs(dx) > pad:
        raise DataError(f"crop offset {offset} exceeds padding {pad}")
    padded = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=image.dtype)
    padded[:, pad:pad + h, pad:pad + w] = image
    out = padded[:, pad + dy:pad + dy + h, pad + dx:pad + dx + w]
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment_batch(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    return np.stack([augment_basic(img, rng, pad=pad) for img in images])
