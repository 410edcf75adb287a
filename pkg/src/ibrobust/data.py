"""Dataset ingestion: MNIST IDX, CIFAR-10 binary batches, synthetic blobs.

Dataset files are provided by the user; nothing is downloaded. Images are
returned as float32 NCHW arrays in [0, 1].
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    CountMismatch,
    DataError,
    LabelOutOfRange,
    RecordSizeMismatch,
    TruncatedFile,
)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    name: str
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    num_classes: int

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.train_x.shape[1:])

    def limited(self, sample_limit: int | None) -> "Dataset":
        """First-k test samples in canonical order; training set untouched."""
        if sample_limit is None:
            return self
        return Dataset(
            name=self.name,
            train_x=self.train_x,
            train_y=self.train_y,
            test_x=self.test_x[:sample_limit],
            test_y=self.test_y[:sample_limit],
            num_classes=self.num_classes,
        )


def _open_maybe_gz(path: Path):
    with open(path, "rb") as f:
        head = f.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx_images(path) -> np.ndarray:
    """Parse an IDX3 image file into [N, 1, rows, cols] floats in [0, 1]."""
    path = Path(path)
    with _open_maybe_gz(path) as f:
        header = f.read(16)
        if len(header) < 16:
            raise TruncatedFile(f"{path}: header shorter than 16 bytes")
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGES_MAGIC:
            raise BadMagic(f"{path}: magic 0x{magic:08x} != 0x{IDX_IMAGES_MAGIC:08x}", offset=0)
        payload = f.read(count * rows * cols)
        if len(payload) < count * rows * cols:
            raise TruncatedFile(
                f"{path}: expected {count * rows * cols} pixel bytes, got {len(payload)}"
            )
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(count, 1, rows, cols)
    return (pixels.astype(np.float32)) / 255.0


def read_idx_labels(path) -> np.ndarray:
    path = Path(path)
    with _open_maybe_gz(path) as f:
        header = f.read(8)
        if len(header) < 8:
            raise TruncatedFile(f"{path}: header shorter than 8 bytes")
        magic, count = struct.unpack(">II", header)
        if magic != IDX_LABELS_MAGIC:
            raise BadMagic(f"{path}: magic 0x{magic:08x} != 0x{IDX_LABELS_MAGIC:08x}", offset=0)
        payload = f.read(count)
        if len(payload) < count:
            raise TruncatedFile(f"{path}: expected {count} label bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).astype(np.int64)


def write_idx_images(path, images: np.ndarray) -> None:
    """Inverse of :func:`read_idx_images` (uint8 quantization)."""
    arr = np.asarray(images)
    if arr.ndim == 4:
        arr = arr[:, 0]
    data = np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *data.shape))
        f.write(data.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


_MNIST_FILES = {
    "train_x": ("train-images-idx3-ubyte", "train-images.idx3-ubyte"),
    "train_y": ("train-labels-idx1-ubyte", "train-labels.idx1-ubyte"),
    "test_x": ("t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"),
    "test_y": ("t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"),
}


def _find_idx_file(root: Path, names: tuple[str, ...]) -> Path:
    for name in names:
        for candidate in (root / name, root / (name + ".gz")):
            if candidate.exists():
                return candidate
    raise DataError(f"missing IDX file {names[0]}[.gz] under {root}")


def load_mnist(path) -> Dataset:
    """Load the four standard MNIST IDX files from a directory."""
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"MNIST path {root} is not a directory")
    parts = {}
    for key, names in _MNIST_FILES.items():
        file = _find_idx_file(root, names)
        parts[key] = read_idx_labels(file) if key.endswith("_y") else read_idx_images(file)
    for split in ("train", "test"):
        nx, ny = len(parts[f"{split}_x"]), len(parts[f"{split}_y"])
        if nx != ny:
            raise CountMismatch(f"{split}: {nx} images but {ny} labels")
        if parts[f"{split}_y"].size and parts[f"{split}_y"].max() > 9:
            raise LabelOutOfRange(f"{split}: label {parts[f'{split}_y'].max()} > 9")
    return Dataset(
        name="mnist",
        train_x=parts["train_x"],
        train_y=parts["train_y"],
        test_x=parts["test_x"],
        test_y=parts["test_y"],
        num_classes=10,
    )


CIFAR_RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes, channel-major


def read_cifar_batch(path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD:
        raise RecordSizeMismatch(
            f"{path}: {len(raw)} bytes is not a multiple of {CIFAR_RECORD}"
        )
    n = len(raw) // CIFAR_RECORD
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise LabelOutOfRange(f"{path}: label {labels.max()} > 9")
    images = rec[:, 1:].reshape(n, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def write_cifar_batch(path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images)
    labels = np.asarray(labels)
    data = np.round(np.clip(images, 0, 1) * 255).astype(np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([labels.astype(np.uint8)[:, None], data], axis=1)
    Path(path).write_bytes(rec.tobytes())


def load_cifar10(path) -> Dataset:
    """Load CIFAR-10 binary batches (data_batch_1..5.bin + test_batch.bin)."""
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"CIFAR-10 path {root} is not a directory")
    # tolerate the archive's nested cifar-10-batches-bin directory
    if not (root / "test_batch.bin").exists() and (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    train_parts = []
    for i in range(1, 6):
        f = root / f"data_batch_{i}.bin"
        if not f.exists():
            raise DataError(f"missing CIFAR-10 batch {f}")
        train_parts.append(read_cifar_batch(f))
    test_f = root / "test_batch.bin"
    if not test_f.exists():
        raise DataError(f"missing CIFAR-10 batch {test_f}")
    test_x, test_y = read_cifar_batch(test_f)
    return Dataset(
        name="cifar10",
        train_x=np.concatenate([p[0] for p in train_parts]),
        train_y=np.concatenate([p[1] for p in train_parts]),
        test_x=test_x,
        test_y=test_y,
        num_classes=10,
    )


def _render_blobs(size: int, bumps: np.ndarray) -> np.ndarray:
    """Sum of Gaussian bumps given (n, 4) rows of (cx, cy, sigma, amp)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.zeros((size, size))
    for cx, cy, s, a in bumps:
        img += a * np.exp(-(((xx - cx) ** 2) + ((yy - cy) ** 2)) / (2 * s * s))
    return img


def make_synthetic(classes: int, per_class: int, image_size: int = 28,
                   seed: int = 0, noise: float = 0.2, channels: int = 1) -> Dataset:
    """Gaussian class-prototype images plus pixel noise; deterministic in seed.

    ``noise`` controls difficulty: 0 gives a trivially separable task.
    """
    if classes < 2:
        raise DataError("make_synthetic needs at least 2 classes")
    if per_class < 1:
        raise DataError("make_synthetic needs per_class >= 1")
    rng = np.random.default_rng(seed)
    prototypes = []
    for _ in range(classes):
        bumps = np.column_stack([
            rng.uniform(0.15, 0.85, size=3),
            rng.uniform(0.15, 0.85, size=3),
            rng.uniform(0.08, 0.2, size=3),
            rng.uniform(0.6, 1.0, size=3),
        ])
        proto = _render_blobs(image_size, bumps)
        proto = 0.1 + 0.8 * (proto - proto.min()) / max(proto.max() - proto.min(), 1e-9)
        prototypes.append(np.repeat(proto[None], channels, axis=0))
    prototypes = np.stack(prototypes)  # (classes, C, S, S)

    def draw(n_per_class):
        xs, ys = [], []
        for k in range(classes):
            jitter = rng.normal(scale=noise, size=(n_per_class,) + prototypes[k].shape)
            xs.append(np.clip(prototypes[k][None] + jitter, 0.0, 1.0))
            ys.append(np.full(n_per_class, k, dtype=np.int64))
        x = np.concatenate(xs).astype(np.float32)
        y = np.concatenate(ys)
        order = rng.permutation(len(y))
        return x[order], y[order]

    train_x, train_y = draw(per_class)
    test_x, test_y = draw(max(per_class // 5, 1))
    return Dataset("synthetic", train_x, train_y, test_x, test_y, classes)
