"""Dataset containers, IDX/CIFAR binary parsers and synthetic data."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataMismatchError, DataParseError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


@dataclass
class Dataset:
    x: np.ndarray                      # float32, (N, C, H, W) or (N, D)
    y: np.ndarray                      # int64, (N,)
    num_classes: int
    value_range: tuple | None = (0.0, 1.0)  # declared input range; None = unbounded
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise DataMismatchError(f"{len(self.x)} inputs but {len(self.y)} labels")
        self.y = np.asarray(self.y, dtype=np.int64)

    def __len__(self):
        return len(self.y)

    @property
    def input_shape(self) -> tuple:
        return tuple(self.x.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.num_classes, self.value_range, self.name, dict(self.meta))

    def label_histogram(self) -> list[int]:
        return np.bincount(self.y, minlength=self.num_classes).tolist()


def _read_bytes(path) -> bytes:
    path = Path(path)
    data = path.read_bytes()
    if data[:2] == b"\x1f\x8b":
        try:
            data = gzip.decompress(data)
        except (OSError, EOFError) as exc:
            raise DataParseError(f"{path}: corrupt gzip stream ({exc})") from None
    return data


def _parse_idx(data: bytes, expected_magic: int, what: str) -> np.ndarray:
    if len(data) < 4:
        raise DataParseError(f"{what}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise DataParseError(f"{what}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(data) < head:
        raise DataParseError(f"{what}: truncated IDX dimension block")
    dims = struct.unpack(f">{ndim}I", data[4:head])
    n = int(np.prod(dims, dtype=np.int64))
    if len(data) - head < n:
        raise DataParseError(f"{what}: truncated payload ({len(data) - head} of {n} bytes)")
    if len(data) - head > n:
        raise DataParseError(f"{what}: {len(data) - head - n} trailing bytes after payload")
    return np.frombuffer(data, dtype=np.uint8, count=n, offset=head).reshape(dims)


def ingest_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Load an IDX image/label pair (optionally gzipped) with pixels scaled to [0, 1]."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, str(images_path))
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, str(labels_path))
    if images.ndim != 3:
        raise DataParseError(f"{images_path}: expected 3 image dimensions, got {images.ndim}")
    if len(images) != len(labels):
        raise DataMismatchError(f"{len(images)} images but {len(labels)} labels")
    k = int(labels.max()) + 1 if len(labels) else 0
    if num_classes is not None:
        if k > num_classes:
            raise DataParseError(f"label {k - 1} outside {num_classes} classes")
        k = num_classes
    x = (images.astype(np.float32) / np.float32(255.0))[:, None]
    ds = Dataset(x, labels.astype(np.int64), k, (0.0, 1.0), Path(images_path).name)
    ds.meta["label_histogram"] = ds.label_histogram()
    return ds


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (N, H, W) and labels (N,) as uncompressed IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


def ingest_cifar(paths, num_classes: int | None = None) -> Dataset:
    """Concatenate CIFAR binary batches (1 label byte + 3072 CHW pixel bytes per record)."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    xs, ys = [], []
    for p in paths:
        data = _read_bytes(p)
        if len(data) == 0 or len(data) % CIFAR_RECORD:
            raise DataParseError(f"{p}: size {len(data)} is not a positive multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        ys.append(rec[:, 0].astype(np.int64))
        xs.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    y = np.concatenate(ys)
    k = int(y.max()) + 1 if num_classes is None else num_classes
    if y.max() >= k:
        raise DataParseError(f"label {int(y.max())} outside {k} classes")
    x = np.concatenate(xs).astype(np.float32) / np.float32(255.0)
    ds = Dataset(x, y, k, (0.0, 1.0), "cifar")
    ds.meta["label_histogram"] = ds.label_histogram()
    return ds


def synth_blobs(classes: int, samples_per_class: int, dims: int, separation: float = 5.0,
                seed: int = 0, spread: float = 1.0) -> Dataset:
    """Isotropic gaussian blobs around seeded centres.

    Centres are drawn on a sphere of radius ``separation``; every class has the
    same number of samples.  Inputs are unbounded (``value_range=None``).
    """
    if min(classes, samples_per_class, dims) <= 0 or separation <= 0 or spread <= 0:
        raise ConfigError("synth_blobs parameters must be positive")
    rng = np.random.default_rng(seed)
    centres = rng.normal(size=(classes, dims))
    centres *= separation / np.maximum(np.linalg.norm(centres, axis=1, keepdims=True), 1e-12)
    y = np.repeat(np.arange(classes), samples_per_class)
    x = centres[y] + spread * rng.normal(size=(len(y), dims))
    return Dataset(x.astype(np.float32), y, classes, None, f"blobs{classes}x{dims}")


def load_digits_dataset() -> Dataset:
    """The 8x8 handwritten digits bundled with scikit-learn (1797 samples, 10 classes)."""
    try:
        from sklearn.datasets import load_digits
    except ImportError as exc:  # pragma: no cover - optional dependency
        raise ConfigError("the digits source needs scikit-learn (pip install 'artifact[digits]')") from exc
    d = load_digits()
    x = (d.images / 16.0).astype(np.float32)[:, None]
    return Dataset(x, d.target.astype(np.int64), 10, (0.0, 1.0), "digits")


def digits_as_uint8(ds: Dataset) -> np.ndarray:
    """Quantize [0, 1] images to bytes for IDX export."""
    return np.rint(ds.x[:, 0] * 255.0).astype(np.uint8)


def train_test_split(ds: Dataset, test_fraction: float = 0.25, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified split: each class contributes ``round(test_fraction * n_c)`` test samples."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.y == c)
        idx = idx[rng.permutation(len(idx))]
        k = int(round(test_fraction * len(idx)))
        test.append(idx[:k])
        train.append(idx[k:])
    tr, te = np.sort(np.concatenate(train)), np.sort(np.concatenate(test))
    return ds.subset(tr), ds.subset(te)
