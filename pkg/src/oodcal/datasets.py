"""Dataset ingestion: IDX and CIFAR-10 binary parsers, synthetic Gaussian
clusters, and class-subset views.

All loaders return a :class:`LabeledDataset` with pixel/feature values scaled
to [0, 1] (byte value / 255) and one flat feature vector per row. Both binary
formats are parsed bit-exactly against their public layouts:

* IDX: 4-byte big-endian magic (0x00000803 images / 0x00000801 labels),
  big-endian u32 dimension sizes, then raw unsigned bytes.
* CIFAR-10 batches: fixed 3073-byte records, 1 label byte followed by
  3072 channel-major pixel bytes.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073
CIFAR_PIXEL_BYTES = 3072
CIFAR_NUM_CLASSES = 10

SOURCES = ("mnist", "fmnist", "cifar10", "synthetic")
SPLITS = ("train", "test")


class DataFormatError(ValueError):
    """File does not follow the expected binary layout (bad magic, bad size)."""


class DataLengthError(ValueError):
    """File is truncated or carries trailing bytes."""


class DataConsistencyError(ValueError):
    """Paired files disagree, e.g. image count != label count."""


@dataclass
class LabeledDataset:
    """Feature vectors with integer class labels.

    ``X`` is (n_samples, dim) float64, ``y`` is (n_samples,) int64 with
    non-negative class ids. ``split`` and ``source`` tag provenance.
    """

    X: np.ndarray
    y: np.ndarray
    split: str = "train"
    source: str = "synthetic"

    def __post_init__(self) -> None:
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2:
            raise ValueError(f"X must be 2-D (n_samples, dim), got shape {self.X.shape}")
        if self.y.ndim != 1 or len(self.y) != len(self.X):
            raise ValueError(
                f"labels must be 1-D and match sample count: {len(self.X)} samples, "
                f"{self.y.shape} labels"
            )
        if len(self.y) and self.y.min() < 0:
            raise ValueError("class labels must be non-negative")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}, got {self.source!r}")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def classes(self) -> list[int]:
        return np.unique(self.y).tolist()

    def class_counts(self) -> dict[int, int]:
        values, counts = np.unique(self.y, return_counts=True)
        return dict(zip(values.tolist(), counts.tolist()))


@dataclass
class SyntheticSpec:
    """Recipe for an isotropic Gaussian-cluster dataset, one cluster per class."""

    n_classes: int
    dim: int
    cluster_means: np.ndarray
    cluster_std: float
    samples_per_class: int
    seed: int = 0

    def __post_init__(self) -> None:
        self.cluster_means = np.asarray(self.cluster_means, dtype=np.float64)
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.cluster_std <= 0:
            raise ValueError("cluster_std must be positive")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")
        if self.cluster_means.shape != (self.n_classes, self.dim):
            raise ValueError(
                f"cluster_means must have shape ({self.n_classes}, {self.dim}), "
                f"got {self.cluster_means.shape}"
            )


def _read_be_u32(buf: bytes, offset: int, path: Path) -> int:
    if offset + 4 > len(buf):
        raise DataLengthError(f"{path}: truncated header")
    return struct.unpack_from(">I", buf, offset)[0]


def _read_bytes(path: Path) -> bytes:
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def _parse_idx_images(path: Path) -> np.ndarray:
    buf = _read_bytes(path)
    if len(buf) < 4:
        raise DataLengthError(f"{path}: file too short for an IDX header")
    magic = _read_be_u32(buf, 0, path)
    if magic != IDX_IMAGE_MAGIC:
        raise DataFormatError(
            f"{path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x} for images"
        )
    n = _read_be_u32(buf, 4, path)
    rows = _read_be_u32(buf, 8, path)
    cols = _read_be_u32(buf, 12, path)
    expected = 16 + n * rows * cols
    if len(buf) != expected:
        raise DataLengthError(
            f"{path}: expected {expected} bytes for {n} images of {rows}x{cols}, "
            f"got {len(buf)}"
        )
    pixels = np.frombuffer(buf, dtype=np.uint8, offset=16)
    return pixels.reshape(n, rows * cols).astype(np.float64) / 255.0


def _parse_idx_labels(path: Path) -> np.ndarray:
    buf = _read_bytes(path)
    if len(buf) < 4:
        raise DataLengthError(f"{path}: file too short for an IDX header")
    magic = _read_be_u32(buf, 0, path)
    if magic != IDX_LABEL_MAGIC:
        raise DataFormatError(
            f"{path}: bad magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x} for labels"
        )
    n = _read_be_u32(buf, 4, path)
    if len(buf) != 8 + n:
        raise DataLengthError(f"{path}: expected {8 + n} bytes for {n} labels, got {len(buf)}")
    return np.frombuffer(buf, dtype=np.uint8, offset=8).astype(np.int64)


def load_idx_pair(
    images_path: str | Path,
    labels_path: str | Path,
    split: str = "train",
    source: str = "mnist",
) -> LabeledDataset:
    """Load an IDX image/label file pair (MNIST and Fashion-MNIST layout).

    Files with a .gz suffix are decompressed transparently.
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    X = _parse_idx_images(images_path)
    y = _parse_idx_labels(labels_path)
    if len(X) != len(y):
        raise DataConsistencyError(
            f"image count {len(X)} ({images_path}) != label count {len(y)} ({labels_path})"
        )
    return LabeledDataset(X, y, split=split, source=source)


def write_idx_pair(
    ds: LabeledDataset,
    images_path: str | Path,
    labels_path: str | Path,
    rows: int | None = None,
    cols: int | None = None,
) -> None:
    """Write a dataset as an IDX pair. Features are quantized to bytes
    (round(x * 255)); a load -> write -> load round-trip is lossless."""
    if rows is None or cols is None:
        rows, cols = ds.dim, 1
    if rows * cols != ds.dim:
        raise ValueError(f"rows*cols = {rows * cols} does not match dim {ds.dim}")
    pixels = np.clip(np.rint(ds.X * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, len(ds), rows, cols))
        f.write(pixels.tobytes())
    labels = ds.y.astype(np.uint8)
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, len(ds)))
        f.write(labels.tobytes())


def load_cifar10(batch_paths: Sequence[str | Path], split: str = "train") -> LabeledDataset:
    """Load and concatenate CIFAR-10 binary batch files (3073-byte records)."""
    xs, ys = [], []
    for p in batch_paths:
        p = Path(p)
        buf = p.read_bytes()
        if len(buf) == 0 or len(buf) % CIFAR_RECORD_BYTES != 0:
            raise DataFormatError(
                f"{p}: size {len(buf)} is not a positive multiple of {CIFAR_RECORD_BYTES}"
            )
        records = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        labels = records[:, 0].astype(np.int64)
        if labels.max() >= CIFAR_NUM_CLASSES:
            raise ValueError(
                f"{p}: label {labels.max()} out of range [0, {CIFAR_NUM_CLASSES})"
            )
        xs.append(records[:, 1:].astype(np.float64) / 255.0)
        ys.append(labels)
    if not xs:
        raise ValueError("no batch files given")
    return LabeledDataset(np.concatenate(xs), np.concatenate(ys), split=split, source="cifar10")


def write_cifar10(ds: LabeledDataset, path: str | Path) -> None:
    """Write a dataset as one CIFAR-10 binary batch (requires 3072-dim rows)."""
    if ds.dim != CIFAR_PIXEL_BYTES:
        raise ValueError(f"CIFAR-10 records need {CIFAR_PIXEL_BYTES} pixels, got dim {ds.dim}")
    if len(ds) and ds.y.max() >= CIFAR_NUM_CLASSES:
        raise ValueError("labels out of CIFAR-10 range")
    pixels = np.clip(np.rint(ds.X * 255.0), 0, 255).astype(np.uint8)
    records = np.empty((len(ds), CIFAR_RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = ds.y.astype(np.uint8)
    records[:, 1:] = pixels
    Path(path).write_bytes(records.tobytes())


def make_synthetic(spec: SyntheticSpec) -> tuple[LabeledDataset, LabeledDataset]:
    """Sample isotropic Gaussian clusters and split 80/20 per class.

    Pure function of the spec: the same spec always yields bit-identical
    datasets.
    """
    rng = np.random.default_rng(spec.seed)
    n_train = int(0.8 * spec.samples_per_class)
    xs_tr, ys_tr, xs_te, ys_te = [], [], [], []
    for c in range(spec.n_classes):
        pts = spec.cluster_means[c] + spec.cluster_std * rng.standard_normal(
            (spec.samples_per_class, spec.dim)
        )
        xs_tr.append(pts[:n_train])
        ys_tr.append(np.full(n_train, c))
        xs_te.append(pts[n_train:])
        ys_te.append(np.full(spec.samples_per_class - n_train, c))
    train = LabeledDataset(np.concatenate(xs_tr), np.concatenate(ys_tr), split="train")
    test = LabeledDataset(np.concatenate(xs_te), np.concatenate(ys_te), split="test")
    return train, test


def orthogonal_cluster_means(n_classes: int, dim: int, radius: float, seed: int = 0) -> np.ndarray:
    """Mutually orthogonal cluster means of equal norm ``radius``.

    Pairwise distance is radius * sqrt(2), so choosing
    radius = separation * std / sqrt(2) realizes an exact cluster separation
    in units of the cluster standard deviation. Requires dim >= n_classes.
    """
    if dim < n_classes:
        raise ValueError(f"dim {dim} < n_classes {n_classes}: cannot be orthogonal")
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((dim, n_classes))
    q, _ = np.linalg.qr(a)
    return radius * q.T[:n_classes]


def subset_classes(
    ds: LabeledDataset, classes: Sequence[int], relabel: bool = False
) -> LabeledDataset:
    """Keep only samples of the requested classes, in stable order.

    With ``relabel`` the ids are remapped to 0..len(classes)-1 following the
    order given.
    """
    classes = list(classes)
    present = set(ds.y.tolist())
    missing = [c for c in classes if c not in present]
    if missing:
        raise ValueError(f"classes {missing} not present in dataset")
    mask = np.isin(ds.y, classes)
    X, y = ds.X[mask], ds.y[mask]
    if relabel:
        mapping = {orig: new for new, orig in enumerate(classes)}
        y = np.array([mapping[v] for v in y.tolist()], dtype=np.int64)
    return LabeledDataset(X, y, split=ds.split, source=ds.source)


def choose_id_classes(n_total: int, n_id: int, seed: int) -> tuple[list[int], list[int]]:
    """Seeded shuffle of range(n_total); first ``n_id`` become the ID set,
    the rest the OOD stream order."""
    if not 0 < n_id <= n_total:
        raise ValueError(f"n_id must be in (0, {n_total}], got {n_id}")
    order = np.random.default_rng(seed).permutation(n_total).tolist()
    return order[:n_id], order[n_id:]


def by_class(ds: LabeledDataset) -> dict[int, np.ndarray]:
    """Per-class views of the feature matrix, keyed by class id."""
    return {int(c): ds.X[ds.y == c] for c in ds.classes()}
