"""Datasets and client partitions.

Includes a Gaussian-blob generator, an IDX (MNIST-style) reader, and IID or
label-sorted shard partitioners.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .learner import Batch

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Raised for malformed IDX files; the message names the offending file."""


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        x = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels, dtype=np.int64).ravel()
        if x.ndim != 2 or x.shape[0] != y.shape[0]:
            raise ValueError(f"features {x.shape} do not match {y.shape[0]} labels")
        if y.size == 0:
            raise ValueError("dataset is empty")
        if y.min() < 0 or y.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def batch(self, idx=None) -> Batch:
        if idx is None:
            return Batch(self.features, self.labels)
        idx = np.asarray(idx, dtype=np.int64)
        return Batch(self.features[idx], self.labels[idx])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)


# client_id -> sorted row indices
Partition = dict[int, np.ndarray]


def generate_synthetic(num_classes: int, dim: int, per_class: int, spread: float = 1.0, seed: int = 0) -> Dataset:
    """Gaussian blobs: class means ~ N(0, I), covariance ``spread**2 * I``.

    Rows are ordered class by class.
    """
    if num_classes < 2 or dim < 1 or per_class < 1:
        raise ValueError("need num_classes >= 2, dim >= 1 and per_class >= 1")
    if spread < 0:
        raise ValueError("spread must be non-negative")
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(num_classes, dim))
    noise = rng.normal(size=(num_classes, per_class, dim))
    x = (means[:, None, :] + spread * noise).reshape(-1, dim)
    y = np.repeat(np.arange(num_classes), per_class)
    return Dataset(x, y, num_classes)


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise IdxFormatError(f"{path}: cannot read ({exc})") from exc


def _parse_idx(path, magic: int, ndims: int) -> np.ndarray:
    raw = _read_bytes(path)
    header = 4 + 4 * ndims
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    found, *dims = struct.unpack(">" + "I" * (1 + ndims), raw[:header])
    if found != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    expected = int(np.prod(dims))
    body = raw[header:]
    if len(body) != expected:
        raise IdxFormatError(f"{path}: expected {expected} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair; pixels scaled to [0, 1], images flattened row-major."""
    images = _parse_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _parse_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"{labels_path}: {labels.shape[0]} labels but {images_path} holds {images.shape[0]} images"
        )
    if images.shape[0] == 0:
        raise IdxFormatError(f"{images_path}: no images")
    x = images.reshape(images.shape[0], -1).astype(float) / 255.0
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    return Dataset(x, labels.astype(np.int64), max(k, 2))


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 ``images`` (n, rows, cols) and ``labels`` (n,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, r, c = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, r, c) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())


def train_test_split(dataset: Dataset, test_fraction: float = 0.2, seed: int = 0) -> tuple[Dataset, Dataset]:
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    perm = np.random.default_rng(seed).permutation(len(dataset))
    n_test = max(1, int(round(test_fraction * len(dataset))))
    if n_test >= len(dataset):
        raise ValueError("dataset too small to split")
    return dataset.subset(np.sort(perm[n_test:])), dataset.subset(np.sort(perm[:n_test]))


def partition_iid(dataset: Dataset, num_clients: int, seed: int = 0) -> Partition:
    if not 1 <= num_clients <= len(dataset):
        raise ValueError(f"num_clients must lie in [1, {len(dataset)}], got {num_clients}")
    perm = np.random.default_rng(seed).permutation(len(dataset))
    return {cid: np.sort(chunk) for cid, chunk in enumerate(np.array_split(perm, num_clients))}


def partition_shards(dataset: Dataset, num_clients: int, shards_per_client: int = 2, seed: int = 0) -> Partition:
    """Label-sorted shard split.

    Rows are stably sorted by label and cut into ``num_clients * shards_per_client``
    equal shards; trailing rows that do not fill a shard are dropped. Each
    client receives ``shards_per_client`` shards drawn without replacement.
    """
    if num_clients < 1 or shards_per_client < 1:
        raise ValueError("num_clients and shards_per_client must be positive")
    total = num_clients * shards_per_client
    size = len(dataset) // total
    if size == 0:
        raise ValueError(f"{len(dataset)} rows cannot fill {total} shards")
    order = np.argsort(dataset.labels, kind="stable")[: total * size]
    shards = order.reshape(total, size)
    assignment = np.random.default_rng(seed).permutation(total)
    return {
        cid: np.sort(shards[assignment[cid * shards_per_client : (cid + 1) * shards_per_client]].ravel())
        for cid in range(num_clients)
    }


def client_weights(partition: Partition) -> dict[int, float]:
    """Data-share weights ``|D_i| / |D|``."""
    if not partition:
        raise ValueError("partition is empty")
    total = sum(len(idx) for idx in partition.values())
    if total == 0:
        raise ValueError("partition holds no rows")
    return {cid: len(idx) / total for cid, idx in partition.items()}


def split_holdout(partition: Partition, fraction: float = 0.2, seed: int = 0) -> tuple[Partition, Partition]:
    """Split each client's rows into a training part and a held-out slice."""
    train, held = {}, {}
    for cid, idx in partition.items():
        perm = np.random.default_rng([seed, cid]).permutation(idx)
        n_held = int(round(fraction * len(idx))) if len(idx) > 1 else 0
        held[cid] = np.sort(perm[:n_held])
        train[cid] = np.sort(perm[n_held:])
    return train, held
