"""Datasets, IDX ingestion and federated partitioning."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

from .errors import FormatError, InputError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray  # (n, *sample_shape), float64
    labels: np.ndarray  # (n,), int64
    classes: int

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise InputError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise InputError(f"labels must lie in [0, {self.classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> Dataset:
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[indices], self.labels[indices], self.classes)


def generate_synthetic(
    n_samples: int,
    n_features: int,
    classes: int,
    seed: int,
    spread: float = 1.0,
    separation: float = 3.0,
    clusters_per_class: int = 1,
    image_shape: tuple[int, ...] | None = None,
) -> Dataset:
    """Gaussian class clusters.

    Each class owns ``clusters_per_class`` centres drawn from N(0, separation^2 I);
    samples are centre + N(0, spread^2 I). Labels are assigned round-robin so
    class counts differ by at most one. A small ``spread`` relative to
    ``separation`` gives well separated classes; more clusters per class make
    the problem non-linear.
    """
    if min(n_samples, n_features, classes, clusters_per_class) < 1:
        raise InputError("n_samples, n_features, classes and clusters_per_class must be positive")
    if classes > n_samples:
        raise InputError(f"cannot draw {classes} classes from {n_samples} samples")
    rng = np.random.default_rng(seed)
    centres = rng.normal(0.0, separation, size=(classes, clusters_per_class, n_features))
    labels = rng.permutation(np.arange(n_samples) % classes)
    cluster = rng.integers(0, clusters_per_class, size=n_samples)
    inputs = centres[labels, cluster] + rng.normal(0.0, spread, size=(n_samples, n_features))
    if image_shape is not None:
        if int(np.prod(image_shape)) != n_features:
            raise InputError(f"image_shape {image_shape} does not hold {n_features} features")
        inputs = inputs.reshape((n_samples, *image_shape))
    return Dataset(inputs, labels.astype(np.int64), classes)


def export_csv(dataset: Dataset, path: str | Path) -> None:
    flat = dataset.inputs.reshape(len(dataset), -1)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(flat.shape[1])] + ["label"])
        for row, label in zip(flat, dataset.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


# ---------------------------------------------------------------------------
# IDX (MNIST family) files


def _read_idx(path: str | Path, expected_magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header", len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError(f"{path}: truncated dimension header", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    size = int(np.prod(dims))
    if len(raw) < header_end + size:
        raise FormatError(
            f"{path}: truncated payload, expected {size} bytes after header, found {len(raw) - header_end}",
            len(raw),
        )
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header_end).reshape(dims)


def load_idx(images_path: str | Path, labels_path: str | Path, classes: int | None = None) -> Dataset:
    """Load an MNIST-style image/label IDX pair as ``(n, 1, rows, cols)`` floats in [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels", 4)
    labels = labels.astype(np.int64)
    if classes is None:
        classes = int(labels.max()) + 1 if len(labels) else 1
    inputs = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(inputs, labels, classes)


def write_idx(path: str | Path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (used to fabricate fixtures)."""
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x00000800 | array.ndim)
    header += struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def export_digits_idx(directory: str | Path) -> tuple[Path, Path]:
    """Write scikit-learn's bundled 8x8 handwritten digits as an IDX pair.

    Pixel intensities 0..16 are rescaled to 0..255. Needs scikit-learn.
    """
    from sklearn.datasets import load_digits

    digits = load_digits()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    images = directory / "digits-images.idx3-ubyte"
    labels = directory / "digits-labels.idx1-ubyte"
    write_idx(images, np.rint(digits.images * (255.0 / 16.0)))
    write_idx(labels, digits.target)
    return images, labels


# ---------------------------------------------------------------------------
# Partitioning


@dataclass(frozen=True)
class PartitionPlan:
    scheme: Literal["iid", "skewed_niid"]
    num_clients: int
    train_fraction: float = 0.8
    classes_per_client: int = 5
    seed: int = 0
    max_retries: int = 100

    def __post_init__(self):
        if self.scheme not in ("iid", "skewed_niid"):
            raise InputError(f"unknown partition scheme {self.scheme!r}")
        if self.num_clients < 1:
            raise InputError("num_clients must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise InputError("train_fraction must lie in (0, 1)")
        if self.classes_per_client < 1:
            raise InputError("classes_per_client must be >= 1")


def _iid_owners(n: int, plan: PartitionPlan, rng: np.random.Generator) -> list[np.ndarray]:
    for _ in range(plan.max_retries):
        owner = rng.integers(0, plan.num_clients, size=n)
        groups = [np.flatnonzero(owner == k) for k in range(plan.num_clients)]
        if all(len(g) >= 2 for g in groups):
            return groups
    raise InputError(f"could not give every one of {plan.num_clients} clients two samples out of {n}")


def _skewed_owners(labels: np.ndarray, classes: int, plan: PartitionPlan, rng: np.random.Generator) -> list[np.ndarray]:
    per_client = min(plan.classes_per_client, classes)
    present = np.unique(labels)
    for _ in range(plan.max_retries):
        owned = [rng.choice(classes, size=per_client, replace=False) for _ in range(plan.num_clients)]
        owners_of = {c: [k for k in range(plan.num_clients) if c in owned[k]] for c in present}
        if any(not owners for owners in owners_of.values()):
            continue
        buckets: list[list[int]] = [[] for _ in range(plan.num_clients)]
        for c in present:
            members = rng.permutation(np.flatnonzero(labels == c))
            owners = rng.permutation(owners_of[c])
            # deal shuffled samples round-robin: equal shares (+-1), every owner gets one when possible
            for i, idx in enumerate(members):
                buckets[owners[i % len(owners)]].append(int(idx))
        groups = [np.sort(np.asarray(b, dtype=np.int64)) for b in buckets]
        if all(len(g) >= 2 for g in groups):
            return groups
    raise InputError(f"no class ownership covering every class within {plan.max_retries} draws")


def partition_indices(dataset: Dataset, plan: PartitionPlan) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-client ``(train_indices, test_indices)`` into ``dataset``; disjoint and exhaustive."""
    if len(dataset) == 0:
        raise InputError("cannot partition an empty dataset")
    rng = np.random.default_rng(plan.seed)
    if plan.scheme == "iid":
        groups = _iid_owners(len(dataset), plan, rng)
    else:
        groups = _skewed_owners(dataset.labels, dataset.classes, plan, rng)
    out = []
    for g in groups:
        g = rng.permutation(g)
        n_test = min(max(1, int(round((1.0 - plan.train_fraction) * len(g)))), len(g) - 1)
        out.append((np.sort(g[n_test:]), np.sort(g[:n_test])))
    return out


def partition(dataset: Dataset, plan: PartitionPlan) -> list[tuple[Dataset, Dataset]]:
    return [(dataset.subset(tr), dataset.subset(te)) for tr, te in partition_indices(dataset, plan)]


def label_entropy(dataset: Dataset) -> float:
    """Shannon entropy (nats) of the label histogram."""
    counts = np.bincount(dataset.labels, minlength=dataset.classes).astype(float)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())
