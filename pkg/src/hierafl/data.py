"""Datasets, loaders and device partitioners.

All randomness goes through ``numpy.random.default_rng`` seeded with an
integer or a tuple of integers, so every function here is a pure function of
its arguments.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels"
            )
        if self.labels.size == 0:
            raise ValueError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass
class PublicSplit:
    public: Dataset
    remainder: Dataset
    public_indices: np.ndarray
    remainder_indices: np.ndarray
    fraction: float = 0.01


@dataclass
class PartitionPlan:
    alpha: float | None  # None means IID
    num_devices: int
    seed: int
    assignment: list[np.ndarray] = field(default_factory=list)

    def sizes(self) -> list[int]:
        return [len(a) for a in self.assignment]

    def histograms(self, data: Dataset) -> np.ndarray:
        """(num_devices, num_classes) label counts per device."""
        return np.stack([np.bincount(data.labels[a], minlength=data.num_classes) for a in self.assignment])


# ---------------------------------------------------------------------------
# sources
# ---------------------------------------------------------------------------


def generate_synthetic(
    num_classes: int,
    dim: int,
    per_class: int,
    spread: float,
    seed: int,
    sample_stream: int = 0,
) -> Dataset:
    """Gaussian blobs around seeded random unit-norm class centers.

    Centers depend only on ``(seed, num_classes, dim)``; ``sample_stream``
    selects an independent draw of examples around the same centers, which
    is how train and test sets are produced.
    """
    if min(num_classes, dim, per_class) < 1 or spread < 0:
        raise ValueError("num_classes, dim and per_class must be positive and spread non-negative")
    centers = np.random.default_rng([seed, 0]).standard_normal((num_classes, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    noise = np.random.default_rng([seed, 1, sample_stream]).standard_normal((num_classes, per_class, dim))
    features = (centers[:, None, :] + spread * noise).reshape(-1, dim)
    labels = np.repeat(np.arange(num_classes), per_class)
    return Dataset(features, labels, num_classes)


def _read_idx(path: Path, magic: int, ndim: int) -> np.ndarray:
    blob = path.read_bytes()
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise ValueError(f"{path}: truncated header ({len(blob)} bytes, need {header} at offset 0)")
    (found,) = struct.unpack(">I", blob[:4])
    if found != magic:
        raise ValueError(f"{path}: magic 0x{found:08x} at offset 0, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    size = int(np.prod(dims))
    if len(blob) - header < size:
        raise ValueError(
            f"{path}: truncated payload at offset {len(blob)}, expected {size} bytes from offset {header}"
        )
    return np.frombuffer(blob, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path: str | Path, labels_path: str | Path, num_classes: int | None = None) -> Dataset:
    """Load MNIST-style IDX files; pixels are scaled to [0, 1] and flattened."""
    images = _read_idx(Path(images_path), IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(Path(labels_path), IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise ValueError(
            f"{images_path} holds {images.shape[0]} images but {labels_path} holds {labels.shape[0]} labels"
        )
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    classes = num_classes if num_classes is not None else int(labels.max()) + 1
    return Dataset(features, labels, classes)


def load_csv(path: str | Path, num_classes: int | None = None) -> Dataset:
    """Load a CSV with header ``label,f0,f1,...``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "label" or any(h != f"f{j}" for j, h in enumerate(header[1:])):
            raise ValueError(f"{path}: header must be 'label,f0,f1,...'")
        rows = [r for r in reader if r]
    table = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    labels = table[:, 0]
    if not np.all(labels == np.round(labels)):
        raise ValueError(f"{path}: labels must be integers")
    labels = labels.astype(np.int64)
    classes = num_classes if num_classes is not None else int(labels.max()) + 1
    return Dataset(table[:, 1:], labels, classes)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer allocation of ``total`` proportional to ``weights``; ties go to the lower index."""
    weights = np.asarray(weights, dtype=np.float64)
    if total == 0 or weights.sum() <= 0:
        return np.zeros(len(weights), dtype=np.int64)
    quota = weights / weights.sum() * total
    counts = np.floor(quota).astype(np.int64)
    short = total - int(counts.sum())
    order = np.argsort(-(quota - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def split_public(data: Dataset, fraction: float = 0.01, seed: int = 1234) -> PublicSplit:
    """Hold out a class-stratified public set of ``round(fraction * M)`` examples."""
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    M = len(data)
    n_public = _round_half_up(fraction * M)
    counts = data.class_counts()
    present = np.flatnonzero(counts)
    if n_public >= len(present):
        take = np.zeros_like(counts)
        take[present] = 1
        take += _largest_remainder(np.where(counts > 0, counts - 1, 0), n_public - len(present))
    else:
        take = _largest_remainder(counts, n_public)
    rng = np.random.default_rng([seed, 17])
    chosen = []
    for c in range(data.num_classes):
        members = np.flatnonzero(data.labels == c)
        if take[c]:
            chosen.append(rng.permutation(members)[: take[c]])
    public_idx = np.sort(np.concatenate(chosen)) if chosen else np.zeros(0, dtype=np.int64)
    mask = np.ones(M, dtype=bool)
    mask[public_idx] = False
    remainder_idx = np.flatnonzero(mask)
    return PublicSplit(
        public=data.subset(public_idx),
        remainder=data.subset(remainder_idx),
        public_indices=public_idx,
        remainder_indices=remainder_idx,
        fraction=fraction,
    )


def split_holdout(data: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified (train, test) split used when no separate test file is given."""
    split = split_public(data, fraction, seed)
    return split.remainder, split.public


def iid_partition(data: Dataset, num_devices: int, seed: int) -> PartitionPlan:
    M = len(data)
    if num_devices < 1:
        raise ValueError("num_devices must be >= 1")
    if num_devices > M:
        raise ValueError(f"cannot give {num_devices} devices at least one of {M} examples")
    order = np.random.default_rng([seed, 23]).permutation(M)
    base, extra = divmod(M, num_devices)
    sizes = [base + (1 if d < extra else 0) for d in range(num_devices)]
    bounds = np.cumsum([0, *sizes])
    assignment = [np.sort(order[bounds[d]:bounds[d + 1]]) for d in range(num_devices)]
    return PartitionPlan(alpha=None, num_devices=num_devices, seed=seed, assignment=assignment)


def dirichlet_partition(data: Dataset, num_devices: int, alpha: float, seed: int) -> PartitionPlan:
    """Per-class Dirichlet(alpha) split across devices.

    Each class's examples are shuffled and cut into contiguous chunks whose
    sizes follow a Dirichlet draw (largest-remainder rounding).  Any device
    left empty then receives one example moved from the currently largest
    device.
    """
    M = len(data)
    if num_devices < 1:
        raise ValueError("num_devices must be >= 1")
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if num_devices > M:
        raise ValueError(f"cannot give {num_devices} devices at least one of {M} examples")
    rng = np.random.default_rng([seed, 29])
    buckets: list[list[int]] = [[] for _ in range(num_devices)]
    for c in range(data.num_classes):
        members = np.flatnonzero(data.labels == c)
        # the draw happens even for empty classes so the stream stays aligned
        proportions = rng.dirichlet(np.full(num_devices, alpha))
        members = rng.permutation(members)
        counts = _largest_remainder(proportions, len(members))
        start = 0
        for d, n in enumerate(counts):
            buckets[d].extend(members[start:start + n].tolist())
            start += n
    for d in range(num_devices):
        if not buckets[d]:
            donor = max(range(num_devices), key=lambda k: (len(buckets[k]), -k))
            buckets[d].append(buckets[donor].pop())
    assignment = [np.array(sorted(b), dtype=np.int64) for b in buckets]
    return PartitionPlan(alpha=alpha, num_devices=num_devices, seed=seed, assignment=assignment)


def class_share_entropy(plan: PartitionPlan, data: Dataset) -> float:
    """Mean Shannon entropy (nats) of the per-device class distribution."""
    hist = plan.histograms(data).astype(np.float64)
    shares = hist / hist.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(shares > 0, -shares * np.log(shares), 0.0)
    return float(terms.sum(axis=1).mean())
