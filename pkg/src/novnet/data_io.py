"""Dataset loading (IDX, CSV), synthetic Gaussian clusters, and the
known/novel + train/test split protocol.

Datasets are immutable value objects: a list of (tensor, label) samples,
an ordered list of class names, and a provenance string. Labels are always
dense in [0, n_classes) and every class is non-empty.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigError,
    ConsistencyError,
    CorruptionError,
    DatasetError,
    FormatError,
    ParseError,
    ProtocolError,
)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    samples: list[tuple[np.ndarray, int]]
    class_names: list[str]
    provenance: str = ""

    def __post_init__(self):
        if not self.samples:
            raise DatasetError(f"dataset {self.provenance!r} has no samples")
        n_classes = len(self.class_names)
        seen = set()
        shape = self.samples[0][0].shape
        for x, y in self.samples:
            if x.shape != shape:
                raise DatasetError(f"sample shapes differ: {x.shape} vs {shape}")
            if not 0 <= y < n_classes:
                raise DatasetError(f"label {y} outside [0, {n_classes})")
            seen.add(y)
        if seen != set(range(n_classes)):
            missing = sorted(set(range(n_classes)) - seen)
            raise DatasetError(f"classes {missing} have no samples")

    def __len__(self):
        return len(self.samples)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.samples[0][0].shape)

    def features(self) -> np.ndarray:
        """All sample tensors stacked into one [n, ...] array."""
        return np.stack([x for x, _ in self.samples])

    def labels(self) -> np.ndarray:
        return np.asarray([y for _, y in self.samples], dtype=np.int64)

    def class_indices(self, label: int) -> list[int]:
        return [i for i, (_, y) in enumerate(self.samples) if y == label]


@dataclass(frozen=True)
class SplitSpec:
    """Known/novel and train/test split parameters (alphabetical protocol)."""

    known_fraction: float = 0.5
    train_fraction: float = 0.5
    seed: int = 0
    ordering: str = "alphabetical"

    def __post_init__(self):
        if not 0.0 < self.known_fraction < 1.0:
            raise ConfigError(f"known_fraction must be in (0, 1), got {self.known_fraction}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must be in (0, 1), got {self.train_fraction}")
        if self.ordering != "alphabetical":
            raise ConfigError(f"unsupported class ordering: {self.ordering!r}")


@dataclass(frozen=True)
class ClusterSpec:
    mean: tuple[float, ...]
    stddev: float
    count: int
    role: str  # known | novel | reference

    def __post_init__(self):
        if self.stddev <= 0:
            raise ConfigError(f"cluster stddev must be positive, got {self.stddev}")
        if self.count < 1:
            raise ConfigError(f"cluster sample count must be >= 1, got {self.count}")
        if self.role not in ("known", "novel", "reference"):
            raise ConfigError(f"unknown cluster role: {self.role!r}")


@dataclass(frozen=True)
class SyntheticSpec:
    dimension: int
    clusters: tuple[ClusterSpec, ...]
    seed: int = 0

    def __post_init__(self):
        if self.dimension < 1:
            raise ConfigError(f"dimension must be >= 1, got {self.dimension}")
        for c in self.clusters:
            if len(c.mean) != self.dimension:
                raise ConfigError(f"cluster mean has {len(c.mean)} coords, expected {self.dimension}")
        roles = [c.role for c in self.clusters]
        if roles.count("known") < 2 or roles.count("novel") < 1:
            raise ConfigError("a novelty experiment needs >= 2 known clusters and >= 1 novel cluster")


def load_idx(images_path, labels_path) -> Dataset:
    """Read a big-endian IDX image/label file pair.

    Pixels are scaled to [0, 1] float64; each sample has shape [1, r, c].
    Label values are remapped to dense indices in sorted order; the class
    names are the original label values as strings.
    """
    with open(images_path, "rb") as fh:
        header = fh.read(16)
        if len(header) < 16:
            raise CorruptionError(f"{images_path}: truncated IDX image header")
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGE_MAGIC:
            raise FormatError(f"{images_path}: bad IDX image magic 0x{magic:08x}")
        payload = fh.read(count * rows * cols)
        if len(payload) < count * rows * cols:
            raise CorruptionError(f"{images_path}: truncated IDX image payload")
    with open(labels_path, "rb") as fh:
        header = fh.read(8)
        if len(header) < 8:
            raise CorruptionError(f"{labels_path}: truncated IDX label header")
        magic, label_count = struct.unpack(">II", header)
        if magic != IDX_LABEL_MAGIC:
            raise FormatError(f"{labels_path}: bad IDX label magic 0x{magic:08x}")
        label_bytes = fh.read(label_count)
        if len(label_bytes) < label_count:
            raise CorruptionError(f"{labels_path}: truncated IDX label payload")
    if count != label_count:
        raise ConsistencyError(f"image count {count} != label count {label_count}")

    images = np.frombuffer(payload, dtype=np.uint8).reshape(count, 1, rows, cols)
    images = images.astype(np.float64) / 255.0
    raw_labels = np.frombuffer(label_bytes, dtype=np.uint8)
    values = sorted(set(int(v) for v in raw_labels))
    remap = {v: i for i, v in enumerate(values)}
    samples = [(images[i], remap[int(raw_labels[i])]) for i in range(count)]
    return Dataset(samples, [str(v) for v in values], provenance=str(images_path))


def load_csv(path) -> Dataset:
    """Read a `label,f0,f1,...` CSV into a dataset of flat feature tensors.

    Label strings become dense indices in lexicographically sorted order.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        if not header or header[0] != "label":
            raise FormatError(f"{path}: first header column must be 'label', got {header[:1]}")
        width = len(header) - 1
        if width < 1:
            raise FormatError(f"{path}: no feature columns in header")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != width + 1:
                raise FormatError(f"{path}:{lineno}: expected {width + 1} cells, got {len(row)}")
            try:
                values = np.asarray([float(cell) for cell in row[1:]], dtype=np.float64)
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            rows.append((row[0], values))
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    names = sorted(set(name for name, _ in rows))
    remap = {name: i for i, name in enumerate(names)}
    samples = [(values, remap[name]) for name, values in rows]
    return Dataset(samples, names, provenance=str(path))


def save_csv(dataset: Dataset, path) -> None:
    """Write a dataset of rank-1 samples as `label,f0,...` with full-precision
    decimal floats (repr round-trips every float64 exactly)."""
    if len(dataset.sample_shape) != 1:
        raise DatasetError(f"CSV datasets must hold flat tensors, got shape {dataset.sample_shape}")
    width = dataset.sample_shape[0]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"f{i}" for i in range(width)])
        for x, y in dataset.samples:
            writer.writerow([dataset.class_names[y]] + [repr(float(v)) for v in x])


def synth_gaussian(spec: SyntheticSpec) -> tuple[Dataset, Dataset, "Dataset | None"]:
    """Draw isotropic Gaussian clusters and route them to the (known,
    novel, reference) datasets by role. Deterministic given spec.seed.
    The reference slot is None when the spec has no reference clusters."""
    rng = np.random.default_rng(spec.seed)
    buckets: dict[str, list] = {"known": [], "novel": [], "reference": []}
    names: dict[str, list[str]] = {"known": [], "novel": [], "reference": []}
    prefix = {"known": "known", "novel": "novel", "reference": "ref"}
    for cluster in spec.clusters:
        mean = np.asarray(cluster.mean, dtype=np.float64)
        points = mean + cluster.stddev * rng.standard_normal((cluster.count, spec.dimension))
        label = len(names[cluster.role])
        names[cluster.role].append(f"{prefix[cluster.role]}_{label}")
        buckets[cluster.role].extend((points[i], label) for i in range(cluster.count))
    out = []
    for role in ("known", "novel", "reference"):
        out.append(Dataset(buckets[role], names[role], provenance=f"synthetic:{role}:seed={spec.seed}")
                   if buckets[role] else None)
    known, novel, reference = out
    return known, novel, reference


def split_known_novel(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Alphabetical class split: the first floor(known_fraction * K)
    class names become the known set, the rest the novel set. Labels are
    re-densified within each side."""
    if dataset.n_classes < 2:
        raise ProtocolError("known/novel split needs at least 2 classes")
    ordered = sorted(dataset.class_names)
    n_known = int(spec.known_fraction * len(ordered))
    if n_known < 1 or n_known >= len(ordered):
        raise ProtocolError(
            f"known_fraction {spec.known_fraction} leaves {n_known} known of {len(ordered)} classes"
        )
    known_names = ordered[:n_known]
    novel_names = ordered[n_known:]
    return (_subset_by_names(dataset, known_names, "known"),
            _subset_by_names(dataset, novel_names, "novel"))


def _subset_by_names(dataset: Dataset, names: list[str], tag: str) -> Dataset:
    remap = {dataset.class_names.index(name): i for i, name in enumerate(names)}
    samples = [(x, remap[y]) for x, y in dataset.samples if y in remap]
    return Dataset(samples, list(names), provenance=f"{dataset.provenance}#{tag}")


def split_train_test(dataset: Dataset, seed: int, train_fraction: float = 0.5) -> tuple[Dataset, Dataset]:
    """Per-class random split; odd counts give the extra sample to train.

    Every class must have at least 2 samples so both halves contain every
    class. Deterministic given seed.
    """
    rng = np.random.default_rng(seed)
    train_idx: list[int] = []
    test_idx: list[int] = []
    for label in range(dataset.n_classes):
        idx = dataset.class_indices(label)
        if len(idx) < 2:
            raise ProtocolError(f"class {dataset.class_names[label]!r} has {len(idx)} sample(s); needs >= 2")
        order = rng.permutation(len(idx))
        n_train = int(np.ceil(train_fraction * len(idx)))
        n_train = min(max(n_train, 1), len(idx) - 1)
        train_idx.extend(idx[i] for i in order[:n_train])
        test_idx.extend(idx[i] for i in order[n_train:])
    train_idx.sort()
    test_idx.sort()
    return (
        Dataset([dataset.samples[i] for i in train_idx], list(dataset.class_names),
                provenance=f"{dataset.provenance}#train"),
        Dataset([dataset.samples[i] for i in test_idx], list(dataset.class_names),
                provenance=f"{dataset.provenance}#test"),
    )
