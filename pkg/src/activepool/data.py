"""Dataset ingestion and generation.

Loaders fail loudly on malformed input and normalize features to [0, 1] at
ingestion.  The synthetic generator produces Gaussian cluster mixtures with
a redundancy knob (several sampling modes per class), which stands in for
the large image datasets when exercising selection behaviour at desk scale.
"""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .core import ConfigError, DataFormatError, Dataset

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of a Gaussian cluster-mixture dataset.

    ``clusters_per_class`` is the redundancy knob: every cluster beyond the
    first duplicates the class as another tight mode, so large clusters
    yield many near-interchangeable samples.  ``class_separation`` is the
    minimum distance between class means; cluster centres of one class
    scatter around its mean at up to half that distance.
    """

    class_count: int
    clusters_per_class: int = 1
    samples_per_cluster: int = 100
    feature_dim: int = 2
    cluster_std: float = 1.0
    class_separation: float = 6.0
    seed: int = 0

    def __post_init__(self):
        if min(self.class_count, self.clusters_per_class,
               self.samples_per_cluster, self.feature_dim) < 1:
            raise ValueError("synthetic spec counts must all be positive")
        if self.cluster_std <= 0 or self.class_separation <= 0:
            raise ValueError("cluster_std and class_separation must be positive")


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Deterministically sample the mixture described by ``spec``."""
    rng = np.random.default_rng(spec.seed)
    means = rng.standard_normal((spec.class_count, spec.feature_dim))
    if spec.class_count > 1:
        diffs = means[:, None, :] - means[None, :, :]
        dists = np.linalg.norm(diffs, axis=-1)
        np.fill_diagonal(dists, np.inf)
        means *= spec.class_separation / dists.min()

    blocks = []
    labels = []
    for cls in range(spec.class_count):
        offsets = np.zeros((spec.clusters_per_class, spec.feature_dim))
        if spec.clusters_per_class > 1:
            directions = rng.standard_normal(offsets.shape)
            directions /= np.linalg.norm(directions, axis=1, keepdims=True)
            radii = rng.uniform(0.0, spec.class_separation / 2.0,
                                size=(spec.clusters_per_class, 1))
            offsets = directions * radii
        for k in range(spec.clusters_per_class):
            centre = means[cls] + offsets[k]
            blocks.append(centre + spec.cluster_std
                          * rng.standard_normal((spec.samples_per_cluster,
                                                 spec.feature_dim)))
            labels.extend([cls] * spec.samples_per_cluster)

    features = np.concatenate(blocks).astype(np.float32)
    lo = features.min(axis=0)
    span = np.maximum(features.max(axis=0) - lo, 1e-12)
    features = (features - lo) / span
    return Dataset(
        name=f"synthetic-c{spec.class_count}k{spec.clusters_per_class}",
        features=features,
        labels=np.asarray(labels, dtype=np.int64),
        class_count=spec.class_count,
    )


def _read_exact(fh, count: int, offset: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise DataFormatError(
            f"truncated IDX file: wanted {count} bytes for {what} at offset "
            f"{offset}, got {len(data)}"
        )
    return data


def _open_maybe_gzip(path):
    return gzip.open(path, "rb") if str(path).endswith(".gz") else open(path, "rb")


def _load_idx_array(path, expected_magic: int) -> np.ndarray:
    with _open_maybe_gzip(path) as fh:
        magic, = struct.unpack(">i", _read_exact(fh, 4, 0, "magic number"))
        if magic != expected_magic:
            raise DataFormatError(
                f"{path}: bad magic number 0x{magic:08x} at offset 0, "
                f"expected 0x{expected_magic:08x}"
            )
        ndim = magic & 0xFF
        dims = struct.unpack(
            f">{ndim}i", _read_exact(fh, 4 * ndim, 4, "dimension sizes")
        )
        count = int(np.prod(dims))
        raw = _read_exact(fh, count, 4 + 4 * ndim, f"{count} data bytes")
        if fh.read(1):
            raise DataFormatError(f"{path}: trailing bytes after {count} data bytes")
    return np.frombuffer(raw, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, name: str = "idx") -> Dataset:
    """Load an images/labels IDX file pair (gzip transparently accepted).

    Pixels are scaled to [0, 1] and images flattened row-major into the
    feature matrix.
    """
    images = _load_idx_array(images_path, IDX_IMAGES_MAGIC)
    labels = _load_idx_array(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise DataFormatError(
            f"count mismatch: {len(images)} images vs {len(labels)} labels"
        )
    features = images.reshape(len(images), -1).astype(np.float32) / 255.0
    return Dataset(
        name=name,
        features=features,
        labels=labels.astype(np.int64),
        class_count=int(labels.max()) + 1 if len(labels) else 1,
    )


def load_csv(path, label_column: str, name: str | None = None,
             normalize: bool = True) -> Dataset:
    """Load a rectangular numeric CSV with a header row.

    Features are the non-label columns in header order, min-max scaled to
    [0, 1] per feature unless ``normalize`` is off.  Labels are mapped to
    dense indices in order of first appearance; the mapping is kept on the
    dataset as ``label_names``.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        if label_column not in header:
            raise DataFormatError(f"{path}: no column named {label_column!r}")
        label_pos = header.index(label_column)

        feature_rows: list[list[float]] = []
        raw_labels: list[str] = []
        for row_num, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataFormatError(
                    f"{path}: row {row_num} has {len(row)} fields, expected "
                    f"{len(header)}"
                )
            raw_labels.append(row[label_pos])
            try:
                feature_rows.append(
                    [float(v) for i, v in enumerate(row) if i != label_pos]
                )
            except ValueError:
                raise DataFormatError(
                    f"{path}: non-numeric feature value in row {row_num}"
                ) from None
    if not feature_rows:
        raise DataFormatError(f"{path}: no data rows")

    label_names: list[str] = []
    index = {}
    labels = np.empty(len(raw_labels), dtype=np.int64)
    for i, value in enumerate(raw_labels):
        if value not in index:
            index[value] = len(label_names)
            label_names.append(value)
        labels[i] = index[value]

    features = np.asarray(feature_rows, dtype=np.float32)
    if normalize:
        lo = features.min(axis=0)
        span = np.maximum(features.max(axis=0) - lo, 1e-12)
        features = (features - lo) / span
    return Dataset(
        name=name or str(path),
        features=features,
        labels=labels,
        class_count=len(label_names),
        label_names=label_names,
    )


def stratified_indices(labels, fraction: float, seed: int) -> np.ndarray:
    """Seeded per-class draw of about ``fraction`` of the indices.

    Per-class counts are ``fraction * n_c`` rounded half-up, so they never
    deviate from exact proportionality by a full sample.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    chosen = []
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        take = int(np.floor(fraction * len(members) + 0.5))
        chosen.append(rng.choice(members, size=take, replace=False))
    return np.sort(np.concatenate(chosen)).astype(np.int64)


def stratified_split(dataset: Dataset, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Split dataset ids into two disjoint, exhaustive, class-balanced parts.

    Part a receives about ``fraction`` of every class; part b the rest.
    Ids come back sorted ascending and the split is a pure function of the
    seed.
    """
    labels = dataset.flat_labels()
    for cls in np.unique(labels):
        if np.sum(labels == cls) < 2:
            raise ValueError(f"class {int(cls)} has fewer than 2 samples; cannot split")
    part_a = stratified_indices(labels, fraction, seed)
    mask = np.ones(len(dataset), dtype=bool)
    mask[part_a] = False
    return part_a, np.flatnonzero(mask).astype(np.int64)


def initial_seed_set(dataset: Dataset, per_class: int, seed: int) -> np.ndarray:
    """Seeded uniform choice of exactly ``per_class`` ids per class."""
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    labels = dataset.flat_labels()
    rng = np.random.default_rng(seed)
    chosen = []
    for cls in range(dataset.class_count if dataset.label_tree is None
                     else dataset.label_tree.level_width(dataset.label_tree.num_levels - 1)):
        members = np.flatnonzero(labels == cls)
        if len(members) < per_class:
            raise ValueError(
                f"class {cls} has {len(members)} samples, {per_class} requested"
            )
        chosen.append(rng.choice(members, size=per_class, replace=False))
    return np.sort(np.concatenate(chosen)).astype(np.int64)


@dataclass(frozen=True)
class DatasetDescriptor:
    """Declarative pointer to a dataset: IDX file pair, CSV pair, or a
    synthetic spec.  ``resolve`` materializes (pool, test) datasets."""

    format: str  # "idx" | "csv" | "synthetic"
    name: str = ""
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    train_path: str | None = None
    test_path: str | None = None
    label_column: str | None = None
    synthetic: SyntheticSpec | None = None
    test_fraction: float = 0.2
    class_count: int | None = None

    def resolve(self) -> tuple[Dataset, Dataset]:
        if self.format == "idx":
            if not all([self.train_images, self.train_labels,
                        self.test_images, self.test_labels]):
                raise ConfigError("idx descriptor needs all four file paths")
            pool = load_idx(self.train_images, self.train_labels, self.name or "idx-train")
            test = load_idx(self.test_images, self.test_labels, self.name or "idx-test")
        elif self.format == "csv":
            if not all([self.train_path, self.test_path, self.label_column]):
                raise ConfigError("csv descriptor needs train/test paths and a label column")
            pool = load_csv(self.train_path, self.label_column, self.name)
            test = load_csv(self.test_path, self.label_column, self.name)
        elif self.format == "synthetic":
            if self.synthetic is None:
                raise ConfigError("synthetic descriptor needs generator parameters")
            full = generate_synthetic(self.synthetic)
            test_ids, pool_ids = stratified_split(
                full, self.test_fraction, self.synthetic.seed
            )
            pool = Dataset(full.name, full.features[pool_ids], full.labels[pool_ids],
                           full.class_count)
            test = Dataset(full.name + "-test", full.features[test_ids],
                           full.labels[test_ids], full.class_count)
        else:
            raise ConfigError(f"unknown dataset format {self.format!r}")
        if self.class_count is not None and pool.class_count != self.class_count:
            raise ConfigError(
                f"declared class_count {self.class_count} but data has "
                f"{pool.class_count}"
            )
        return pool, test
