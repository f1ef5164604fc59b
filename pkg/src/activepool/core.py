"""Shared domain types: datasets, labelled/unlabelled pools, confusion
matrices and hierarchical label trees.

Sample identity is a plain non-negative integer indexing into a dataset's
feature matrix.  Ascending sample id is the global tie-break key for every
selection rule in this package, which keeps runs bit-reproducible under a
fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Node states of a hierarchical label vector.
POS = 1
NEG = 0
NA = -1


class ConfigError(ValueError):
    """Invalid experiment or strategy configuration."""


class DataFormatError(ValueError):
    """Malformed input file (bad magic number, ragged row, truncation...)."""


class TrainingError(RuntimeError):
    """Training could not proceed (e.g. a class vanished from the split)."""


@dataclass
class Dataset:
    """A dense feature matrix with one label per row.

    ``labels`` is a 1-D integer array of class indices for flat
    classification, or an ``(n, levels)`` integer array of per-level node
    indices when ``label_tree`` is set.  Features are float32 and are
    expected to be normalized to [0, 1] at ingestion.
    """

    name: str
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    label_tree: LabelTree | None = None
    label_names: list[str] | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        if len(self.labels) != len(self.features):
            raise ValueError(
                f"{len(self.features)} feature rows but {len(self.labels)} labels"
            )
        if self.class_count < 1:
            raise ValueError("class_count must be positive")
        if self.label_tree is None:
            if self.labels.ndim != 1:
                raise ValueError("flat labels must be a 1-D class index array")
            if len(self.labels) and (
                self.labels.min() < 0 or self.labels.max() >= self.class_count
            ):
                raise ValueError("label index outside [0, class_count)")
        else:
            self.label_tree.validate_paths(self.labels)

    def __len__(self) -> int:
        return len(self.features)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def flat_labels(self) -> np.ndarray:
        """Class indices used for stratification and confusion matrices.

        For hierarchical datasets this is the finest-level node index.
        """
        if self.labels.ndim == 1:
            return self.labels
        return self.labels[:, -1]


class Pool:
    """Partition of a dataset into a labelled and an unlabelled id set.

    The partition is only ever mutated through :meth:`acquire`, which moves
    ids from unlabelled to labelled and preserves the invariants: the two
    sets are disjoint and their union is constant.
    """

    def __init__(self, dataset: Dataset, labelled=()):
        self.dataset = dataset
        self.labelled: set[int] = set(int(i) for i in labelled)
        self.unlabelled: set[int] = set(range(len(dataset))) - self.labelled
        if len(self.labelled) + len(self.unlabelled) != len(dataset):
            raise ValueError("labelled ids outside the dataset")

    @property
    def size(self) -> int:
        return len(self.labelled) + len(self.unlabelled)

    def labelled_array(self) -> np.ndarray:
        return np.array(sorted(self.labelled), dtype=np.int64)

    def unlabelled_array(self) -> np.ndarray:
        return np.array(sorted(self.unlabelled), dtype=np.int64)

    def acquire(self, ids) -> None:
        """Move ``ids`` from the unlabelled to the labelled set."""
        ids = [int(i) for i in ids]
        bad = [i for i in ids if i not in self.unlabelled]
        if bad:
            raise ValueError(f"ids not in the unlabelled set: {bad[:5]}")
        self.unlabelled.difference_update(ids)
        self.labelled.update(ids)


def build_confusion_matrix(pairs, class_count: int) -> np.ndarray:
    """Count (true, predicted) pairs into a ``class_count x class_count`` matrix.

    Rows are true classes, columns predicted classes; this orientation is
    fixed so that per-class recall is ``counts[i, i] / counts[i].sum()``.
    """
    counts = np.zeros((class_count, class_count), dtype=np.int64)
    pairs = np.asarray(list(pairs) if not isinstance(pairs, np.ndarray) else pairs)
    if pairs.size == 0:
        return counts
    pairs = pairs.reshape(-1, 2).astype(np.int64)
    if pairs.min() < 0 or pairs.max() >= class_count:
        raise ValueError("class index out of range for confusion matrix")
    np.add.at(counts, (pairs[:, 0], pairs[:, 1]), 1)
    return counts


@dataclass
class LabelTree:
    """A per-level class hierarchy for 1-vs-all classifier heads.

    ``level_names[l]`` lists the node names of level ``l``; ``parents[l][j]``
    is the index (within level ``l - 1``) of node ``j``'s parent.  Level 0
    has no parents and ``parents[0]`` must be empty.  Every node owns a
    unique flat index (level by level, in declaration order) which is the
    classifier's output-neuron index for that node.
    """

    level_names: list[list[str]]
    parents: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.level_names or not self.level_names[0]:
            raise ValueError("label tree needs at least one non-empty level")
        if not self.parents:
            self.parents = [[]] + [[0] * len(lv) for lv in self.level_names[1:]]
        if len(self.parents) != len(self.level_names) or self.parents[0]:
            raise ValueError("parents must be empty for level 0 and given per level")
        for lvl in range(1, self.num_levels):
            if len(self.parents[lvl]) != len(self.level_names[lvl]):
                raise ValueError(f"level {lvl}: one parent per node required")
            width_above = len(self.level_names[lvl - 1])
            for p in self.parents[lvl]:
                if not 0 <= p < width_above:
                    raise ValueError(f"level {lvl}: parent index {p} out of range")
        self._offsets = np.cumsum([0] + [len(lv) for lv in self.level_names])

    @property
    def num_levels(self) -> int:
        return len(self.level_names)

    @property
    def total_nodes(self) -> int:
        return int(self._offsets[-1])

    def level_width(self, level: int) -> int:
        return len(self.level_names[level])

    def flat_index(self, level: int, node: int) -> int:
        if not 0 <= node < self.level_width(level):
            raise ValueError(f"node {node} out of range at level {level}")
        return int(self._offsets[level]) + node

    def level_slice(self, level: int) -> slice:
        return slice(int(self._offsets[level]), int(self._offsets[level + 1]))

    def children(self, level: int, node: int) -> list[int]:
        """Indices (within level + 1) of the children of ``node``."""
        if level + 1 >= self.num_levels:
            return []
        return [j for j, p in enumerate(self.parents[level + 1]) if p == node]

    def validate_paths(self, paths: np.ndarray) -> None:
        paths = np.asarray(paths)
        if paths.ndim != 2 or paths.shape[1] != self.num_levels:
            raise ValueError(
                f"label paths must be (n, {self.num_levels}), got {paths.shape}"
            )
        for lvl in range(self.num_levels):
            col = paths[:, lvl]
            if len(col) and (col.min() < 0 or col.max() >= self.level_width(lvl)):
                raise ValueError(f"node index out of range at level {lvl}")
            if lvl > 0:
                par = np.asarray(self.parents[lvl])[col]
                if np.any(par != paths[:, lvl - 1]):
                    raise ValueError("label path breaks the parent chain")

    def node_names(self, path) -> list[str]:
        return [self.level_names[l][int(j)] for l, j in enumerate(path)]


def derive_hier_label(tree: LabelTree, leaf_path) -> np.ndarray:
    """Expand a root-to-leaf path into per-node states over the whole tree.

    Nodes on the path are POS, their siblings (children of the same POS
    parent) are NEG, and every other node is NA.  NA nodes are the ones a
    hierarchical head must exclude from its loss.
    """
    leaf_path = [int(j) for j in leaf_path]
    if len(leaf_path) != tree.num_levels:
        raise ValueError(f"path length {len(leaf_path)} != {tree.num_levels} levels")
    states = np.full(tree.total_nodes, NA, dtype=np.int8)
    for lvl, node in enumerate(leaf_path):
        if not 0 <= node < tree.level_width(lvl):
            raise ValueError(f"node {node} out of range at level {lvl}")
        if lvl == 0:
            siblings = range(tree.level_width(0))
        else:
            if tree.parents[lvl][node] != leaf_path[lvl - 1]:
                raise ValueError("leaf path breaks the parent chain")
            siblings = tree.children(lvl - 1, leaf_path[lvl - 1])
        for j in siblings:
            states[tree.flat_index(lvl, j)] = NEG
        states[tree.flat_index(lvl, node)] = POS
    return states


def hier_state_matrix(tree: LabelTree, paths: np.ndarray) -> np.ndarray:
    """Stack :func:`derive_hier_label` over an ``(n, levels)`` path array."""
    paths = np.asarray(paths)
    return np.stack([derive_hier_label(tree, p) for p in paths])
