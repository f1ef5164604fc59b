"""Built-in classifier: a small fully-connected network trained with
minibatch SGD, early-stopped against a held-out development split.

Two heads are supported.  The flat head is a softmax over class logits and
produces proper probability vectors.  The hierarchical head is one sigmoid
output per label-tree node, trained as independent 1-vs-all classifiers
with binary cross-entropy; loss terms of nodes whose label state is
"not applicable" are multiplied by zero, so those neurons receive no
gradient at all.  Hidden layers use tanh, which keeps the whole network
smooth (gradients verify against finite differences everywhere) and trains
reliably at the small scales this package targets.

Training is bit-reproducible: one seeded generator drives initialization,
the development split and the minibatch shuffles, in that order.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit, logsumexp

from .core import (
    Dataset,
    LabelTree,
    TrainingError,
    build_confusion_matrix,
    hier_state_matrix,
)
from .data import stratified_indices

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class FlatHead:
    class_count: int


@dataclass(frozen=True)
class HierarchicalHead:
    tree: LabelTree

    @property
    def class_count(self) -> int:
        return self.tree.total_nodes


@dataclass(frozen=True)
class ClassifierSpec:
    """Architecture and optimization settings for the built-in network."""

    hidden_layers: tuple[int, ...]
    head: FlatHead | HierarchicalHead
    learning_rate: float = 0.1
    batch_size: int = 32
    dropout_rate: float = 0.0
    max_epochs: int = 1000
    early_stop_patience: int = 200
    dev_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(w) for w in self.hidden_layers))
        if not self.hidden_layers or any(w <= 0 for w in self.hidden_layers):
            raise ValueError("hidden_layers must be a non-empty tuple of positive widths")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("learning_rate must be positive and batch_size >= 1")
        if self.max_epochs < 1 or self.early_stop_patience < 1:
            raise ValueError("max_epochs and early_stop_patience must be >= 1")
        if not 0.0 < self.dev_fraction < 1.0:
            raise ValueError("dev_fraction must be in (0, 1)")


class Capacity(str, enum.Enum):
    MIN = "min"
    MED = "med"
    MAX = "max"


# Presets of strictly increasing parameter count.
CAPACITY_LAYERS = {
    Capacity.MIN: (32,),
    Capacity.MED: (128, 64),
    Capacity.MAX: (256, 128, 64),
}


def capacity_spec(capacity: Capacity, template: ClassifierSpec) -> ClassifierSpec:
    """The template spec with its hidden layers swapped for a preset tier."""
    return replace(template, hidden_layers=CAPACITY_LAYERS[Capacity(capacity)])


@dataclass
class TrainedModel:
    """Frozen weights plus the spec used to produce them.

    Weights are those of the best development-accuracy epoch.  Instances
    are immutable by convention and safe to share across scoring workers.
    """

    spec: ClassifierSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    feature_dim: int
    dev_accuracy_best: float
    epochs_run: int = 0

    @property
    def embedding_dim(self) -> int:
        return self.spec.hidden_layers[-1]

    def parameter_count(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def _check_features(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim == 1:
            features = features[None, :]
        if features.shape[1] != self.feature_dim:
            raise ValueError(
                f"feature dim {features.shape[1]} != model dim {self.feature_dim}"
            )
        return features

    def predict_proba(self, features) -> np.ndarray:
        """Softmax class probabilities (flat head only), rows summing to 1."""
        if not isinstance(self.spec.head, FlatHead):
            raise ValueError("predict_proba requires a flat head; use predict_hier")
        z = _forward(self.weights, self.biases, self._check_features(features))
        return np.exp(z - logsumexp(z, axis=1, keepdims=True))

    def embed(self, features) -> np.ndarray:
        """Penultimate-layer activations with dropout disabled."""
        _, hidden, _ = _forward_cached(
            self.weights, self.biases, self._check_features(features)
        )
        return hidden[-1]

    def predict_hier(self, features) -> tuple[np.ndarray, np.ndarray]:
        """Per-node sigmoid activations and the decoded path per level.

        Activations are raw independent sigmoids; they are not a
        distribution and their sum routinely differs from one.  Decoding
        walks the tree: at each level only the children of the previously
        decoded node compete, highest activation wins.
        """
        if not isinstance(self.spec.head, HierarchicalHead):
            raise ValueError("predict_hier requires a hierarchical head")
        z = _forward(self.weights, self.biases, self._check_features(features))
        activations = expit(z)
        return activations, _decode_paths(self.spec.head.tree, activations)

    def predicted_classes(self, features) -> np.ndarray:
        """Argmax class for flat heads, decoded finest-level node otherwise."""
        if isinstance(self.spec.head, FlatHead):
            return np.argmax(self.predict_proba(features), axis=1)
        return self.predict_hier(features)[1][:, -1]

    def class_outputs(self, features) -> np.ndarray:
        """The vectors uncertainty strategies score: probabilities for a
        flat head, raw sigmoid activations for a hierarchical one."""
        if isinstance(self.spec.head, FlatHead):
            return self.predict_proba(features)
        return self.predict_hier(features)[0]


def _init_params(spec: ClassifierSpec, feature_dim: int, rng: np.random.Generator):
    widths = (feature_dim, *spec.hidden_layers, _output_width(spec.head))
    weights = [
        rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
        for fan_in, fan_out in zip(widths[:-1], widths[1:])
    ]
    biases = [np.zeros(fan_out) for fan_out in widths[1:]]
    return weights, biases


def _output_width(head) -> int:
    return head.class_count if isinstance(head, FlatHead) else head.tree.total_nodes


def _forward_cached(weights, biases, X, dropout_rate=0.0, rng=None):
    """Output pre-activations plus per-layer tanh activations and dropout
    masks (inverted scaling), as needed for backprop."""
    hidden: list[np.ndarray] = []
    masks: list[np.ndarray | None] = []
    a = X
    for W, b in zip(weights[:-1], biases[:-1]):
        a = np.tanh(a @ W + b)
        hidden.append(a)
        if dropout_rate > 0.0 and rng is not None:
            mask = (rng.random(a.shape) >= dropout_rate) / (1.0 - dropout_rate)
            a = a * mask
            masks.append(mask)
        else:
            masks.append(None)
    z = a @ weights[-1] + biases[-1]
    return z, hidden, masks


def _forward(weights, biases, X):
    z, _, _ = _forward_cached(weights, biases, X)
    return z


def _decode_paths(tree: LabelTree, activations: np.ndarray) -> np.ndarray:
    """Walk the tree level by level; only children of the decoded parent
    compete, highest activation wins (first index on exact ties)."""
    paths = np.zeros((len(activations), tree.num_levels), dtype=np.int64)
    paths[:, 0] = np.argmax(activations[:, tree.level_slice(0)], axis=1)
    for lvl in range(1, tree.num_levels):
        for node in range(tree.level_width(lvl - 1)):
            rows = np.flatnonzero(paths[:, lvl - 1] == node)
            if len(rows) == 0:
                continue
            kids = tree.children(lvl - 1, node)
            cols = [tree.flat_index(lvl, k) for k in kids]
            winner = np.argmax(activations[np.ix_(rows, cols)], axis=1)
            paths[rows, lvl] = np.asarray(kids)[winner]
    return paths


def _head_loss_grad(z, target, head):
    """Mean loss over the batch and its gradient w.r.t. the output
    pre-activations."""
    n = len(z)
    if isinstance(head, FlatHead):
        log_p = z - logsumexp(z, axis=1, keepdims=True)
        loss = -log_p[np.arange(n), target].mean()
        dz = np.exp(log_p)
        dz[np.arange(n), target] -= 1.0
        return loss, dz / n
    # Hierarchical: per-node binary cross-entropy from logits, with the
    # not-applicable nodes masked out by an exact multiplicative zero.
    mask = (target >= 0).astype(np.float64)
    t = np.clip(target, 0, 1).astype(np.float64)
    bce = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    loss = float((mask * bce).sum() / n)
    dz = mask * (expit(z) - t) / n
    return loss, dz


def _loss_and_grads(weights, biases, X, target, head, dropout_rate=0.0, rng=None):
    """Backprop through the whole stack; returns (loss, dWs, dbs)."""
    z, hidden, masks = _forward_cached(weights, biases, X, dropout_rate, rng)
    loss, dz = _head_loss_grad(z, target, head)

    d_weights = [None] * len(weights)
    d_biases = [None] * len(biases)
    inputs = [X] + [
        h if m is None else h * m for h, m in zip(hidden, masks)
    ]  # what each layer actually consumed
    grad = dz
    for layer in reversed(range(len(weights))):
        d_weights[layer] = inputs[layer].T @ grad
        d_biases[layer] = grad.sum(axis=0)
        if layer > 0:
            grad = grad @ weights[layer].T
            if masks[layer - 1] is not None:
                grad = grad * masks[layer - 1]
            grad = grad * (1.0 - hidden[layer - 1] ** 2)
    return loss, d_weights, d_biases


def _accuracy(weights, biases, X, target, head) -> float:
    z = _forward(weights, biases, X)
    if isinstance(head, FlatHead):
        return float(np.mean(np.argmax(z, axis=1) == target))
    # Full decoded path must match the label path.
    paths = _decode_paths(head.tree, expit(z))
    return float(np.mean(np.all(paths == target, axis=1)))


def _fit(features, labels, target, spec: ClassifierSpec) -> TrainedModel:
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("features must be 2-D")
    n = len(X)
    if n < 10:
        raise TrainingError(f"need at least 10 labelled samples, got {n}")

    rng = np.random.default_rng(spec.seed)
    weights, biases = _init_params(spec, X.shape[1], rng)

    strat_key = labels if labels.ndim == 1 else labels[:, -1]
    dev_idx = stratified_indices(strat_key, spec.dev_fraction,
                                 int(rng.integers(2**32)))
    if len(dev_idx) == 0:
        dev_idx = np.array([int(rng.integers(n))])
    train_mask = np.ones(n, dtype=bool)
    train_mask[dev_idx] = False
    train_idx = np.flatnonzero(train_mask)

    present = np.unique(strat_key[train_idx])
    for cls in np.unique(strat_key):
        if cls not in present:
            raise TrainingError(f"class {int(cls)} has no samples left after the dev split")

    X_train, X_dev = X[train_idx], X[dev_idx]
    t_train = target[train_idx]
    eval_dev = labels[dev_idx]

    best_acc = -1.0
    best = None
    since_best = 0
    epochs_run = 0
    for epoch in range(spec.max_epochs):
        order = rng.permutation(len(X_train))
        for start in range(0, len(order), spec.batch_size):
            batch = order[start : start + spec.batch_size]
            _, dW, db = _loss_and_grads(
                weights, biases, X_train[batch], t_train[batch], spec.head,
                spec.dropout_rate, rng,
            )
            for layer in range(len(weights)):
                weights[layer] -= spec.learning_rate * dW[layer]
                biases[layer] -= spec.learning_rate * db[layer]
        epochs_run = epoch + 1
        acc = _accuracy(weights, biases, X_dev, eval_dev, spec.head)
        if acc > best_acc:
            best_acc = acc
            best = ([w.copy() for w in weights], [b.copy() for b in biases])
            since_best = 0
        else:
            since_best += 1
            if since_best >= spec.early_stop_patience:
                break

    weights, biases = best
    return TrainedModel(
        spec=spec, weights=weights, biases=biases, feature_dim=X.shape[1],
        dev_accuracy_best=best_acc, epochs_run=epochs_run,
    )


def train(features, labels, spec: ClassifierSpec) -> TrainedModel:
    """Train a flat softmax classifier; returns best-dev-epoch weights."""
    if not isinstance(spec.head, FlatHead):
        raise ValueError("train() needs a FlatHead spec; see train_hierarchical")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise ValueError("flat labels must be 1-D class indices")
    if len(labels) and labels.max() >= spec.head.class_count:
        raise ValueError("label index outside the head's class range")
    return _fit(features, labels, labels, spec)


def train_hierarchical(features, label_paths, spec: ClassifierSpec) -> TrainedModel:
    """Train the 1-vs-all hierarchical head on per-level label paths."""
    if not isinstance(spec.head, HierarchicalHead):
        raise ValueError("train_hierarchical() needs a HierarchicalHead spec")
    tree = spec.head.tree
    label_paths = np.asarray(label_paths, dtype=np.int64)
    tree.validate_paths(label_paths)
    target = hier_state_matrix(tree, label_paths)
    return _fit(features, label_paths, target, spec)


def evaluate(model: TrainedModel, dataset: Dataset, ids=None) -> tuple[float, np.ndarray]:
    """Accuracy and confusion matrix of ``model`` on ``dataset``.

    For hierarchical models a sample counts as correct only if the whole
    decoded path matches; the confusion matrix is over finest-level nodes.
    """
    if ids is None:
        features, labels = dataset.features, dataset.labels
    else:
        ids = np.asarray(ids, dtype=np.int64)
        features, labels = dataset.features[ids], dataset.labels[ids]
    if len(features) == 0:
        raise ValueError("cannot evaluate on an empty dataset")

    if isinstance(model.spec.head, FlatHead):
        predicted = model.predicted_classes(features)
        accuracy = float(np.mean(predicted == labels))
        confusion = build_confusion_matrix(
            np.column_stack([labels, predicted]), model.spec.head.class_count
        )
    else:
        _, paths = model.predict_hier(features)
        accuracy = float(np.mean(np.all(paths == labels, axis=1)))
        leaves = model.spec.head.tree.level_width(model.spec.head.tree.num_levels - 1)
        confusion = build_confusion_matrix(
            np.column_stack([labels[:, -1], paths[:, -1]]), leaves
        )
    return accuracy, confusion


def _head_to_json(head) -> dict:
    if isinstance(head, FlatHead):
        return {"kind": "flat", "class_count": head.class_count}
    return {
        "kind": "hierarchical",
        "level_names": head.tree.level_names,
        "parents": head.tree.parents,
    }


def _head_from_json(doc: dict):
    if doc["kind"] == "flat":
        return FlatHead(int(doc["class_count"]))
    return HierarchicalHead(LabelTree(doc["level_names"], doc["parents"]))


def save_model(model: TrainedModel, path) -> None:
    """Persist a model checkpoint; round-trips bit-exactly via load_model."""
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "spec": {
            "hidden_layers": list(model.spec.hidden_layers),
            "head": _head_to_json(model.spec.head),
            "learning_rate": model.spec.learning_rate,
            "batch_size": model.spec.batch_size,
            "dropout_rate": model.spec.dropout_rate,
            "max_epochs": model.spec.max_epochs,
            "early_stop_patience": model.spec.early_stop_patience,
            "dev_fraction": model.spec.dev_fraction,
            "seed": model.spec.seed,
        },
        "feature_dim": model.feature_dim,
        "dev_accuracy_best": model.dev_accuracy_best,
        "epochs_run": model.epochs_run,
        "num_layers": len(model.weights),
    }
    arrays = {f"W{i}": w for i, w in enumerate(model.weights)}
    arrays.update({f"b{i}": b for i, b in enumerate(model.biases)})
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
                 **arrays)


def load_model(path) -> TrainedModel:
    archive = np.load(path, allow_pickle=False)
    meta = json.loads(bytes(archive["meta"]).decode())
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('format_version')}")
    spec_doc = dict(meta["spec"])
    spec_doc["head"] = _head_from_json(spec_doc["head"])
    spec_doc["hidden_layers"] = tuple(spec_doc["hidden_layers"])
    spec = ClassifierSpec(**spec_doc)
    layers = meta["num_layers"]
    return TrainedModel(
        spec=spec,
        weights=[archive[f"W{i}"] for i in range(layers)],
        biases=[archive[f"b{i}"] for i in range(layers)],
        feature_dim=int(meta["feature_dim"]),
        dev_accuracy_best=float(meta["dev_accuracy_best"]),
        epochs_run=int(meta["epochs_run"]),
    )
