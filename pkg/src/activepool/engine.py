"""Experiment engine: the batched acquisition loop and its harnesses.

One run seeds the labelled set with a stratified per-class draw, then
iterates train -> evaluate -> select -> acquire until the labelled set
reaches a fraction of the pool, the pool empties, or a quota strategy
signals termination.  Every random decision is derived from the config's
master seed by hashing a purpose tag, so the whole record stream is a pure
function of the config, and harnesses that must share draws (the same
initial labelled sets across sweep values or selector capacities) get that
sharing for free.

Harnesses on top of the single run: seeded repetitions with median/std
aggregation, label-noise injection, hyperparameter sweeps, and
cross-capacity training (retraining a different classifier on the exact
sample sets another one selected).
"""

from __future__ import annotations

import hashlib
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import strategies
from .classifier import (
    Capacity,
    ClassifierSpec,
    HierarchicalHead,
    TrainedModel,
    capacity_spec,
    evaluate,
    train,
    train_hierarchical,
)
from .core import ConfigError, Dataset, Pool
from .data import initial_seed_set
from .strategies import (
    NEEDS_CONFUSION,
    NEEDS_EMBEDDINGS,
    SelectionContext,
    StrategyKind,
    Terminate,
)

RECORD_SCHEMA_VERSION = 1

SWEEP_AXES = ("learning_rate", "batch_size", "dropout", "noise_rate")


def derive_seed(master_seed: int, *tags) -> int:
    """Stable 63-bit seed for a named purpose under a master seed.

    Hash-based, so seeds do not depend on the order in which the engine
    happens to ask for them.
    """
    digest = hashlib.sha256(repr((int(master_seed),) + tags).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass
class ExperimentConfig:
    """Everything a run depends on; runs are pure functions of this."""

    dataset: Dataset
    test_dataset: Dataset
    strategy: StrategyKind
    classifier_spec: ClassifierSpec
    strategy_params: dict = field(default_factory=dict)
    initial_per_class: int = 100
    growth_fraction: float = 0.20
    stop_fraction_of_pool: float = 1.0 / 3.0
    repetitions: int = 5
    label_noise_rate: float = 0.0
    master_seed: int = 0

    def validate(self) -> None:
        if self.growth_fraction <= 0:
            raise ConfigError("growth_fraction must be positive")
        if not 0 < self.stop_fraction_of_pool <= 1:
            raise ConfigError("stop_fraction_of_pool must be in (0, 1]")
        if self.initial_per_class < 1:
            raise ConfigError("initial_per_class must be >= 1")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if not 0 <= self.label_noise_rate < 1:
            raise ConfigError("label_noise_rate must be in [0, 1)")
        self.strategy = StrategyKind(self.strategy)
        if self.dataset.feature_dim != self.test_dataset.feature_dim:
            raise ConfigError("pool and test datasets disagree on feature dim")
        classes = class_count_of(self.dataset)
        if self.initial_per_class * classes > len(self.dataset):
            raise ConfigError(
                f"pool of {len(self.dataset)} cannot seed "
                f"{self.initial_per_class} samples for each of {classes} classes"
            )


def class_count_of(dataset: Dataset) -> int:
    if dataset.label_tree is None:
        return dataset.class_count
    return dataset.label_tree.level_width(dataset.label_tree.num_levels - 1)


@dataclass
class RunRecord:
    """One acquisition iteration: what was trained on and what it scored.

    ``selected_ids`` are the ids added to the labelled set *for* this
    iteration (the initial stratified draw at iteration 0, afterwards the
    batch the previous iteration's model queried), so the labelled set at
    iteration k is exactly the union of ``selected_ids`` of records 0..k.
    """

    iteration: int
    labelled_size: int
    test_accuracy: float
    dev_accuracy: float
    confusion: np.ndarray
    selected_ids: np.ndarray
    wall_time: float
    seed: int
    terminated: bool = False

    def to_json_dict(self, repetition: int | None = None) -> dict:
        doc = {
            "schema_version": RECORD_SCHEMA_VERSION,
            "iteration": self.iteration,
            "labelled_size": self.labelled_size,
            "test_accuracy": self.test_accuracy,
            "dev_accuracy": self.dev_accuracy,
            "confusion": np.asarray(self.confusion).tolist(),
            "selected_ids": np.asarray(self.selected_ids).tolist(),
            "wall_time": self.wall_time,
            "seed": self.seed,
            "terminated": self.terminated,
        }
        if repetition is not None:
            doc["repetition"] = repetition
        return doc


def inject_label_noise(labels: np.ndarray, rate: float, seed: int, *,
                       class_count: int | None = None, tree=None) -> np.ndarray:
    """Copy of ``labels`` with exactly round(rate * n) entries flipped.

    Each flipped label becomes a uniformly chosen *different* class.  For
    hierarchical path labels a different finest-level node is drawn and the
    whole path rewritten to its ancestors.  The input array is untouched;
    noise lives only in the returned view used for training.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError("noise rate must be in [0, 1)")
    labels = np.asarray(labels)
    noisy = labels.copy()
    n = len(labels)
    flip_count = int(math.floor(rate * n + 0.5))
    if flip_count == 0:
        return noisy
    rng = np.random.default_rng(seed)
    victims = rng.choice(n, size=flip_count, replace=False)

    if labels.ndim == 1:
        if class_count is None:
            raise ValueError("class_count is required for flat labels")
        # Uniform over the other C - 1 classes via a shifted draw.
        offsets = rng.integers(1, class_count, size=flip_count)
        noisy[victims] = (labels[victims] + offsets) % class_count
        return noisy

    if tree is None:
        raise ValueError("a label tree is required for path labels")
    leaves = tree.level_width(tree.num_levels - 1)
    offsets = rng.integers(1, leaves, size=flip_count)
    new_leaves = (labels[victims, -1] + offsets) % leaves
    for row, leaf in zip(victims, new_leaves):
        path = [int(leaf)]
        for lvl in range(tree.num_levels - 1, 0, -1):
            path.append(tree.parents[lvl][path[-1]])
        noisy[row] = path[::-1]
    return noisy


def _train_on(config: ExperimentConfig, ids: np.ndarray, labels_view: np.ndarray,
              seed: int) -> TrainedModel:
    spec = replace(config.classifier_spec, seed=seed)
    X = config.dataset.features[ids]
    y = labels_view[ids]
    if isinstance(spec.head, HierarchicalHead):
        return train_hierarchical(X, y, spec)
    return train(X, y, spec)


def _labelled_dataset_view(config: ExperimentConfig, labels_view: np.ndarray) -> Dataset:
    return Dataset(
        name=config.dataset.name + "-labelled",
        features=config.dataset.features,
        labels=labels_view,
        class_count=config.dataset.class_count,
        label_tree=config.dataset.label_tree,
    )


def _build_context(config: ExperimentConfig, model: TrainedModel, pool: Pool,
                   labels_view: np.ndarray, seed: int) -> SelectionContext:
    unlabelled = pool.unlabelled_array()
    X_u = config.dataset.features[unlabelled]
    probs = model.class_outputs(X_u)
    predicted = model.predicted_classes(X_u)

    embeddings = labelled_embeddings = None
    if config.strategy in NEEDS_EMBEDDINGS:
        embeddings = model.embed(X_u)
        labelled_embeddings = model.embed(config.dataset.features[pool.labelled_array()])

    confusion = None
    if config.strategy in NEEDS_CONFUSION:
        # The balancing signal is the model's confusion on its own current
        # training set (with whatever label noise that set carries).
        _, confusion = evaluate(model, _labelled_dataset_view(config, labels_view),
                                ids=pool.labelled_array())

    return SelectionContext(
        unlabelled_ids=unlabelled,
        probs=probs,
        predicted=predicted,
        embeddings=embeddings,
        labelled_embeddings=labelled_embeddings,
        confusion=confusion,
        rng_seed=seed,
    )


def run_active_learning(config: ExperimentConfig) -> list[RunRecord]:
    """Execute one full acquisition run; see the module docstring.

    Returns one record per iteration.  A quota-strategy termination marks
    the final record rather than raising.
    """
    config.validate()
    master = config.master_seed

    labels_view = config.dataset.labels
    if config.label_noise_rate > 0:
        labels_view = inject_label_noise(
            config.dataset.labels, config.label_noise_rate,
            derive_seed(master, "noise"),
            class_count=class_count_of(config.dataset),
            tree=config.dataset.label_tree,
        )

    initial = initial_seed_set(config.dataset, config.initial_per_class,
                               derive_seed(master, "init"))
    pool = Pool(config.dataset, initial)
    stop_size = config.stop_fraction_of_pool * pool.size

    records: list[RunRecord] = []
    added = initial
    iteration = 0
    while True:
        started = time.perf_counter()
        train_seed = derive_seed(master, "train", iteration)
        model = _train_on(config, pool.labelled_array(), labels_view, train_seed)
        test_accuracy, confusion = evaluate(model, config.test_dataset)
        records.append(RunRecord(
            iteration=iteration,
            labelled_size=len(pool.labelled),
            test_accuracy=test_accuracy,
            dev_accuracy=model.dev_accuracy_best,
            confusion=confusion,
            selected_ids=np.asarray(added, dtype=np.int64),
            wall_time=time.perf_counter() - started,
            seed=train_seed,
        ))

        if len(pool.labelled) >= stop_size or not pool.unlabelled:
            break
        batch_size = math.ceil(config.growth_fraction * len(pool.labelled))
        ctx = _build_context(config, model, pool, labels_view,
                             derive_seed(master, "select", iteration))
        try:
            batch = strategies.select(config.strategy, ctx, pool, batch_size,
                                      config.strategy_params)
        except Terminate:
            records[-1].terminated = True
            break
        if len(batch) == 0:
            break
        pool.acquire(batch.ids)
        added = batch.ids
        iteration += 1
    return records


@dataclass
class CurvePoint:
    """One aggregated point of an accuracy-over-labelled-size curve."""

    strategy: str
    iteration: int
    labelled_size: int
    accuracy_median: float
    accuracy_std: float
    repetitions: int


def _run_repetition(args) -> list[RunRecord]:
    config, rep = args
    rep_config = replace(config, master_seed=derive_seed(config.master_seed, "rep", rep))
    return run_active_learning(rep_config)


def run_repetitions(config: ExperimentConfig, jobs: int = 1) -> list[list[RunRecord]]:
    """All seeded repetitions of a config, optionally across processes.

    Repetition r runs with a master seed derived from (master_seed, r), so
    results do not depend on scheduling.
    """
    work = [(config, rep) for rep in range(config.repetitions)]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_repetition, work))
    return [_run_repetition(item) for item in work]


def aggregate_curves(runs: list[list[RunRecord]], strategy: str) -> list[CurvePoint]:
    """Median and standard deviation of test accuracy per aligned point.

    Points align on (iteration, labelled size); repetitions that terminated
    early simply stop contributing, and the point records how many remain.
    """
    by_point: dict[tuple[int, int], list[float]] = {}
    for records in runs:
        for rec in records:
            by_point.setdefault((rec.iteration, rec.labelled_size), []).append(
                rec.test_accuracy
            )
    return [
        CurvePoint(
            strategy=strategy,
            iteration=iteration,
            labelled_size=size,
            accuracy_median=float(np.median(accs)),
            accuracy_std=float(np.std(accs)),
            repetitions=len(accs),
        )
        for (iteration, size), accs in sorted(by_point.items())
    ]


def repeat_runs(config: ExperimentConfig, jobs: int = 1) -> list[CurvePoint]:
    """Seeded repetitions aggregated into a median/std curve."""
    runs = run_repetitions(config, jobs=jobs)
    return aggregate_curves(runs, config.strategy.value)


def apply_axis(config: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    """The config with one swept hyperparameter replaced."""
    if axis == "learning_rate":
        return replace(config, classifier_spec=replace(config.classifier_spec,
                                                       learning_rate=float(value)))
    if axis == "batch_size":
        return replace(config, classifier_spec=replace(config.classifier_spec,
                                                       batch_size=int(value)))
    if axis == "dropout":
        return replace(config, classifier_spec=replace(config.classifier_spec,
                                                       dropout_rate=float(value)))
    if axis == "noise_rate":
        return replace(config, label_noise_rate=float(value))
    raise ConfigError(f"unsupported sweep axis {axis!r}; pick one of {SWEEP_AXES}")


def run_sweep(base_config: ExperimentConfig, axis: str, values,
              jobs: int = 1) -> dict:
    """One aggregated curve set per value of a hyperparameter axis.

    Everything else, including the derived initial labelled sets, is shared
    across values.
    """
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    return {value: repeat_runs(apply_axis(base_config, axis, value), jobs=jobs)
            for value in values}


@dataclass
class CrossTrainPlan:
    """Retrain ``trainee_capacity`` on the labelled sets a
    ``selector_capacity`` run accumulated by given checkpoints."""

    selector_capacity: Capacity
    trainee_capacity: Capacity
    checkpoints: tuple[int, ...] = (3, 5, 10, 15)

    def __post_init__(self):
        self.checkpoints = tuple(int(c) for c in self.checkpoints)
        if any(b <= a for a, b in zip(self.checkpoints, self.checkpoints[1:])):
            raise ConfigError("checkpoints must be strictly ascending")


def run_selector(config: ExperimentConfig, capacity: Capacity) -> list[RunRecord]:
    """A full acquisition run with the classifier at a capacity preset."""
    sel_config = replace(
        config, classifier_spec=capacity_spec(capacity, config.classifier_spec)
    )
    return run_active_learning(sel_config)


def labelled_ids_at(records: list[RunRecord], checkpoint: int) -> np.ndarray:
    """The labelled id set a run had accumulated by a checkpoint iteration."""
    if checkpoint >= len(records):
        raise ConfigError(
            f"checkpoint {checkpoint} beyond run length {len(records)}"
        )
    ids = np.concatenate([records[i].selected_ids for i in range(checkpoint + 1)])
    return np.sort(ids)


def run_cross_training(config: ExperimentConfig, plan: CrossTrainPlan,
                       selector_records: list[RunRecord] | None = None) -> list[RunRecord]:
    """Train the trainee from scratch on the selector's labelled sets.

    At each checkpoint iteration the trainee capacity is trained on exactly
    the ids the selector had labelled by then and evaluated on the test
    set.  Returns one record per checkpoint.
    """
    config.validate()
    if selector_records is None:
        selector_records = run_selector(config, plan.selector_capacity)

    labels_view = config.dataset.labels
    if config.label_noise_rate > 0:
        labels_view = inject_label_noise(
            config.dataset.labels, config.label_noise_rate,
            derive_seed(config.master_seed, "noise"),
            class_count=class_count_of(config.dataset),
            tree=config.dataset.label_tree,
        )

    trainee_spec = capacity_spec(plan.trainee_capacity, config.classifier_spec)
    out: list[RunRecord] = []
    for checkpoint in plan.checkpoints:
        ids = labelled_ids_at(selector_records, checkpoint)
        started = time.perf_counter()
        seed = derive_seed(config.master_seed, "xtrain",
                           plan.trainee_capacity.value, checkpoint)
        model = _train_on(replace(config, classifier_spec=trainee_spec), ids,
                          labels_view, seed)
        accuracy, confusion = evaluate(model, config.test_dataset)
        out.append(RunRecord(
            iteration=checkpoint,
            labelled_size=len(ids),
            test_accuracy=accuracy,
            dev_accuracy=model.dev_accuracy_best,
            confusion=confusion,
            selected_ids=ids,
            wall_time=time.perf_counter() - started,
            seed=seed,
        ))
    return out
