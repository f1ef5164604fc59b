"""activepool: pool-based active learning with a reproducible harness.

The package splits into small layers: :mod:`activepool.core` holds the
domain types (datasets, pools, label trees), :mod:`activepool.strategies`
the pure query strategies, :mod:`activepool.classifier` a trainable MLP
with flat and hierarchical heads, :mod:`activepool.data` ingestion and
synthetic generation, :mod:`activepool.engine` the acquisition loop and
robustness harnesses, and :mod:`activepool.cli` the command-line runner.
"""

from .classifier import (
    Capacity,
    ClassifierSpec,
    FlatHead,
    HierarchicalHead,
    TrainedModel,
    capacity_spec,
    evaluate,
    load_model,
    save_model,
    train,
    train_hierarchical,
)
from .core import (
    NA,
    NEG,
    POS,
    ConfigError,
    DataFormatError,
    Dataset,
    LabelTree,
    Pool,
    TrainingError,
    build_confusion_matrix,
    derive_hier_label,
    hier_state_matrix,
)
from .data import (
    DatasetDescriptor,
    SyntheticSpec,
    generate_synthetic,
    initial_seed_set,
    load_csv,
    load_idx,
    stratified_split,
)
from .engine import (
    CrossTrainPlan,
    CurvePoint,
    ExperimentConfig,
    RunRecord,
    derive_seed,
    inject_label_noise,
    repeat_runs,
    run_active_learning,
    run_cross_training,
    run_sweep,
)
from .strategies import (
    QueryBatch,
    SelectionContext,
    StrategyKind,
    Terminate,
    score_entropy,
    score_least_confident,
    score_margin,
    score_sosl,
    select,
    select_coreset_greedy,
    select_entropy_high,
    select_margin,
    select_nc_balanced,
    select_nc_diversity,
    select_nc_low,
    select_nc_range,
    select_random,
    select_sosl,
    select_top_n,
)

__version__ = "0.1.0"

__all__ = [
    "Capacity", "ClassifierSpec", "FlatHead", "HierarchicalHead",
    "TrainedModel", "capacity_spec", "evaluate", "load_model", "save_model",
    "train", "train_hierarchical",
    "NA", "NEG", "POS", "ConfigError", "DataFormatError", "Dataset",
    "LabelTree", "Pool", "TrainingError", "build_confusion_matrix",
    "derive_hier_label", "hier_state_matrix",
    "DatasetDescriptor", "SyntheticSpec", "generate_synthetic",
    "initial_seed_set", "load_csv", "load_idx", "stratified_split",
    "CrossTrainPlan", "CurvePoint", "ExperimentConfig", "RunRecord",
    "derive_seed", "inject_label_noise", "repeat_runs",
    "run_active_learning", "run_cross_training", "run_sweep",
    "QueryBatch", "SelectionContext", "StrategyKind", "Terminate",
    "score_entropy", "score_least_confident", "score_margin", "score_sosl",
    "select", "select_coreset_greedy", "select_entropy_high",
    "select_margin", "select_nc_balanced", "select_nc_diversity",
    "select_nc_low", "select_nc_range", "select_random", "select_sosl",
    "select_top_n",
]
