"""Command-line entry point: configure experiments in JSON, run them, and
inspect the emitted artifacts.

Commands
--------
run         execute the configured repetitions, write records + curves
sweep       one run per value of a hyperparameter axis, subdirectory each
crosstrain  capacity-grid cross training plus a random-selection baseline
report      plain-text summary of a previous output directory

Every experiment parameter lives in the config file; flags only pick the
command, paths, parallelism and seed/repetition overrides.  All artifacts
are deterministic functions of the config (wall-clock timings appear only
in the record log) and are written atomically.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from .classifier import Capacity, ClassifierSpec, FlatHead
from .core import ConfigError
from .data import DatasetDescriptor, SyntheticSpec
from .engine import (
    CrossTrainPlan,
    CurvePoint,
    ExperimentConfig,
    aggregate_curves,
    apply_axis,
    derive_seed,
    run_active_learning,
    run_cross_training,
    run_repetitions,
    run_selector,
)
from .strategies import StrategyKind

CONFIG_SCHEMA_VERSION = 1

CURVE_COLUMNS = ("strategy", "iteration", "labelled_size", "accuracy_median",
                 "accuracy_std", "repetitions")

_TOP_KEYS = {
    "schema_version", "dataset", "strategy", "strategy_params", "classifier",
    "initial_per_class", "growth_fraction", "stop_fraction_of_pool",
    "repetitions", "label_noise_rate", "master_seed", "crosstrain",
}
_DATASET_KEYS = {
    "format", "name", "class_count",
    "train_images", "train_labels", "test_images", "test_labels",
    "train_path", "test_path", "label_column",
    "clusters_per_class", "samples_per_cluster", "feature_dim",
    "cluster_std", "class_separation", "seed", "test_fraction",
}
_CLASSIFIER_KEYS = {
    "hidden_layers", "learning_rate", "batch_size", "dropout_rate",
    "max_epochs", "early_stop_patience", "dev_fraction",
}
_CROSSTRAIN_KEYS = {"capacities", "checkpoints"}


def _reject_unknown(doc: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {', '.join(unknown)}")


def _dataset_descriptor(doc: dict) -> DatasetDescriptor:
    _reject_unknown(doc, _DATASET_KEYS, "dataset")
    fmt = doc.get("format")
    if fmt == "synthetic":
        synth_keys = {"class_count", "clusters_per_class", "samples_per_cluster",
                      "feature_dim", "cluster_std", "class_separation", "seed"}
        spec = SyntheticSpec(**{k: doc[k] for k in synth_keys if k in doc})
        return DatasetDescriptor(
            format="synthetic", name=doc.get("name", ""), synthetic=spec,
            test_fraction=doc.get("test_fraction", 0.2),
        )
    if fmt in ("idx", "csv"):
        fields = {k: doc[k] for k in doc if k in {
            "name", "class_count", "train_images", "train_labels",
            "test_images", "test_labels", "train_path", "test_path",
            "label_column",
        }}
        return DatasetDescriptor(format=fmt, **fields)
    raise ConfigError(f"dataset format must be idx, csv or synthetic, got {fmt!r}")


def load_config(path) -> tuple[ExperimentConfig, dict]:
    """Parse and validate a run-config file into an ExperimentConfig.

    Returns the config plus the raw document (used for the resolved copy
    and the crosstrain section).
    """
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    _reject_unknown(doc, _TOP_KEYS, "config")
    if doc.get("schema_version") != CONFIG_SCHEMA_VERSION:
        raise ConfigError(
            f"schema_version must be {CONFIG_SCHEMA_VERSION}, "
            f"got {doc.get('schema_version')!r}"
        )
    for key in ("dataset", "strategy", "classifier"):
        if key not in doc:
            raise ConfigError(f"config is missing the {key!r} section")

    descriptor = _dataset_descriptor(doc["dataset"])
    pool_data, test_data = descriptor.resolve()

    cls_doc = dict(doc["classifier"])
    _reject_unknown(cls_doc, _CLASSIFIER_KEYS, "classifier")
    if "hidden_layers" not in cls_doc:
        raise ConfigError("classifier section needs hidden_layers")
    cls_doc["hidden_layers"] = tuple(cls_doc["hidden_layers"])
    spec = ClassifierSpec(head=FlatHead(pool_data.class_count), **cls_doc)

    try:
        strategy = StrategyKind(doc["strategy"])
    except ValueError:
        raise ConfigError(f"unknown strategy {doc['strategy']!r}") from None

    config = ExperimentConfig(
        dataset=pool_data,
        test_dataset=test_data,
        strategy=strategy,
        classifier_spec=spec,
        strategy_params=doc.get("strategy_params", {}),
        initial_per_class=doc.get("initial_per_class", 100),
        growth_fraction=doc.get("growth_fraction", 0.20),
        stop_fraction_of_pool=doc.get("stop_fraction_of_pool", 1.0 / 3.0),
        repetitions=doc.get("repetitions", 5),
        label_noise_rate=doc.get("label_noise_rate", 0.0),
        master_seed=doc.get("master_seed", 0),
    )
    config.validate()
    return config, doc


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def _curves_csv(points: list[CurvePoint]) -> str:
    lines = [",".join(CURVE_COLUMNS)]
    for p in points:
        lines.append(",".join([
            p.strategy, str(p.iteration), str(p.labelled_size),
            repr(p.accuracy_median), repr(p.accuracy_std), str(p.repetitions),
        ]))
    return "\n".join(lines) + "\n"


def _records_jsonl(runs) -> str:
    lines = []
    for rep, records in enumerate(runs):
        for rec in records:
            lines.append(json.dumps(rec.to_json_dict(repetition=rep), sort_keys=True))
    return "\n".join(lines) + "\n"


def _resolved_config(doc: dict, config: ExperimentConfig) -> str:
    resolved = dict(doc)
    resolved["derived_seeds"] = {
        "repetitions": [derive_seed(config.master_seed, "rep", rep)
                        for rep in range(config.repetitions)],
    }
    return json.dumps(resolved, indent=2, sort_keys=True) + "\n"


def _write_run_outputs(out_dir: Path, config: ExperimentConfig, doc: dict,
                       jobs: int) -> None:
    runs = run_repetitions(config, jobs=jobs)
    curves = aggregate_curves(runs, config.strategy.value)
    _atomic_write(out_dir / "curves.csv", _curves_csv(curves))
    _atomic_write(out_dir / "records.jsonl", _records_jsonl(runs))
    _atomic_write(out_dir / "resolved_config.json", _resolved_config(doc, config))


def cmd_run(config_path, out_dir, seed=None, reps=None, jobs: int = 1) -> int:
    config, doc = load_config(config_path)
    config, doc = _apply_overrides(config, doc, seed, reps)
    _write_run_outputs(Path(out_dir), config, doc, jobs)
    return 0


def _apply_overrides(config, doc, seed, reps):
    if seed is not None:
        config = replace(config, master_seed=int(seed))
        doc = {**doc, "master_seed": int(seed)}
    if reps is not None:
        config = replace(config, repetitions=int(reps))
        doc = {**doc, "repetitions": int(reps)}
    config.validate()
    return config, doc


def cmd_sweep(config_path, axis, values, out_dir, seed=None, reps=None,
              jobs: int = 1) -> int:
    config, doc = load_config(config_path)
    config, doc = _apply_overrides(config, doc, seed, reps)
    if not values:
        raise ConfigError("sweep needs at least one value")
    for raw in values:
        value = _parse_value(axis, raw)
        value_config = apply_axis(config, axis, value)
        value_doc = {**doc, "sweep": {"axis": axis, "value": value}}
        _write_run_outputs(Path(out_dir) / f"{axis}={raw}", value_config,
                           value_doc, jobs)
    return 0


def _parse_value(axis: str, token: str):
    return int(token) if axis == "batch_size" else float(token)


def cmd_crosstrain(config_path, out_dir, seed=None, reps=None, jobs: int = 1) -> int:
    """Capacity-grid cross training.

    For every repetition, each capacity runs the configured strategy as a
    selector (plus one random-selection baseline run); every capacity is
    then retrained on every selector's accumulated labelled sets at each
    checkpoint.  Checkpoints past a terminated selector run are skipped.
    The grid lands in crosstrain.csv with per-repetition mean accuracy.
    """
    config, doc = load_config(config_path)
    config, doc = _apply_overrides(config, doc, seed, reps)
    section = doc.get("crosstrain", {})
    _reject_unknown(section, _CROSSTRAIN_KEYS, "crosstrain")
    capacities = [Capacity(c) for c in section.get("capacities", ["min", "med", "max"])]
    checkpoints = tuple(section.get("checkpoints", [3, 5, 10, 15]))

    cells: dict[tuple[int, str, str], list[float]] = {}
    sizes: dict[tuple[int, str], int] = {}
    for rep in range(config.repetitions):
        rep_config = replace(config,
                             master_seed=derive_seed(config.master_seed, "rep", rep))
        selector_runs = {
            cap.value: run_selector(rep_config, cap) for cap in capacities
        }
        random_config = replace(
            rep_config, strategy=StrategyKind.RANDOM, strategy_params={},
            classifier_spec=replace(rep_config.classifier_spec,
                                    hidden_layers=(int(min(
                                        rep_config.classifier_spec.hidden_layers)),)),
        )
        selector_runs["random"] = run_active_learning(random_config)

        for selector, records in selector_runs.items():
            usable = tuple(c for c in checkpoints if c < len(records))
            if not usable:
                continue
            for trainee in capacities:
                plan = CrossTrainPlan(
                    selector_capacity=(Capacity(selector) if selector != "random"
                                       else trainee),
                    trainee_capacity=trainee,
                    checkpoints=usable,
                )
                results = run_cross_training(rep_config, plan,
                                             selector_records=records)
                for rec in results:
                    cells.setdefault((rec.iteration, selector, trainee.value),
                                     []).append(rec.test_accuracy)
                    sizes[(rec.iteration, selector)] = rec.labelled_size

    lines = ["checkpoint,selector,trainee,labelled_size,accuracy_mean,repetitions"]
    for (checkpoint, selector, trainee), accs in sorted(cells.items()):
        lines.append(",".join([
            str(checkpoint), selector, trainee,
            str(sizes[(checkpoint, selector)]),
            repr(float(np.mean(accs))), str(len(accs)),
        ]))
    _atomic_write(Path(out_dir) / "crosstrain.csv", "\n".join(lines) + "\n")
    _atomic_write(Path(out_dir) / "resolved_config.json",
                  _resolved_config(doc, config))
    return 0


def _summarize_curves(path: Path, label: str, lines: list[str]) -> None:
    rows = path.read_text().strip().splitlines()[1:]
    if not rows:
        lines.append(f"{label}: empty curve table")
        return
    last = rows[-1].split(",")
    lines.append(
        f"{label}: strategy={last[0]} iterations={len(rows)} "
        f"final_labelled={last[2]} final_accuracy_median={last[3]}"
    )


def _summarize_records(path: Path, lines: list[str]) -> None:
    terminated = {}
    for line in path.read_text().splitlines():
        rec = json.loads(line)
        if rec.get("terminated"):
            terminated[rec.get("repetition", 0)] = rec["iteration"]
    for rep, iteration in sorted(terminated.items()):
        lines.append(f"  TERMINATE: repetition {rep} at iteration {iteration}")


def cmd_report(out_dir) -> int:
    out = Path(out_dir)
    if not out.is_dir():
        print(f"error: {out} is not a directory", file=sys.stderr)
        return 1
    lines: list[str] = []
    if (out / "curves.csv").exists():
        _summarize_curves(out / "curves.csv", str(out), lines)
    if (out / "records.jsonl").exists():
        _summarize_records(out / "records.jsonl", lines)
    if (out / "crosstrain.csv").exists():
        rows = (out / "crosstrain.csv").read_text().strip().splitlines()[1:]
        lines.append(f"{out}: crosstrain grid with {len(rows)} cells")
    for sub in sorted(p for p in out.iterdir() if p.is_dir()):
        if (sub / "curves.csv").exists():
            _summarize_curves(sub / "curves.csv", sub.name, lines)
        if (sub / "records.jsonl").exists():
            _summarize_records(sub / "records.jsonl", lines)
    if not lines:
        print(f"error: no run artifacts under {out}", file=sys.stderr)
        return 1
    print("\n".join(lines))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="activepool",
        description="Pool-based active-learning experiment runner.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--reps", type=int, default=None, help="repetition override")
        p.add_argument("--jobs", type=int, default=1, help="parallel repetitions")

    common(sub.add_parser("run", help="execute the configured experiment"))
    sweep = sub.add_parser("sweep", help="run one experiment per axis value")
    common(sweep)
    sweep.add_argument("--axis", required=True,
                       choices=["learning_rate", "batch_size", "dropout", "noise_rate"])
    sweep.add_argument("--values", required=True,
                       help="comma-separated axis values")
    common(sub.add_parser("crosstrain", help="capacity-grid cross training"))
    report = sub.add_parser("report", help="summarize an output directory")
    report.add_argument("--out", required=True, help="output directory to read")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args.config, args.out, args.seed, args.reps, args.jobs)
        if args.command == "sweep":
            values = [v for v in args.values.split(",") if v]
            return cmd_sweep(args.config, args.axis, values, args.out,
                             args.seed, args.reps, args.jobs)
        if args.command == "crosstrain":
            return cmd_crosstrain(args.config, args.out, args.seed, args.reps,
                                  args.jobs)
        if args.command == "report":
            return cmd_report(args.out)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
