"""Command-line entry point: feeder validation, graph construction, data, training, benchmarks.

Every command writes below ``--out`` (default ``$STGNN_OUTPUT_ROOT`` or ``./artifacts``) and
stamps its outputs with a configuration fingerprint. Library errors are logged and turn
into exit code 1; argparse usage errors exit with 2.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from pydantic import ValidationError

from src.tools.datagen import (
    Dataset,
    NormStats,
    align_to_graph,
    apply_normalizer,
    build_dataset,
    class_histogram,
    dataset_fingerprint,
    export_csv,
    fit_normalizer,
    generate_runs,
    import_csv,
    load_cache,
    save_cache,
    split,
    windows_from_runs,
)
from src.tools.errors import StgnnError
from src.tools.feeder import (
    FeederTopology,
    SensorPlacement,
    apply_switch_ops,
    configured_feeder,
    default_placement,
    load_feeder,
    load_placement,
    parse_switch_op,
    validate,
)
from src.tools.graph import SensorGraph, build_graph, export_graph, to_dot
from src.tools.models import (
    FAULT_POSITIONS,
    Architecture,
    DatagenConfig,
    ExperimentManifest,
    FaultType,
    GraphStrategy,
    TrainConfig,
)
from src.tools.stgnn import load_model, save_model
from src.tools.trainer import (
    append_report_row,
    benchmark_topologies,
    evaluate,
    seed_sweep,
    train,
    write_loss_history,
    write_report,
    write_timing_table,
)
from src.utils.keys import config_fingerprint, file_sha256

logger = logging.getLogger("src.cli")

DATASET_FILE = "dataset.stgd"
SPLIT_FILE = "split.json"
LOG_FORMAT = "%(asctime)s - %(levelname)s - %(name)s - %(message)s"


def _output_root(args: argparse.Namespace) -> Path:
    root = Path(args.out) if args.out else Path(os.environ.get("STGNN_OUTPUT_ROOT", "artifacts"))
    root.mkdir(parents=True, exist_ok=True)
    return root


def _topology(args: argparse.Namespace) -> FeederTopology:
    base = load_feeder(args.feeder) if getattr(args, "feeder", None) else None
    topology = configured_feeder(args.config, base)
    ops = [parse_switch_op(op) for op in getattr(args, "switch_op", None) or []]
    return apply_switch_ops(topology, ops) if ops else topology


def _placement(args: argparse.Namespace) -> SensorPlacement:
    path = getattr(args, "placement", None)
    return load_placement(path) if path else default_placement()


def _write_json(path: Path, payload: Any) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_validate_feeder(args: argparse.Namespace) -> int:
    topology = _topology(args)
    report = validate(topology)
    print(report.model_dump_json(indent=2))
    return 0 if report.ok else 1


def cmd_build_graph(args: argparse.Namespace) -> int:
    topology = _topology(args)
    placement = _placement(args)
    strategy = GraphStrategy(args.strategy)
    graph = build_graph(strategy, topology, placement)
    out = _output_root(args) / "graphs"
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{args.config}_{strategy.value}"
    fingerprint = config_fingerprint(export_graph(graph))
    (out / f"{stem}.graph").write_text(
        f"# fingerprint {fingerprint}\n" + export_graph(graph), encoding="utf-8"
    )
    (out / f"{stem}.dot").write_text(to_dot(graph, name=stem.replace("-", "_")), encoding="utf-8")
    print(f"{stem}: {graph.num_nodes} nodes, {len(graph.edges)} edges -> {out / (stem + '.graph')}")
    return 0


def _datagen_config(args: argparse.Namespace) -> DatagenConfig:
    buses = list(FAULT_POSITIONS[: args.locations]) if args.locations else list(FAULT_POSITIONS)
    types = list(FaultType)[: args.types] if args.types else list(FaultType)
    return DatagenConfig(
        fault_buses=buses,
        fault_types=types,
        runs_per_scenario=args.runs,
        type_assignment=args.type_assignment,
        seed=args.seed,
        split_group_by=args.group_by,
    )


def _data_dir(args: argparse.Namespace) -> Path:
    return Path(args.data) if args.data else _output_root(args) / "data" / args.config


def _write_split(directory: Path, dataset: Dataset, config: DatagenConfig) -> None:
    train_set, val_set, test_set = split(
        dataset, config.split_ratios, np.random.default_rng(config.seed), config.split_group_by
    )
    stats = fit_normalizer(train_set)
    keys = {
        name: part.group_keys.tolist()
        for name, part in (("train", train_set), ("val", val_set), ("test", test_set))
    }
    _write_json(
        directory / SPLIT_FILE,
        {
            "fingerprint": dataset.metadata.get("fingerprint", ""),
            "group_by": config.split_group_by,
            "norm_stats": {"mean": list(stats.mean), "std": list(stats.std)},
            "keys": keys,
        },
    )


def cmd_gen_data(args: argparse.Namespace) -> int:
    directory = _data_dir(args)
    directory.mkdir(parents=True, exist_ok=True)
    config = _datagen_config(args)
    if args.from_csv:
        dataset = import_csv(args.from_csv, config.fault_buses)
    elif args.csv:
        topology, placement = _topology(args), _placement(args)
        runs = generate_runs(config, topology, placement, workers=args.workers)
        export_csv(runs, directory / "runs.csv")
        metadata = {
            "fingerprint": dataset_fingerprint(config, topology, placement),
            "seed": str(config.seed),
        }
        dataset = windows_from_runs(runs, metadata)
    else:
        dataset = build_dataset(config, _topology(args), _placement(args), workers=args.workers)
    save_cache(dataset, directory / DATASET_FILE)
    _write_split(directory, dataset, config)
    histogram = class_histogram(dataset)
    print(f"windows: {len(dataset)}  checksum: {file_sha256(directory / DATASET_FILE)[:16]}")
    for label, count in enumerate(histogram):
        if count:
            print(f"  class {label:>2}: {count:>7} ({100.0 * count / len(dataset):5.1f}%)")
    return 0


def _load_splits(directory: Path) -> tuple[Dataset, Dataset, Dataset, dict[str, Any]]:
    cache = directory / DATASET_FILE
    split_file = directory / SPLIT_FILE
    for path in (cache, split_file):
        if not path.exists():
            raise FileNotFoundError(f"missing dataset artifact {path}; run gen-data first")
    dataset = load_cache(cache)
    info = json.loads(split_file.read_text(encoding="utf-8"))
    stats = NormStats(tuple(info["norm_stats"]["mean"]), tuple(info["norm_stats"]["std"]))
    dataset = apply_normalizer(dataset, stats)
    position = {tuple(k): i for i, k in enumerate(dataset.group_keys.tolist())}
    parts = []
    for name in ("train", "val", "test"):
        # split keys are (run, start) pairs; run-level splits still list every window
        parts.append(dataset.subset([position[tuple(k)] for k in info["keys"][name]]))
    return parts[0], parts[1], parts[2], info


def _graph_for(args: argparse.Namespace, strategy: GraphStrategy) -> SensorGraph:
    return build_graph(strategy, _topology(args), _placement(args))


def _train_config(args: argparse.Namespace, arch: Architecture, seed: int) -> TrainConfig:
    return TrainConfig(
        architecture=arch,
        strategy=GraphStrategy(args.topology),
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=seed,
    )


def cmd_train(args: argparse.Namespace) -> int:
    directory = _data_dir(args)
    train_set, val_set, test_set, info = _load_splits(directory)
    strategy = GraphStrategy(args.topology)
    graph = _graph_for(args, strategy)
    train_set, val_set, test_set = (
        align_to_graph(d, graph) for d in (train_set, val_set, test_set)
    )
    arch = Architecture(args.arch)
    config = _train_config(args, arch, args.seed)
    fingerprint = config_fingerprint(info["fingerprint"], config, args.config)
    out = _output_root(args) / "runs" / f"{args.config}_{strategy.value}_{arch.value}"
    out.mkdir(parents=True, exist_ok=True)
    if args.seeds > 1:
        seeds = [args.seed + k for k in range(args.seeds)]
        sweep = seed_sweep(config, train_set, test_set, graph, seeds, validation=val_set)
        payload = sweep.model_dump(mode="json", exclude={"reports": {"__all__": {"train_seconds"}}})
        payload["fingerprint"] = fingerprint
        _write_json(out / "sweep.json", payload)
        print(f"{arch.value}/{strategy.value}: macro F1 {sweep.mean:.4f} +- {sweep.half_width:.4f}")
        return 0
    result = train(config, train_set, graph, validation=val_set)
    metadata = {"fingerprint": fingerprint, "data": str(directory)}
    save_model(result.model, out / "model.stgm", metadata)
    write_loss_history(result.history, out / "loss.csv")
    report = evaluate(result.model, test_set, run_id=out.name, fingerprint=fingerprint)
    report = report.model_copy(update={"train_seconds": result.train_seconds})
    write_report(report, out / "report.json")
    append_report_row(report, _output_root(args) / "reports.csv")
    print(f"{out.name}: test macro F1 {report.macro_f1:.4f} ({result.train_seconds:.1f}s)")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    model, metadata = load_model(args.checkpoint)
    directory = Path(args.data) if args.data else Path(metadata.get("data", _data_dir(args)))
    parts = dict(zip(("train", "val", "test"), _load_splits(directory)[:3], strict=True))
    dataset = align_to_graph(parts[args.split], model.graph)
    report = evaluate(
        model,
        dataset,
        run_id=Path(args.checkpoint).parent.name,
        fingerprint=metadata.get("fingerprint", ""),
    )
    default_target = Path(args.checkpoint).with_suffix(f".{args.split}.json")
    target = Path(args.report) if args.report else default_target
    write_report(report, target)
    print(
        f"{args.split}: macro F1 {report.macro_f1:.4f} "
        f"over {report.sample_count} windows -> {target}"
    )
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    directory = _data_dir(args)
    train_set, _, _, info = _load_splits(directory)
    archs = [Architecture(a.strip()) for a in args.archs.split(",") if a.strip()]
    graphs = {s.value: _graph_for(args, s) for s in GraphStrategy}
    configs = [_train_config(args, arch, args.seed) for arch in archs]
    measured = graphs[GraphStrategy.MEASURED_ONLY.value]
    base = align_to_graph(train_set, measured)
    result = benchmark_topologies(configs, base, graphs, repeats=args.repeats)
    out = _output_root(args) / "bench"
    out.mkdir(parents=True, exist_ok=True)
    write_timing_table(result, out / f"{args.config}_timing.csv")
    payload = result.model_dump(mode="json")
    payload["fingerprint"] = config_fingerprint(
        info["fingerprint"], [c.model_dump(mode="json") for c in configs]
    )
    _write_json(out / f"{args.config}_timing.json", payload)
    for row in result.rows:
        print(
            f"{row.architecture:<11} {row.strategy:<14} "
            f"{row.mean_seconds:9.2f}s +- {row.std_seconds:.2f}"
        )
    for arch, ratio in result.ratios.items():
        print(f"{arch}: full/measured = {ratio:.2f}")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    manifest = ExperimentManifest.load(args.manifest)
    fingerprint = manifest.fingerprint()
    out = Path(args.out) if args.out else manifest.output_dir
    out.mkdir(parents=True, exist_ok=True)
    base = load_feeder(manifest.feeder) if manifest.feeder else None
    placement = load_placement(manifest.placement) if manifest.placement else default_placement()
    ops = [parse_switch_op(op) for op in manifest.switch_ops]
    rows = []
    for configuration in manifest.configurations:
        topology = configured_feeder(configuration, base)
        if ops:
            topology = apply_switch_ops(topology, ops)
        dataset = build_dataset(manifest.datagen, topology, placement)
        save_cache(dataset, out / f"{configuration}_{DATASET_FILE}")
        train_set, val_set, test_set = split(
            dataset,
            manifest.datagen.split_ratios,
            np.random.default_rng(manifest.seed),
            manifest.datagen.split_group_by,
        )
        stats = fit_normalizer(train_set)
        train_set, val_set, test_set = (
            apply_normalizer(d, stats) for d in (train_set, val_set, test_set)
        )
        for strategy in manifest.strategies:
            graph = build_graph(strategy, topology, placement)
            aligned = [align_to_graph(d, graph) for d in (train_set, val_set, test_set)]
            for train_config in manifest.train:
                baseline = train_config.architecture.is_baseline
                if baseline and strategy is GraphStrategy.FULL_TOPOLOGY:
                    continue
                config = train_config.model_copy(update={"strategy": strategy})
                sweep = seed_sweep(
                    config, aligned[0], aligned[2], graph, manifest.seeds, aligned[1]
                )
                rows.append(
                    {
                        "configuration": configuration,
                        "strategy": strategy.value,
                        "architecture": config.architecture.value,
                        "mean_macro_f1": sweep.mean,
                        "half_width": sweep.half_width,
                        "seeds": len(sweep.seeds),
                        "fingerprint": fingerprint,
                    }
                )
    summary = pd.DataFrame(rows)
    summary.to_csv(out / "summary.csv", index=False, float_format="%.6f")
    print(summary.to_string(index=False))
    return 0


def _add_feeder_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", choices=["default", "green"], default="default")
    parser.add_argument("--feeder", help="feeder file (default: shipped IEEE 123)")
    parser.add_argument("--placement", help="placement file (default: shipped sensor placement)")
    parser.add_argument("--switch-op", action="append", help="extra switch op, e.g. open:60-160")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="feeder-stgnn", description="Fault location on partially observed feeders"
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    parser.add_argument("--out", help="output root (default: $STGNN_OUTPUT_ROOT or ./artifacts)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate-feeder", help="check connectivity, radiality and phases")
    _add_feeder_args(p)
    p.set_defaults(func=cmd_validate_feeder)

    p = sub.add_parser("build-graph", help="write the graph export and DOT file")
    _add_feeder_args(p)
    p.add_argument("--strategy", choices=[s.value for s in GraphStrategy], required=True)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("gen-data", help="generate the labeled window dataset and its split")
    _add_feeder_args(p)
    p.add_argument("--data", help="dataset directory (default: <out>/data/<config>)")
    p.add_argument("--runs", type=int, default=1, help="runs per scenario")
    p.add_argument("--locations", type=int, help="use the first K fault positions")
    p.add_argument("--types", type=int, help="use the first K fault types")
    p.add_argument("--type-assignment", choices=["cross", "sampled"], default="cross")
    p.add_argument("--group-by", choices=["window", "run"], default="window")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--csv", action="store_true", help="also export the raw runs as CSV")
    p.add_argument("--from-csv", help="ingest runs from a CSV file instead of generating")
    p.set_defaults(func=cmd_gen_data)

    for name, func in (("train", cmd_train), ("bench", cmd_bench)):
        p = sub.add_parser(name, help="train and evaluate" if name == "train" else "timing table")
        _add_feeder_args(p)
        p.add_argument("--data", help="dataset directory (default: <out>/data/<config>)")
        p.add_argument(
            "--topology",
            "--strategy",
            dest="topology",
            choices=[s.value for s in GraphStrategy],
            default=GraphStrategy.MEASURED_ONLY.value,
        )
        p.add_argument("--epochs", type=int, help="default: 11 for gru, 15 otherwise")
        p.add_argument("--batch-size", type=int, default=32)
        p.add_argument("--seed", type=int, default=0)
        if name == "train":
            p.add_argument("--arch", choices=[a.value for a in Architecture], default="rgcn")
            p.add_argument("--seeds", type=int, default=1, help="seed sweep size")
        else:
            p.add_argument("--archs", default="rgcn,rgatv2,rsage-mean,rsage-max")
            p.add_argument("--repeats", type=int, default=3)
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _add_feeder_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory (default: recorded in the checkpoint)")
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--report", help="report path (default: next to the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", help="run a full experiment manifest")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_run)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT)
    try:
        return int(args.func(args))
    except (StgnnError, ValidationError, FileNotFoundError, KeyError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
