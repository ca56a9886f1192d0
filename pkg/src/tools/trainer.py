"""Training loop, evaluation reports, seed sweeps and the topology timing benchmark."""

import logging
import time
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from src.tools.datagen import Dataset, align_to_graph
from src.tools.errors import ShapeError
from src.tools.graph import SensorGraph
from src.tools.models import (
    NUM_CLASSES,
    BenchmarkResult,
    EvalReport,
    GraphStrategy,
    LossRecord,
    SeedSweepResult,
    TimingRow,
    TrainConfig,
)
from src.tools.nn import AdamW, Tensor, cross_entropy, derive_rngs
from src.tools.stgnn import FaultLocator, build_model, node_predictions, predict
from src.utils.metrics import confidence_interval, confusion, macro_f1, per_class_f1, weighted_f1

logger = logging.getLogger(__name__)


@dataclass
class TrainResult:
    model: FaultLocator
    history: list[LossRecord] = field(default_factory=list)
    val_f1: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    train_seconds: float = 0.0


def check_layout(dataset: Dataset, graph: SensorGraph) -> None:
    if dataset.node_buses != graph.buses:
        raise ShapeError("dataset node order does not match the graph; align it first")
    if not np.array_equal(dataset.observed, graph.observed_mask.astype(bool)):
        raise ShapeError("dataset sensors do not match the graph's observed nodes")


def node_loss(model: FaultLocator, features: np.ndarray, labels: np.ndarray) -> Tensor:
    """Cross-entropy of every observed node against its window label; unobserved nodes weigh 0."""
    labels = np.asarray(labels, dtype=np.int64)
    logits = model(features)
    batch, n = logits.shape[0], logits.shape[1]
    return cross_entropy(
        logits.reshape(batch * n, logits.shape[-1]),
        np.repeat(labels, n),
        weights=np.tile(model.observed_mask.astype(np.float64), batch),
    )


def train(
    config: TrainConfig,
    dataset: Dataset,
    graph: SensorGraph,
    validation: Dataset | None = None,
) -> TrainResult:
    """Mini-batch AdamW on node-level cross-entropy masked to observed nodes."""
    check_layout(dataset, graph)
    started = time.perf_counter()
    model = build_model(
        config.model_config_for(dataset.features.shape[2]), graph, config.seed, config.dtype
    )
    shuffle_rng = derive_rngs(config.seed, 3)[2]
    optimizer = AdamW(
        model.parameters(),
        lr=config.learning_rate,
        weight_decay=config.weight_decay,
        betas=(config.beta1, config.beta2),
        eps=config.eps,
    )
    n = graph.num_nodes
    result = TrainResult(model=model)
    step = 0
    for epoch in range(config.resolved_epochs):
        epoch_start = time.perf_counter()
        model.train()
        order = shuffle_rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            if len(idx) * n < 2:
                logger.debug("skipping batch of %d window(s) on %d node(s)", len(idx), n)
                continue
            loss = node_loss(model, dataset.features[idx], dataset.labels[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            value = float(loss.data)
            losses.append(value)
            result.history.append(LossRecord(epoch=epoch, step=step, loss=value))
            step += 1
        result.epoch_seconds.append(time.perf_counter() - epoch_start)
        if validation is not None and len(validation):
            result.val_f1.append(macro_f1(validation.labels, predict(model, validation.features)))
        logger.info(
            "epoch %d/%d: loss %.4f in %.2fs%s",
            epoch + 1,
            config.resolved_epochs,
            float(np.mean(losses)) if losses else float("nan"),
            result.epoch_seconds[-1],
            f", val macro F1 {result.val_f1[-1]:.4f}" if result.val_f1 else "",
        )
    result.train_seconds = time.perf_counter() - started
    return result


def report_from_predictions(
    y_true: Sequence[int],
    y_pred: Sequence[int],
    node_true: Sequence[int] | None = None,
    node_pred: Sequence[int] | None = None,
    **meta: str,
) -> EvalReport:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise ValueError("cannot evaluate an empty dataset")
    return EvalReport(
        sample_count=int(y_true.size),
        macro_f1=macro_f1(y_true, y_pred),
        weighted_f1=weighted_f1(y_true, y_pred),
        node_macro_f1=None if node_true is None else macro_f1(node_true, node_pred),
        per_class_f1=per_class_f1(y_true, y_pred),
        support=np.bincount(y_true, minlength=NUM_CLASSES).tolist(),
        confusion=confusion(y_true, y_pred).tolist(),
        **meta,
    )


def evaluate(model: FaultLocator, dataset: Dataset, **meta: str) -> EvalReport:
    """Soft-vote predictions per window scored with macro F1; also node-level macro F1."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    check_layout(dataset, model.graph)
    labels = dataset.labels.astype(np.int64)
    votes = predict(model, dataset.features)
    observed = model.observed_mask.astype(bool)
    per_node = node_predictions(model, dataset.features)[:, observed]
    node_labels = np.repeat(labels, int(observed.sum()))
    meta.setdefault("architecture", model.config.architecture.value)
    meta.setdefault("strategy", model.graph.strategy.value if model.graph.strategy else "")
    return report_from_predictions(labels, votes, node_labels, per_node.reshape(-1), **meta)


def seed_sweep(
    config: TrainConfig,
    train_set: Dataset,
    test_set: Dataset,
    graph: SensorGraph,
    seeds: Sequence[int],
    validation: Dataset | None = None,
    level: float = 0.90,
) -> SeedSweepResult:
    """One training run per seed on a fixed split; seeds vary init, shuffling and dropout."""
    if not seeds:
        raise ValueError("seed sweep needs at least one seed")
    reports = []
    for seed in seeds:
        result = train(config.model_copy(update={"seed": seed}), train_set, graph, validation)
        report = evaluate(result.model, test_set, run_id=f"seed{seed}")
        reports.append(report.model_copy(update={"train_seconds": result.train_seconds}))
    scores = [r.macro_f1 for r in reports]
    if len(scores) >= 2:
        mean, half_width = confidence_interval(scores, level)
    else:
        mean, half_width = scores[0], 0.0
    logger.info(
        "%s over %d seeds: macro F1 %.4f +- %.4f",
        config.architecture.value,
        len(seeds),
        mean,
        half_width,
    )
    return SeedSweepResult(
        architecture=config.architecture.value,
        strategy=config.strategy.value,
        seeds=list(seeds),
        scores=scores,
        mean=mean,
        half_width=half_width,
        level=level,
        reports=reports,
    )


def benchmark_topologies(
    configs: Sequence[TrainConfig],
    dataset: Dataset,
    graphs: Mapping[str, SensorGraph],
    repeats: int = 3,
) -> BenchmarkResult:
    """Serial wall-clock of identical training runs on each graph; ratio full / measured-only."""
    if repeats < 1:
        raise ValueError("repeats must be positive")
    rows = []
    for config in configs:
        for label, graph in graphs.items():
            aligned = align_to_graph(dataset, graph)
            totals, epochs = [], []
            for r in range(repeats):
                started = time.perf_counter()
                result = train(config.model_copy(update={"seed": config.seed + r}), aligned, graph)
                totals.append(time.perf_counter() - started)
                epochs.extend(result.epoch_seconds)
            rows.append(
                TimingRow(
                    architecture=config.architecture.value,
                    strategy=label,
                    num_nodes=graph.num_nodes,
                    repeats=repeats,
                    mean_seconds=float(np.mean(totals)),
                    std_seconds=float(np.std(totals, ddof=1)) if repeats > 1 else 0.0,
                    epoch_seconds=epochs,
                )
            )
    ratios = {}
    full, measured = GraphStrategy.FULL_TOPOLOGY.value, GraphStrategy.MEASURED_ONLY.value
    for config in configs:
        arch = config.architecture.value
        by_label = {row.strategy: row.mean_seconds for row in rows if row.architecture == arch}
        if full in by_label and measured in by_label and by_label[measured] > 0:
            ratios[arch] = by_label[full] / by_label[measured]
    return BenchmarkResult(rows=rows, ratios=ratios)


def write_loss_history(history: Sequence[LossRecord], path: str | Path) -> None:
    frame = pd.DataFrame([r.model_dump() for r in history], columns=["epoch", "step", "loss"])
    frame.to_csv(path, index=False, float_format="%.17g")


def write_report(report: EvalReport, path: str | Path) -> None:
    """JSON without wall-clock fields so reruns are byte-identical."""
    Path(path).write_text(
        report.model_dump_json(exclude={"train_seconds"}, indent=2) + "\n", encoding="utf-8"
    )


def append_report_row(report: EvalReport, path: str | Path) -> None:
    path = Path(path)
    frame = pd.DataFrame([report.csv_row()])
    frame.to_csv(path, mode="a", header=not path.exists(), index=False, float_format="%.17g")


def write_timing_table(result: BenchmarkResult, path: str | Path) -> None:
    frame = pd.DataFrame(
        [row.model_dump(exclude={"epoch_seconds"}) for row in result.rows],
        columns=["architecture", "strategy", "num_nodes", "repeats", "mean_seconds", "std_seconds"],
    )
    frame["ratio_full_over_measured"] = frame["architecture"].map(result.ratios)
    frame.to_csv(path, index=False, float_format="%.6f")
