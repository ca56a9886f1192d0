"""Labeled window datasets: surrogate fault signatures, CSV ingestion, slicing, splitting.

Every run is 60 RMS samples at 1 ms per sensor phase with a 20-sample fault starting at
index 40. Sliding windows of 20 samples start at offsets 1..40, so each run contributes
20 fault-free windows (label 0) and 20 windows labeled with the fault position.
"""

import dataclasses
import json
import logging
import struct
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import networkx as nx
import numpy as np
import pandas as pd

from src.tools.errors import ConfigError, FeederSemanticError, SchemaError, ShapeError
from src.tools.feeder import (
    PHASES,
    FeederTopology,
    SensorPlacement,
    closed_graph,
    distances_from,
    serialize_feeder,
)
from src.tools.graph import SensorGraph
from src.tools.models import NUM_CLASSES, DatagenConfig, FaultType, SurrogateConfig
from src.utils.keys import config_fingerprint, natural_sorted

logger = logging.getLogger(__name__)

RUN_LENGTH = 60
FAULT_ONSET = 40
FAULT_DURATION = 20
WINDOW = 20
NUM_FEATURES = len(PHASES)
FIRST_WINDOW_START = 1
NUM_WINDOWS = 40

CSV_COLUMNS = (
    "run_id",
    "sensor_bus",
    "phase",
    "t_ms",
    "v_rms_pu",
    "fault_bus",
    "fault_type",
    "resistance_ohm",
)

CACHE_MAGIC = b"STGD"
CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sHIIII")

# Safety limits to prevent accidental resource exhaustion.
_MAX_RUNS = 1_000_000
_MAX_CSV_ROWS = 50_000_000


@dataclass(frozen=True)
class FaultScenario:
    location: str
    fault_type: FaultType
    resistance: float
    load_multipliers: Mapping[str, float] = field(default_factory=dict)

    def check(self, topology: FeederTopology) -> None:
        if self.resistance <= 0:
            raise ValueError("fault resistance must be positive")
        available = topology.bus(self.location).phases
        if not self.fault_type.phases <= available:
            raise FeederSemanticError(
                f"fault {self.fault_type.value} needs phases absent at bus {self.location}"
            )


@dataclass(frozen=True, eq=False)
class RunRecord:
    run_id: int
    scenario: FaultScenario
    traces: np.ndarray
    sensor_buses: tuple[str, ...]
    phase_mask: np.ndarray
    label: int
    fault_onset_index: int = FAULT_ONSET
    fault_duration: int = FAULT_DURATION


@dataclass(frozen=True, eq=False)
class WindowSample:
    features: np.ndarray
    label: int
    group_key: tuple[int, int]


@dataclass(frozen=True)
class NormStats:
    mean: tuple[float, ...]
    std: tuple[float, ...]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Stacked windows: features (M, N, F, S) float32, labels (M,) uint8, keys (M, 2)."""

    features: np.ndarray
    labels: np.ndarray
    group_keys: np.ndarray
    node_buses: tuple[str, ...]
    entry_mask: np.ndarray
    norm_stats: NormStats | None = None
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.features.ndim != 4:
            raise ShapeError(f"features must be (M, N, F, S), got {self.features.shape}")
        m, n, f, _ = self.features.shape
        if self.labels.shape != (m,) or self.group_keys.shape != (m, 2):
            raise ShapeError("labels and group keys must have one row per window")
        if len(self.node_buses) != n or self.entry_mask.shape != (n, f):
            raise ShapeError("node layout does not match the feature tensor")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __getitem__(self, index: int) -> WindowSample:
        key = self.group_keys[index]
        return WindowSample(
            self.features[index], int(self.labels[index]), (int(key[0]), int(key[1]))
        )

    @property
    def samples(self) -> list[WindowSample]:
        return [self[i] for i in range(len(self))]

    @property
    def num_nodes(self) -> int:
        return int(self.features.shape[1])

    @property
    def observed(self) -> np.ndarray:
        return self.entry_mask.any(axis=1)

    def subset(self, indices: Sequence[int] | np.ndarray) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return dataclasses.replace(
            self,
            features=self.features[idx],
            labels=self.labels[idx],
            group_keys=self.group_keys[idx],
        )


@dataclass(frozen=True, eq=False)
class SignatureContext:
    """Per-feeder quantities shared by every run: distances and load neighborhoods."""

    sensor_buses: tuple[str, ...]
    phase_mask: np.ndarray
    load_buses: tuple[str, ...]
    neighborhoods: tuple[np.ndarray, ...]
    fault_distance: Mapping[str, np.ndarray]


def signature_context(
    topology: FeederTopology,
    placement: SensorPlacement,
    fault_buses: Sequence[str],
    config: SurrogateConfig | None = None,
) -> SignatureContext:
    config = config or SurrogateConfig()
    placement.check_against(topology)
    sensors = tuple(placement.buses)
    mask = np.array(
        [[p in topology.bus(s).phases for p in PHASES] for s in sensors], dtype=bool
    ).reshape(len(sensors), NUM_FEATURES)
    load_buses = tuple(natural_sorted(topology.bus_ids))
    position = {b: i for i, b in enumerate(load_buses)}
    graph = closed_graph(topology)
    neighborhoods = tuple(
        np.array(
            sorted(
                position[b]
                for b in nx.single_source_shortest_path_length(graph, s, cutoff=config.rho_hops)
            ),
            dtype=np.int64,
        )
        for s in sensors
    )
    fault_distance = {}
    for bus in fault_buses:
        topology.bus(bus)
        reach = distances_from(topology, bus)
        fault_distance[bus] = np.array([reach.get(s, np.inf) for s in sensors], dtype=np.float64)
    return SignatureContext(sensors, mask, load_buses, neighborhoods, fault_distance)


def fault_factors(
    context: SignatureContext,
    location: str,
    fault_type: FaultType,
    resistance: float,
    config: SurrogateConfig | None = None,
) -> np.ndarray:
    """Noise-free multiplicative factor (N_obs, 3) applied during the fault interval."""
    config = config or SurrogateConfig()
    if resistance not in config.depth:
        raise ConfigError(f"no sag depth configured for {resistance} ohm")
    decay = np.exp(-config.beta * context.fault_distance[location])
    sag = 1.0 - config.depth[resistance] * decay
    swell = 1.0 + config.gamma * decay
    factors = np.ones((len(context.sensor_buses), NUM_FEATURES))
    for p, phase in enumerate(PHASES):
        if phase in fault_type.phases:
            factors[:, p] = sag
        elif fault_type.grounded:
            factors[:, p] = swell
    return factors


def sample_scenario(
    topology: FeederTopology,
    location: str,
    fault_type: FaultType,
    resistance: float,
    rng: np.random.Generator,
    config: SurrogateConfig | None = None,
) -> FaultScenario:
    config = config or SurrogateConfig()
    buses = natural_sorted(topology.bus_ids)
    draws = rng.uniform(config.load_low, config.load_high, size=len(buses))
    scenario = FaultScenario(
        location=location,
        fault_type=fault_type,
        resistance=resistance,
        load_multipliers=dict(zip(buses, draws.tolist(), strict=True)),
    )
    scenario.check(topology)
    return scenario


def generate_run(
    topology: FeederTopology,
    placement: SensorPlacement,
    scenario: FaultScenario,
    rng: np.random.Generator,
    config: SurrogateConfig | None = None,
    run_id: int = 0,
    label: int = 1,
    context: SignatureContext | None = None,
) -> RunRecord:
    config = config or SurrogateConfig()
    scenario.check(topology)
    if context is None or scenario.location not in context.fault_distance:
        context = signature_context(topology, placement, [scenario.location], config)
    n = len(context.sensor_buses)
    loads = np.array([scenario.load_multipliers.get(b, 1.0) for b in context.load_buses])
    mean_load = np.array([loads[idx].mean() for idx in context.neighborhoods])
    steady = config.v0 * (1.0 - config.kappa_load * (mean_load - 0.9))
    traces = np.repeat(steady[:, None, None], NUM_FEATURES, axis=1).repeat(RUN_LENGTH, axis=2)
    if config.sigma > 0:
        traces = traces + rng.normal(0.0, config.sigma, size=traces.shape)
    factors = fault_factors(
        context, scenario.location, scenario.fault_type, scenario.resistance, config
    )
    traces[:, :, FAULT_ONSET : FAULT_ONSET + FAULT_DURATION] *= factors[:, :, None]
    traces[~context.phase_mask] = 0.0
    return RunRecord(
        run_id=run_id,
        scenario=scenario,
        traces=traces,
        sensor_buses=context.sensor_buses,
        phase_mask=context.phase_mask,
        label=label,
    )


def slice_windows(run: RunRecord) -> list[WindowSample]:
    if (
        run.traces.ndim != 3
        or run.traces.shape[1:] != (NUM_FEATURES, RUN_LENGTH)
        or run.fault_onset_index != FAULT_ONSET
        or run.fault_duration != FAULT_DURATION
    ):
        raise ShapeError(
            f"malformed run {run.run_id}: traces {run.traces.shape}, onset "
            f"{run.fault_onset_index}, duration {run.fault_duration}"
        )
    windows = []
    for start in range(FIRST_WINDOW_START, FIRST_WINDOW_START + NUM_WINDOWS):
        in_fault = start + WINDOW - 1 >= run.fault_onset_index
        windows.append(
            WindowSample(
                features=run.traces[:, :, start : start + WINDOW].astype(np.float32),
                label=run.label if in_fault else 0,
                group_key=(run.run_id, start),
            )
        )
    return windows


def windows_from_runs(
    runs: Sequence[RunRecord], metadata: Mapping[str, str] | None = None
) -> Dataset:
    if not runs:
        raise ValueError("no runs to slice")
    layout = runs[0].sensor_buses
    for run in runs:
        if run.sensor_buses != layout:
            raise ShapeError(f"run {run.run_id} has a different sensor layout")
    windows = [w for run in runs for w in slice_windows(run)]
    return Dataset(
        features=np.stack([w.features for w in windows]),
        labels=np.array([w.label for w in windows], dtype=np.uint8),
        group_keys=np.array([w.group_key for w in windows], dtype=np.int64),
        node_buses=layout,
        entry_mask=runs[0].phase_mask.copy(),
        metadata=dict(metadata or {}),
    )


def _plan(config: DatagenConfig) -> list[tuple[str, FaultType | None]]:
    if config.type_assignment == "cross":
        return [
            (bus, fault_type)
            for bus in config.fault_buses
            for fault_type in config.fault_types
            for _ in range(config.runs_per_scenario)
        ]
    return [(bus, None) for bus in config.fault_buses for _ in range(config.runs_per_scenario)]


def generate_runs(
    config: DatagenConfig,
    topology: FeederTopology,
    placement: SensorPlacement,
    workers: int = 1,
) -> list[RunRecord]:
    plan = _plan(config)
    if len(plan) > _MAX_RUNS:
        raise ConfigError(f"{len(plan)} runs exceed the limit of {_MAX_RUNS}")
    context = signature_context(topology, placement, config.fault_buses, config.surrogate)
    children = np.random.SeedSequence(config.seed).spawn(len(plan))
    labels = {bus: k + 1 for k, bus in enumerate(config.fault_buses)}

    def one(i: int) -> RunRecord:
        rng = np.random.default_rng(children[i])
        bus, fault_type = plan[i]
        if fault_type is None:
            available = topology.bus(bus).phases
            choices = [t for t in config.fault_types if t.phases <= available]
            if not choices:
                raise FeederSemanticError(f"no configured fault type fits bus {bus}")
            fault_type = choices[int(rng.integers(len(choices)))]
        resistance = config.resistances[int(rng.integers(len(config.resistances)))]
        scenario = sample_scenario(topology, bus, fault_type, resistance, rng, config.surrogate)
        return generate_run(
            topology,
            placement,
            scenario,
            rng,
            config.surrogate,
            run_id=i,
            label=labels[bus],
            context=context,
        )

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        runs = list(pool.map(one, range(len(plan))))
    logger.info("generated %d runs over %d sensors", len(runs), len(placement.entries))
    return runs


def dataset_fingerprint(
    config: DatagenConfig, topology: FeederTopology, placement: SensorPlacement
) -> str:
    return config_fingerprint(config, serialize_feeder(topology), placement)


def build_dataset(
    config: DatagenConfig,
    topology: FeederTopology,
    placement: SensorPlacement,
    workers: int = 1,
) -> Dataset:
    runs = generate_runs(config, topology, placement, workers=workers)
    metadata = {
        "fingerprint": dataset_fingerprint(config, topology, placement),
        "seed": str(config.seed),
    }
    dataset = windows_from_runs(runs, metadata)
    histogram = class_histogram(dataset)
    logger.info(
        "dataset: %d windows, %.1f%% no-fault", len(dataset), 100.0 * histogram[0] / len(dataset)
    )
    return dataset


def class_histogram(ds: Dataset) -> np.ndarray:
    return np.bincount(ds.labels, minlength=NUM_CLASSES)


def fit_normalizer(train: Dataset) -> NormStats:
    if len(train) == 0:
        raise ValueError("cannot fit a normalizer on an empty dataset")
    means, stds = [], []
    for f in range(train.features.shape[2]):
        values = train.features[:, train.entry_mask[:, f], f, :].astype(np.float64)
        if values.size == 0:
            means.append(0.0)
            stds.append(1.0)
            continue
        mean = float(values.mean())
        std = float(values.std())
        if std <= 1e-12:
            logger.warning("feature %d has zero variance; clamping std to 1", f)
            std = 1.0
        means.append(mean)
        stds.append(std)
    return NormStats(tuple(means), tuple(stds))


def apply_normalizer(ds: Dataset, stats: NormStats) -> Dataset:
    mean = np.asarray(stats.mean, dtype=np.float64)[None, None, :, None]
    std = np.asarray(stats.std, dtype=np.float64)[None, None, :, None]
    scaled = (ds.features.astype(np.float64) - mean) / std
    scaled *= ds.entry_mask[None, :, :, None]
    return dataclasses.replace(ds, features=scaled.astype(np.float32), norm_stats=stats)


def split(
    ds: Dataset,
    ratios: Sequence[float] = (0.7, 0.15, 0.15),
    rng: np.random.Generator | int = 0,
    group_by: str = "window",
) -> tuple[Dataset, Dataset, Dataset]:
    """Partition by group key; every group lands in exactly one partition."""
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"invalid split ratios {tuple(ratios)}")
    if group_by not in ("window", "run"):
        raise ConfigError(f"unknown grouping {group_by!r}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    keys = ds.group_keys if group_by == "window" else ds.group_keys[:, :1]
    groups, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = rng.permutation(len(groups))
    n_train = int(round(ratios[0] * len(groups)))
    n_val = min(int(round(ratios[1] * len(groups))), len(groups) - n_train)
    part = np.empty(len(groups), dtype=np.int64)
    part[order[:n_train]] = 0
    part[order[n_train : n_train + n_val]] = 1
    part[order[n_train + n_val :]] = 2
    assignment = part[inverse]
    parts = tuple(ds.subset(np.flatnonzero(assignment == k)) for k in range(3))
    return parts  # type: ignore[return-value]


def align_to_graph(ds: Dataset, graph: SensorGraph) -> Dataset:
    """Re-index the node axis to the graph; buses without a sensor get zero features."""
    if ds.node_buses == graph.buses:
        return ds
    position = {bus: i for i, bus in enumerate(graph.buses)}
    missing = [b for b in ds.node_buses if b not in position]
    if missing:
        raise ShapeError(f"dataset buses {missing} are not nodes of the graph")
    observed = {graph.buses[i] for i in np.flatnonzero(graph.observed_mask)}
    if observed != set(ds.node_buses):
        raise ShapeError("graph observability does not match the dataset sensors")
    m, _, f, s = ds.features.shape
    features = np.zeros((m, graph.num_nodes, f, s), dtype=ds.features.dtype)
    mask = np.zeros((graph.num_nodes, f), dtype=bool)
    target = np.array([position[b] for b in ds.node_buses], dtype=np.int64)
    features[:, target] = ds.features
    mask[target] = ds.entry_mask
    return dataclasses.replace(ds, features=features, node_buses=graph.buses, entry_mask=mask)


def export_csv(runs: Sequence[RunRecord], path: str | Path) -> None:
    frames = []
    for run in runs:
        sensor_idx, phase_idx = np.nonzero(run.phase_mask)
        k = len(sensor_idx)
        values = run.traces[sensor_idx, phase_idx, :]
        frames.append(
            pd.DataFrame(
                {
                    "run_id": run.run_id,
                    "sensor_bus": np.repeat(np.array(run.sensor_buses)[sensor_idx], RUN_LENGTH),
                    "phase": np.repeat(np.array(list(PHASES))[phase_idx], RUN_LENGTH),
                    "t_ms": np.tile(np.arange(RUN_LENGTH), k),
                    "v_rms_pu": values.reshape(-1),
                    "fault_bus": run.scenario.location,
                    "fault_type": run.scenario.fault_type.value,
                    "resistance_ohm": run.scenario.resistance,
                }
            )
        )
    table = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=CSV_COLUMNS)
    table.to_csv(path, index=False, columns=list(CSV_COLUMNS), float_format="%.17g")


def _first_bad_row(bad: pd.Series) -> int:
    # +2: header line plus 1-based numbering
    return int(np.flatnonzero(bad.to_numpy())[0]) + 2


def import_csv(path: str | Path, fault_buses: Sequence[str] | None = None) -> Dataset:
    table = pd.read_csv(
        path,
        dtype={"sensor_bus": str, "fault_bus": str, "phase": str, "fault_type": str},
        float_precision="round_trip",
        keep_default_na=False,
    )
    for column in CSV_COLUMNS:
        if column not in table.columns:
            raise SchemaError(f"missing column {column!r}", column=column)
    if len(table) > _MAX_CSV_ROWS:
        raise SchemaError(f"more than {_MAX_CSV_ROWS} rows")

    for column in ("run_id", "t_ms", "v_rms_pu", "resistance_ohm"):
        numeric = pd.to_numeric(table[column], errors="coerce")
        bad = numeric.isna() | ~np.isfinite(numeric.astype(float))
        if bad.any():
            raise SchemaError(
                f"non-numeric {column}", row_number=_first_bad_row(bad), column=column
            )
        table[column] = numeric
    checks = {
        "phase": ~table["phase"].isin(list(PHASES)),
        "t_ms": (table["t_ms"] % 1 != 0) | (table["t_ms"] < 0) | (table["t_ms"] >= RUN_LENGTH),
        "run_id": (table["run_id"] % 1 != 0) | (table["run_id"] < 0),
        "fault_type": ~table["fault_type"].isin([t.value for t in FaultType]),
        "resistance_ohm": table["resistance_ohm"] <= 0,
    }
    for column, bad in checks.items():
        if bad.any():
            raise SchemaError(
                f"invalid {column}", row_number=_first_bad_row(bad), column=column
            )
    duplicated = table.duplicated(subset=["run_id", "sensor_bus", "phase", "t_ms"])
    if duplicated.any():
        raise SchemaError("duplicate sample", row_number=_first_bad_row(duplicated))

    sensors = tuple(pd.unique(table["sensor_bus"]))
    sensor_pos = {b: i for i, b in enumerate(sensors)}
    mask = np.zeros((len(sensors), NUM_FEATURES), dtype=bool)
    s_idx = table["sensor_bus"].map(sensor_pos).to_numpy()
    p_idx = table["phase"].map({p: i for i, p in enumerate(PHASES)}).to_numpy()
    mask[s_idx, p_idx] = True

    if fault_buses is None:
        fault_buses = natural_sorted(pd.unique(table["fault_bus"]))
    labels = {bus: k + 1 for k, bus in enumerate(fault_buses)}

    runs = []
    for run_id, rows in table.groupby("run_id", sort=False):
        meta = rows[["fault_bus", "fault_type", "resistance_ohm"]]
        differs = (meta != meta.iloc[0]).any(axis=1).to_numpy()
        if differs.any():
            first = int(rows.index[differs][0]) + 2
            raise SchemaError(f"run {run_id} mixes fault descriptions", row_number=first)
        bus, fault_type, resistance = meta.iloc[0]
        if bus not in labels:
            raise SchemaError(
                f"fault bus {bus!r} is not a known fault position", column="fault_bus"
            )
        traces = np.zeros((len(sensors), NUM_FEATURES, RUN_LENGTH), dtype=np.float64)
        idx = rows.index.to_numpy()
        traces[s_idx[idx], p_idx[idx], rows["t_ms"].to_numpy().astype(np.int64)] = rows[
            "v_rms_pu"
        ].to_numpy(dtype=np.float64)
        scenario = FaultScenario(bus, FaultType(fault_type), float(resistance))
        runs.append(
            RunRecord(
                run_id=int(run_id),
                scenario=scenario,
                traces=traces,
                sensor_buses=sensors,
                phase_mask=mask,
                label=labels[bus],
            )
        )
    return windows_from_runs(runs, {"source": Path(path).name})


def save_cache(ds: Dataset, path: str | Path) -> None:
    m, n, f, s = ds.features.shape
    meta = {
        "node_buses": list(ds.node_buses),
        "entry_mask": ds.entry_mask.astype(int).tolist(),
        "norm_stats": dataclasses.asdict(ds.norm_stats) if ds.norm_stats else None,
        "metadata": dict(ds.metadata),
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CACHE_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, n, f, s, m))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(ds.features, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(ds.labels, dtype=np.uint8).tobytes())
        fh.write(np.ascontiguousarray(ds.group_keys, dtype="<i8").tobytes())


def load_cache(path: str | Path) -> Dataset:
    data = Path(path).read_bytes()
    if len(data) < _CACHE_HEADER.size + 4:
        raise SchemaError("dataset cache is truncated")
    magic, version, n, f, s, m = _CACHE_HEADER.unpack_from(data, 0)
    if magic != CACHE_MAGIC:
        raise SchemaError("not a dataset cache")
    if version != CACHE_VERSION:
        raise SchemaError(f"unsupported dataset cache version {version}")
    offset = _CACHE_HEADER.size
    (blob_len,) = struct.unpack_from("<I", data, offset)
    offset += 4
    meta = json.loads(data[offset : offset + blob_len].decode("utf-8"))
    offset += blob_len
    sizes = (m * n * f * s * 4, m, m * 2 * 8)
    if len(data) != offset + sum(sizes):
        raise SchemaError("dataset cache size does not match its header")
    features = np.frombuffer(data, dtype="<f4", count=m * n * f * s, offset=offset)
    offset += sizes[0]
    labels = np.frombuffer(data, dtype=np.uint8, count=m, offset=offset)
    offset += sizes[1]
    keys = np.frombuffer(data, dtype="<i8", count=m * 2, offset=offset)
    stats = meta["norm_stats"]
    return Dataset(
        features=features.reshape(m, n, f, s).astype(np.float32),
        labels=labels.copy(),
        group_keys=keys.reshape(m, 2).astype(np.int64),
        node_buses=tuple(meta["node_buses"]),
        entry_mask=np.array(meta["entry_mask"], dtype=bool).reshape(n, f),
        norm_stats=NormStats(tuple(stats["mean"]), tuple(stats["std"])) if stats else None,
        metadata=meta["metadata"],
    )
