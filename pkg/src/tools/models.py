from enum import StrEnum
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.utils.keys import config_fingerprint

NUM_CLASSES = 26

# Fault positions; class label k (1..25) is the k-th entry.
FAULT_POSITIONS: tuple[str, ...] = (
    "7", "13", "18", "21", "25", "29", "35", "42", "47", "51", "53", "55", "57",
    "62", "65", "72", "80", "83", "86", "89", "93", "97", "99", "101", "108",
)  # fmt: skip

FAULT_RESISTANCES: tuple[float, ...] = (0.1, 1.0, 10.0)


class PhaseClass(StrEnum):
    THREE_PHASE = "three_phase"
    TWO_PHASE = "two_phase"
    SINGLE_PHASE = "single_phase"

    @property
    def phase_count(self) -> int:
        return {"three_phase": 3, "two_phase": 2, "single_phase": 1}[self.value]

    @classmethod
    def from_count(cls, count: int) -> "PhaseClass":
        for member in cls:
            if member.phase_count == count:
                return member
        raise ValueError(f"no phase class has {count} phases")


class SegmentKind(StrEnum):
    LINE = "line"
    SWITCH = "switch"
    REGULATOR = "regulator"
    TRANSFORMER = "transformer"


class FaultType(StrEnum):
    AG = "AG"
    BG = "BG"
    CG = "CG"
    AB = "AB"
    BC = "BC"
    CA = "CA"
    ABG = "ABG"
    BCG = "BCG"
    CAG = "CAG"
    ABC = "ABC"
    ABCG = "ABCG"

    @property
    def phases(self) -> frozenset[str]:
        return frozenset(self.value.rstrip("G"))

    @property
    def grounded(self) -> bool:
        return self.value.endswith("G")


class GraphStrategy(StrEnum):
    MEASURED_ONLY = "measured-only"
    FULL_TOPOLOGY = "full"


class Architecture(StrEnum):
    GRU = "gru"
    RGCN = "rgcn"
    RSAGE_MEAN = "rsage-mean"
    RSAGE_MAX = "rsage-max"
    RGATV2 = "rgatv2"

    @property
    def is_baseline(self) -> bool:
        return self is Architecture.GRU


class Severity(StrEnum):
    INFO = "info"
    WARNING = "warning"
    ERROR = "error"


class Diagnostic(BaseModel):
    severity: Severity
    code: Literal["orphan_bus", "closed_loop", "phase_mismatch", "connected"]
    message: str
    buses: list[str] = Field(default_factory=list)


class ValidationReport(BaseModel):
    connected: bool
    radial: bool
    orphan_buses: list[str] = Field(default_factory=list)
    diagnostics: list[Diagnostic] = Field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not any(d.severity is Severity.ERROR for d in self.diagnostics)

    @property
    def has_loops(self) -> bool:
        return any(d.code == "closed_loop" for d in self.diagnostics)


class SurrogateConfig(BaseModel):
    """Constants of the surrogate fault-signature generator.

    Pre-fault voltage at a sensor is ``v0 * (1 - kappa_load * (mean_load - 0.9))`` plus
    Gaussian noise; the faulted phases sag by ``depth[R_f] * exp(-beta * d)`` during the
    fault interval and grounded faults swell the healthy phases by ``gamma * exp(-beta * d)``.
    """

    model_config = ConfigDict(frozen=True)

    v0: float = Field(default=1.0, gt=0)
    kappa_load: float = Field(default=0.05, ge=0)
    sigma: float = Field(default=0.002, ge=0)
    beta: float = Field(default=0.5, ge=0)
    rho_hops: int = Field(default=2, ge=0)
    depth: dict[float, float] = Field(default_factory=lambda: {0.1: 0.6, 1.0: 0.35, 10.0: 0.12})
    gamma: float = Field(default=0.03, ge=0)
    load_low: float = Field(default=0.5, gt=0)
    load_high: float = Field(default=1.3, gt=0)

    @field_validator("depth")
    @classmethod
    def _depth_decreasing(cls, value: dict[float, float]) -> dict[float, float]:
        if not value:
            raise ValueError("depth table is empty")
        ordered = sorted(value.items())
        for resistance, depth in ordered:
            if resistance <= 0:
                raise ValueError("fault resistance must be positive")
            if not 0 <= depth < 1:
                raise ValueError("sag depth must lie in [0, 1)")
        depths = [d for _, d in ordered]
        if any(a <= b for a, b in zip(depths, depths[1:], strict=False)):
            raise ValueError("sag depth must decrease strictly with fault resistance")
        return value

    @model_validator(mode="after")
    def _load_range(self) -> "SurrogateConfig":
        if self.load_low > self.load_high:
            raise ValueError("load_low exceeds load_high")
        return self


class DatagenConfig(BaseModel):
    fault_buses: list[str] = Field(default_factory=lambda: list(FAULT_POSITIONS), min_length=1)
    fault_types: list[FaultType] = Field(default_factory=lambda: list(FaultType), min_length=1)
    resistances: list[float] = Field(default_factory=lambda: list(FAULT_RESISTANCES), min_length=1)
    runs_per_scenario: int = Field(default=1, ge=1)
    type_assignment: Literal["cross", "sampled"] = "cross"
    seed: int = 0
    split_ratios: tuple[float, float, float] = (0.7, 0.15, 0.15)
    split_group_by: Literal["window", "run"] = "window"
    surrogate: SurrogateConfig = Field(default_factory=SurrogateConfig)

    @field_validator("fault_buses")
    @classmethod
    def _distinct_buses(cls, value: list[str]) -> list[str]:
        if len(set(value)) != len(value):
            raise ValueError("fault buses must be distinct")
        if len(value) > NUM_CLASSES - 1:
            raise ValueError(f"at most {NUM_CLASSES - 1} fault positions fit the label space")
        return value

    @model_validator(mode="after")
    def _resistances_known(self) -> "DatagenConfig":
        missing = [r for r in self.resistances if r not in self.surrogate.depth]
        if missing:
            raise ValueError(f"no sag depth configured for resistances {missing}")
        if abs(sum(self.split_ratios) - 1.0) > 1e-9 or min(self.split_ratios) < 0:
            raise ValueError("split ratios must be nonnegative and sum to 1")
        return self

    def fingerprint(self) -> str:
        return config_fingerprint(self)


class ModelConfig(BaseModel):
    architecture: Architecture
    input_dim: int = Field(default=3, ge=1)
    gru_hidden: int = Field(default=128, ge=1)
    gnn_hidden: int = Field(default=64, ge=1)
    gnn_layers: int = Field(default=2, ge=1)
    heads: int = Field(default=4, ge=1)
    leaky_slope: float = Field(default=0.2, ge=0)
    num_classes: int = Field(default=NUM_CLASSES, ge=2)
    dropout: float = Field(default=0.35, ge=0, lt=1)
    attention_dropout: float = Field(default=0.3, ge=0, lt=1)

    @model_validator(mode="after")
    def _heads_divide(self) -> "ModelConfig":
        if self.architecture is Architecture.RGATV2 and self.gnn_hidden % self.heads:
            raise ValueError("gnn_hidden must be divisible by the number of attention heads")
        return self


class TrainConfig(BaseModel):
    architecture: Architecture = Architecture.RGCN
    strategy: GraphStrategy = GraphStrategy.MEASURED_ONLY
    epochs: int | None = Field(default=None, ge=0)
    batch_size: int = Field(default=32, gt=0)
    learning_rate: float = Field(default=1e-3, gt=0)
    weight_decay: float = Field(default=1e-4, ge=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)
    dropout: float = Field(default=0.35, ge=0, lt=1)
    attention_dropout: float = Field(default=0.3, ge=0, lt=1)
    gru_hidden: int = Field(default=128, ge=1)
    gnn_hidden: int = Field(default=64, ge=1)
    gnn_layers: int = Field(default=2, ge=1)
    heads: int = Field(default=4, ge=1)
    dtype: Literal["float32", "float64"] = "float32"
    seed: int = 0

    @property
    def resolved_epochs(self) -> int:
        if self.epochs is not None:
            return self.epochs
        return 11 if self.architecture.is_baseline else 15

    def model_config_for(self, input_dim: int = 3) -> ModelConfig:
        return ModelConfig(
            architecture=self.architecture,
            input_dim=input_dim,
            gru_hidden=self.gru_hidden,
            gnn_hidden=self.gnn_hidden,
            gnn_layers=self.gnn_layers,
            heads=self.heads,
            dropout=self.dropout,
            attention_dropout=self.attention_dropout,
        )


class LossRecord(BaseModel):
    epoch: int
    step: int
    loss: float


class EvalReport(BaseModel):
    run_id: str = ""
    architecture: str = ""
    strategy: str = ""
    fingerprint: str = ""
    sample_count: int = Field(ge=0)
    macro_f1: float = Field(ge=0, le=1)
    weighted_f1: float = Field(ge=0, le=1)
    node_macro_f1: float | None = None
    per_class_f1: list[float]
    support: list[int]
    confusion: list[list[int]]
    train_seconds: float | None = None

    def csv_row(self) -> dict[str, object]:
        row: dict[str, object] = {
            "run_id": self.run_id,
            "arch": self.architecture,
            "topology": self.strategy,
            "fingerprint": self.fingerprint,
            "macro_f1": self.macro_f1,
        }
        for k, score in enumerate(self.per_class_f1):
            row[f"f1_{k}"] = score
        row["seconds"] = self.train_seconds
        return row


class SeedSweepResult(BaseModel):
    architecture: str
    strategy: str
    seeds: list[int]
    scores: list[float]
    mean: float
    half_width: float = Field(ge=0)
    level: float = 0.9
    reports: list[EvalReport] = Field(default_factory=list)


class TimingRow(BaseModel):
    architecture: str
    strategy: str
    num_nodes: int
    repeats: int
    mean_seconds: float
    std_seconds: float
    epoch_seconds: list[float] = Field(default_factory=list)


class BenchmarkResult(BaseModel):
    rows: list[TimingRow]
    ratios: dict[str, float]


class ExperimentManifest(BaseModel):
    feeder: Path | None = None
    placement: Path | None = None
    configurations: list[Literal["default", "green"]] = Field(
        default_factory=lambda: ["default", "green"], min_length=1
    )
    switch_ops: list[str] = Field(default_factory=list)
    datagen: DatagenConfig = Field(default_factory=DatagenConfig)
    train: list[TrainConfig] = Field(
        default_factory=lambda: [TrainConfig(architecture=a) for a in Architecture]
    )
    strategies: list[GraphStrategy] = Field(default_factory=lambda: list(GraphStrategy))
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4], min_length=1)
    output_dir: Path = Path("artifacts")
    seed: int = 0

    def fingerprint(self) -> str:
        return config_fingerprint(self)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentManifest":
        path = Path(path)
        manifest = cls.model_validate_json(path.read_text(encoding="utf-8"))
        base = path.parent
        updates: dict[str, Path] = {}
        for name in ("feeder", "placement"):
            value = getattr(manifest, name)
            if value is not None and not value.is_absolute():
                updates[name] = base / value
        if not manifest.output_dir.is_absolute():
            updates["output_dir"] = base / manifest.output_dir
        manifest = manifest.model_copy(update=updates)
        for name in ("feeder", "placement"):
            value = getattr(manifest, name)
            if value is not None and not value.exists():
                raise FileNotFoundError(f"{name} file not found: {value}")
        return manifest
