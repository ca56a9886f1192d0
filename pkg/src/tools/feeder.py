"""Physical feeder model: buses, multi-phase segments, switch states, sensor placement.

The feeder file is a small line-oriented format::

    bus <id> <phases> [substation]
    line <from> <to> <phases> <length>
    switch <from> <to> <phases> <closed|open>
    xfmr <from> <to> <phases>
    reg <from> <to> <phases>

``#`` starts a comment. Regulators and transformers are zero-length pass-through segments.
"""

import logging
import math
from collections.abc import Iterable
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Literal

import networkx as nx
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.tools.errors import FeederParseError, FeederSemanticError, SwitchOperationError
from src.tools.models import (
    Diagnostic,
    PhaseClass,
    SegmentKind,
    Severity,
    ValidationReport,
)
from src.utils.keys import natural_key, natural_sorted

logger = logging.getLogger(__name__)

PHASES = "ABC"
UNREACHABLE = math.inf

# Safety limits to prevent accidental resource exhaustion.
_MAX_FEEDER_BYTES = 4 * 1024 * 1024
_MAX_BUSES = 100_000

_KEYWORD_KIND = {
    "line": SegmentKind.LINE,
    "switch": SegmentKind.SWITCH,
    "xfmr": SegmentKind.TRANSFORMER,
    "reg": SegmentKind.REGULATOR,
}
_KIND_KEYWORD = {kind: keyword for keyword, kind in _KEYWORD_KIND.items()}


def _parse_phases(token: str) -> frozenset[str]:
    phases = frozenset(token.upper())
    if not phases or not phases <= set(PHASES) or len(phases) != len(token):
        raise ValueError(f"invalid phase string {token!r}")
    return phases


def phase_string(phases: Iterable[str]) -> str:
    present = set(phases)
    return "".join(p for p in PHASES if p in present)


class Bus(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str = Field(min_length=1)
    phases: frozenset[str]
    is_substation: bool = False

    @field_validator("phases")
    @classmethod
    def _phases_valid(cls, value: frozenset[str]) -> frozenset[str]:
        if not value:
            raise ValueError("bus must carry at least one phase")
        if not value <= set(PHASES):
            raise ValueError(f"unknown phases {sorted(value - set(PHASES))}")
        return value


class LineSegment(BaseModel):
    model_config = ConfigDict(frozen=True)

    from_bus: str
    to_bus: str
    phases: frozenset[str]
    length: float = Field(default=0.0, ge=0)
    kind: SegmentKind = SegmentKind.LINE

    @model_validator(mode="after")
    def _endpoints_differ(self) -> "LineSegment":
        if self.from_bus == self.to_bus:
            raise ValueError(f"segment {self.from_bus}-{self.to_bus} connects a bus to itself")
        if not self.phases or not self.phases <= set(PHASES):
            raise ValueError(f"segment {self.from_bus}-{self.to_bus} has invalid phases")
        return self

    @property
    def key(self) -> frozenset[str]:
        return frozenset((self.from_bus, self.to_bus))

    @property
    def label(self) -> str:
        return f"{self.from_bus}-{self.to_bus}"


class SwitchState(BaseModel):
    model_config = ConfigDict(frozen=True)

    segment: tuple[str, str]
    closed: bool

    @property
    def key(self) -> frozenset[str]:
        return frozenset(self.segment)


class SwitchOp(BaseModel):
    model_config = ConfigDict(frozen=True)

    segment: tuple[str, str]
    action: Literal["open", "close"]

    @property
    def key(self) -> frozenset[str]:
        return frozenset(self.segment)

    def inverse(self) -> "SwitchOp":
        return SwitchOp(segment=self.segment, action="close" if self.action == "open" else "open")


class FeederTopology(BaseModel):
    """Immutable feeder; hashable so derived graphs can be cached per topology.

    Construction checks references only. Segment phasing is enforced by ``make_topology``
    and reported by ``validate``.
    """

    model_config = ConfigDict(frozen=True)

    buses: tuple[Bus, ...]
    segments: tuple[LineSegment, ...]
    switch_states: tuple[SwitchState, ...] = ()

    @model_validator(mode="after")
    def _check_references(self) -> "FeederTopology":
        by_id: dict[str, Bus] = {}
        for bus in self.buses:
            if bus.id in by_id:
                raise FeederSemanticError(f"bus {bus.id} declared twice")
            by_id[bus.id] = bus
        substations = [b.id for b in self.buses if b.is_substation]
        if len(substations) != 1:
            raise FeederSemanticError(
                f"expected exactly one substation bus, found {len(substations)}"
            )
        switch_keys = set()
        for seg in self.segments:
            for end in (seg.from_bus, seg.to_bus):
                if end not in by_id:
                    raise FeederSemanticError(f"segment {seg.label} references unknown bus {end}")
            if seg.kind is SegmentKind.SWITCH:
                switch_keys.add(seg.key)
        seen = set()
        for state in self.switch_states:
            if state.key not in switch_keys:
                raise FeederSemanticError(
                    f"switch state for {'-'.join(state.segment)} does not name a switch segment"
                )
            if state.key in seen:
                raise FeederSemanticError(f"switch {'-'.join(state.segment)} has two states")
            seen.add(state.key)
        if seen != switch_keys:
            missing = sorted("-".join(sorted(k, key=natural_key)) for k in switch_keys - seen)
            raise FeederSemanticError(f"switches without a state: {', '.join(missing)}")
        return self

    def bus(self, bus_id: str) -> Bus:
        for bus in self.buses:
            if bus.id == bus_id:
                return bus
        raise KeyError(f"unknown bus {bus_id}")

    @property
    def bus_ids(self) -> list[str]:
        return [b.id for b in self.buses]

    @property
    def substation(self) -> Bus:
        return next(b for b in self.buses if b.is_substation)

    def is_closed(self, segment: LineSegment) -> bool:
        if segment.kind is not SegmentKind.SWITCH:
            return True
        for state in self.switch_states:
            if state.key == segment.key:
                return state.closed
        return False

    def closed_segments(self) -> list[LineSegment]:
        return [s for s in self.segments if self.is_closed(s)]

    def switch_closed(self, a: str, b: str) -> bool:
        key = frozenset((a, b))
        for state in self.switch_states:
            if state.key == key:
                return state.closed
        raise KeyError(f"no switch between {a} and {b}")


class PlacementEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    bus: str
    phase_class: PhaseClass


class SensorPlacement(BaseModel):
    model_config = ConfigDict(frozen=True)

    entries: tuple[PlacementEntry, ...]

    @field_validator("entries")
    @classmethod
    def _distinct(cls, value: tuple[PlacementEntry, ...]) -> tuple[PlacementEntry, ...]:
        buses = [e.bus for e in value]
        if len(set(buses)) != len(buses):
            raise ValueError("placement lists a bus more than once")
        return value

    @property
    def buses(self) -> list[str]:
        return [e.bus for e in self.entries]

    def phase_class(self, bus_id: str) -> PhaseClass:
        for entry in self.entries:
            if entry.bus == bus_id:
                return entry.phase_class
        raise KeyError(f"bus {bus_id} carries no sensor")

    def check_against(self, topology: FeederTopology) -> None:
        known = {b.id: b for b in topology.buses}
        for entry in self.entries:
            if entry.bus not in known:
                raise FeederSemanticError(f"sensor bus {entry.bus} not in topology")
            count = len(known[entry.bus].phases)
            if entry.phase_class.phase_count != count:
                raise FeederSemanticError(
                    f"sensor at {entry.bus} is {entry.phase_class.value} but the bus has "
                    f"{count} phase(s)"
                )


def phase_mismatches(topology: FeederTopology) -> list[tuple[LineSegment, frozenset[str]]]:
    """Segments carrying a phase one of their endpoints lacks, with the shared phase set."""
    by_id = {b.id: b for b in topology.buses}
    found = []
    for seg in topology.segments:
        shared = by_id[seg.from_bus].phases & by_id[seg.to_bus].phases
        if not seg.phases <= shared:
            found.append((seg, shared))
    return found


def make_topology(
    buses: Iterable[Bus],
    segments: Iterable[LineSegment],
    switch_states: Iterable[SwitchState] = (),
) -> FeederTopology:
    """Checked constructor: reference errors and phase mismatches raise FeederSemanticError."""
    try:
        topology = FeederTopology(
            buses=tuple(buses), segments=tuple(segments), switch_states=tuple(switch_states)
        )
    except ValidationError as exc:
        message = exc.errors()[0]["msg"].removeprefix("Value error, ")
        raise FeederSemanticError(message) from exc
    for seg, shared in phase_mismatches(topology):
        raise FeederSemanticError(
            f"segment {seg.label} phases {phase_string(seg.phases)} not present at "
            f"both ends ({phase_string(shared) or 'none'})"
        )
    return topology


def parse_feeder(text: str) -> FeederTopology:
    if len(text.encode("utf-8")) > _MAX_FEEDER_BYTES:
        raise FeederParseError(f"feeder file exceeds {_MAX_FEEDER_BYTES} bytes")
    buses: list[Bus] = []
    segments: list[LineSegment] = []
    states: list[SwitchState] = []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        record = tokens[0].lower()
        try:
            if record == "bus":
                if len(tokens) not in (3, 4) or (len(tokens) == 4 and tokens[3] != "substation"):
                    raise ValueError("expected: bus <id> <phases> [substation]")
                buses.append(
                    Bus(
                        id=tokens[1],
                        phases=_parse_phases(tokens[2]),
                        is_substation=len(tokens) == 4,
                    )
                )
            elif record == "line":
                if len(tokens) != 5:
                    raise ValueError("expected: line <from> <to> <phases> <length>")
                length = float(tokens[4])
                if not math.isfinite(length) or length < 0:
                    raise ValueError(f"invalid length {tokens[4]!r}")
                segments.append(
                    LineSegment(
                        from_bus=tokens[1],
                        to_bus=tokens[2],
                        phases=_parse_phases(tokens[3]),
                        length=length,
                    )
                )
            elif record == "switch":
                if len(tokens) != 5 or tokens[4] not in ("closed", "open"):
                    raise ValueError("expected: switch <from> <to> <phases> <closed|open>")
                segments.append(
                    LineSegment(
                        from_bus=tokens[1],
                        to_bus=tokens[2],
                        phases=_parse_phases(tokens[3]),
                        kind=SegmentKind.SWITCH,
                    )
                )
                closed = tokens[4] == "closed"
                states.append(SwitchState(segment=(tokens[1], tokens[2]), closed=closed))
            elif record in ("xfmr", "reg"):
                if len(tokens) != 4:
                    raise ValueError(f"expected: {record} <from> <to> <phases>")
                segments.append(
                    LineSegment(
                        from_bus=tokens[1],
                        to_bus=tokens[2],
                        phases=_parse_phases(tokens[3]),
                        kind=_KEYWORD_KIND[record],
                    )
                )
            else:
                raise ValueError(f"unknown record type {tokens[0]!r}")
        except ValueError as exc:
            raise FeederParseError(str(exc), line_number=number) from exc
        if len(buses) > _MAX_BUSES:
            raise FeederParseError(f"more than {_MAX_BUSES} buses", line_number=number)
    return make_topology(buses, segments, states)


def serialize_feeder(topology: FeederTopology) -> str:
    lines = []
    for bus in topology.buses:
        suffix = " substation" if bus.is_substation else ""
        lines.append(f"bus {bus.id} {phase_string(bus.phases)}{suffix}")
    for seg in topology.segments:
        phases = phase_string(seg.phases)
        if seg.kind is SegmentKind.LINE:
            lines.append(f"line {seg.from_bus} {seg.to_bus} {phases} {seg.length!r}")
        elif seg.kind is SegmentKind.SWITCH:
            state = "closed" if topology.is_closed(seg) else "open"
            lines.append(f"switch {seg.from_bus} {seg.to_bus} {phases} {state}")
        else:
            lines.append(f"{_KIND_KEYWORD[seg.kind]} {seg.from_bus} {seg.to_bus} {phases}")
    return "\n".join(lines) + "\n"


def load_feeder(path: str | Path) -> FeederTopology:
    return parse_feeder(Path(path).read_text(encoding="utf-8"))


def parse_placement(text: str) -> SensorPlacement:
    entries = []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if len(tokens) != 3 or tokens[0] != "pmu":
            raise FeederParseError("expected: pmu <bus> <phase_class>", line_number=number)
        try:
            entries.append(PlacementEntry(bus=tokens[1], phase_class=PhaseClass(tokens[2])))
        except ValueError as exc:
            message = f"unknown phase class {tokens[2]!r}"
            raise FeederParseError(message, line_number=number) from exc
    try:
        return SensorPlacement(entries=tuple(entries))
    except ValueError as exc:
        raise FeederSemanticError(str(exc)) from exc


def load_placement(path: str | Path) -> SensorPlacement:
    return parse_placement(Path(path).read_text(encoding="utf-8"))


def _data_text(name: str) -> str:
    return resources.files("src.resources").joinpath("data", name).read_text(encoding="utf-8")


@lru_cache(maxsize=1)
def default_feeder() -> FeederTopology:
    """The shipped IEEE 123-bus feeder in its default switch configuration."""
    return parse_feeder(_data_text("ieee123.feeder"))


@lru_cache(maxsize=1)
def default_placement() -> SensorPlacement:
    return parse_placement(_data_text("ieee123.placement"))


def parse_switch_op(text: str) -> SwitchOp:
    """Parse ``open:60-160`` or ``close:54-94``."""
    action, sep, segment = text.partition(":")
    ends = segment.split("-")
    if not sep or action not in ("open", "close") or len(ends) != 2 or not all(ends):
        raise SwitchOperationError(f"malformed switch operation {text!r}")
    return SwitchOp(segment=(ends[0], ends[1]), action=action)  # type: ignore[arg-type]


def green_switch_ops() -> list[SwitchOp]:
    return [parse_switch_op("open:60-160"), parse_switch_op("close:54-94")]


def apply_switch_ops(topology: FeederTopology, ops: Iterable[SwitchOp]) -> FeederTopology:
    states = {s.key: s for s in topology.switch_states}
    segments = {s.key: s for s in topology.segments}
    for op in ops:
        seg = segments.get(op.key)
        if seg is None:
            raise SwitchOperationError(f"unknown segment {'-'.join(op.segment)}")
        if seg.kind is not SegmentKind.SWITCH:
            raise SwitchOperationError(f"segment {seg.label} is a {seg.kind.value}, not a switch")
        states[op.key] = SwitchState(
            segment=states[op.key].segment, closed=op.action == "close"
        )
    ordered = tuple(states[s.key] for s in topology.switch_states)
    return topology.model_copy(update={"switch_states": ordered})


def configured_feeder(
    name: Literal["default", "green"] = "default", topology: FeederTopology | None = None
) -> FeederTopology:
    base = topology if topology is not None else default_feeder()
    if name == "default":
        return base
    if name == "green":
        return apply_switch_ops(base, green_switch_ops())
    raise SwitchOperationError(f"unknown configuration {name!r}")


@lru_cache(maxsize=64)
def closed_graph(topology: FeederTopology) -> nx.Graph:
    """Undirected graph of closed segments weighted by length; shared, do not mutate."""
    graph = nx.Graph()
    graph.add_nodes_from(topology.bus_ids)
    for seg in topology.closed_segments():
        u, v = seg.from_bus, seg.to_bus
        if graph.has_edge(u, v):
            graph[u][v]["length"] = min(graph[u][v]["length"], seg.length)
        else:
            graph.add_edge(u, v, length=seg.length)
    return graph


def electrical_distance(topology: FeederTopology, a: str, b: str) -> float:
    graph = closed_graph(topology)
    for bus in (a, b):
        if bus not in graph:
            raise KeyError(f"unknown bus {bus}")
    try:
        return float(nx.dijkstra_path_length(graph, a, b, weight="length"))
    except nx.NetworkXNoPath:
        return UNREACHABLE


@lru_cache(maxsize=256)
def distances_from(topology: FeederTopology, source: str) -> dict[str, float]:
    graph = closed_graph(topology)
    return dict(nx.single_source_dijkstra_path_length(graph, source, weight="length"))


def validate(topology: FeederTopology) -> ValidationReport:
    graph = closed_graph(topology)
    diagnostics: list[Diagnostic] = []

    for seg, _ in phase_mismatches(topology):
        diagnostics.append(
            Diagnostic(
                severity=Severity.ERROR,
                code="phase_mismatch",
                message=f"segment {seg.label} carries phases absent at an endpoint",
                buses=[seg.from_bus, seg.to_bus],
            )
        )

    reached = nx.node_connected_component(graph, topology.substation.id)
    orphans = natural_sorted(b for b in topology.bus_ids if b not in reached)
    if orphans:
        diagnostics.append(
            Diagnostic(
                severity=Severity.ERROR,
                code="orphan_bus",
                message=f"{len(orphans)} bus(es) not reachable from substation "
                f"{topology.substation.id} over closed segments",
                buses=orphans,
            )
        )

    cycles = nx.cycle_basis(graph)
    for cycle in cycles:
        diagnostics.append(
            Diagnostic(
                severity=Severity.WARNING,
                code="closed_loop",
                message=f"closed loop through {len(cycle)} buses",
                buses=natural_sorted(cycle),
            )
        )
    if not diagnostics:
        diagnostics.append(
            Diagnostic(
                severity=Severity.INFO,
                code="connected",
                message="substation reaches every bus; feeder is radial",
                buses=[topology.substation.id],
            )
        )
    report = ValidationReport(
        connected=not orphans,
        radial=not cycles,
        orphan_buses=orphans,
        diagnostics=diagnostics,
    )
    for diag in report.diagnostics:
        if diag.severity is Severity.WARNING:
            logger.warning("feeder validation: %s", diag.message)
    return report
