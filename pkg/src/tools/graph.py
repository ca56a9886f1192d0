"""GNN graph construction: the measured-only graph and the full-topology graph.

The measured-only builder connects micro-PMU buses so that sensor edges mirror direct
electrical adjacency. A bus ``m`` is *accessible* from sensor ``x`` when a closed path from
``x`` reaches ``m`` without passing through any other sensor bus.
"""

import logging
from collections import deque
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from functools import cached_property

import networkx as nx
import numpy as np
from networkx.utils import UnionFind

from src.tools.errors import GraphConstructionError
from src.tools.feeder import FeederTopology, SensorPlacement, closed_graph, validate
from src.tools.models import GraphStrategy, PhaseClass, Severity
from src.utils.keys import natural_key, natural_sorted

logger = logging.getLogger(__name__)

# Distances are compared after rounding so float noise never reorders equal lengths.
_DISTANCE_DECIMALS = 9


@dataclass(frozen=True)
class GraphNode:
    index: int
    bus: str
    phase_class: PhaseClass
    observed: bool


@dataclass(frozen=True)
class SensorGraph:
    nodes: tuple[GraphNode, ...]
    edges: frozenset[tuple[int, int]]
    strategy: GraphStrategy | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        for position, node in enumerate(self.nodes):
            if node.index != position:
                raise GraphConstructionError(
                    f"node {node.bus} has index {node.index}, expected {position}"
                )
        n = len(self.nodes)
        for i, j in self.edges:
            if not (0 <= i < j < n):
                raise GraphConstructionError(f"edge ({i}, {j}) is not an ordered index pair")

    @classmethod
    def from_edges(
        cls,
        num_nodes: int,
        edges: Iterable[tuple[int, int]],
        observed: Sequence[bool] | None = None,
        strategy: GraphStrategy | None = None,
    ) -> "SensorGraph":
        """Anonymous graph with buses named by index; handy for toy models."""
        flags = list(observed) if observed is not None else [True] * num_nodes
        nodes = tuple(
            GraphNode(i, str(i), PhaseClass.THREE_PHASE, bool(flags[i])) for i in range(num_nodes)
        )
        pairs = frozenset((min(i, j), max(i, j)) for i, j in edges if i != j)
        return cls(nodes=nodes, edges=pairs, strategy=strategy)

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def buses(self) -> tuple[str, ...]:
        return tuple(n.bus for n in self.nodes)

    @cached_property
    def observed_mask(self) -> np.ndarray:
        mask = np.array([n.observed for n in self.nodes], dtype=bool)
        mask.flags.writeable = False
        return mask

    @cached_property
    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes), dtype=np.uint8)
        for i, j in self.edges:
            a[i, j] = a[j, i] = 1
        a.flags.writeable = False
        return a

    @property
    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1).astype(np.int64)

    def edge_list(self) -> list[tuple[int, int]]:
        return sorted(self.edges)

    def bus_edges(self) -> set[frozenset[str]]:
        return {frozenset((self.nodes[i].bus, self.nodes[j].bus)) for i, j in self.edges}

    def index_of(self, bus: str) -> int:
        for node in self.nodes:
            if node.bus == bus:
                return node.index
        raise KeyError(f"bus {bus} is not a graph node")

    def to_networkx(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(self.num_nodes))
        g.add_edges_from(self.edges)
        return g

    def is_connected(self) -> bool:
        return self.num_nodes > 0 and nx.is_connected(self.to_networkx())


def _require_valid(topology: FeederTopology, placement: SensorPlacement) -> None:
    report = validate(topology)
    if not report.ok:
        first = next(d for d in report.diagnostics if d.severity is Severity.ERROR)
        bus = first.buses[0] if first.buses else None
        raise GraphConstructionError(f"topology failed validation: {first.message}", bus=bus)
    placement.check_against(topology)


def _bfs_order(graph: nx.Graph, source: str, targets: set[str]) -> list[str]:
    """Targets in breadth-first order from ``source``; neighbors expanded in natural order."""
    order: list[str] = []
    seen = {source}
    queue = deque([source])
    while queue:
        bus = queue.popleft()
        if bus in targets:
            order.append(bus)
        for nxt in natural_sorted(graph.neighbors(bus)):
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    order.extend(natural_sorted(targets - set(order)))
    return order


def _accessible(graph: nx.Graph, source: str, sensors: set[str]) -> dict[str, tuple[float, str]]:
    """Sensors reachable from ``source`` without crossing another sensor.

    Returns ``{sensor: (distance, first_hop)}`` where ``first_hop`` is the neighbor of
    ``source`` the shortest such path leaves through.
    """
    blocked = sensors - {source}
    open_graph = graph.subgraph(b for b in graph.nodes if b not in blocked)
    dist, paths = nx.single_source_dijkstra(open_graph, source, weight="length")
    found: dict[str, tuple[float, str]] = {}
    for bus, d in dist.items():
        for nxt in graph.neighbors(bus):
            if nxt not in blocked:
                continue
            total = d + graph[bus][nxt]["length"]
            hop = paths[bus][1] if bus != source else nxt
            best = found.get(nxt)
            rank = (round(total, _DISTANCE_DECIMALS), natural_key(hop))
            if best is None or rank < (round(best[0], _DISTANCE_DECIMALS), natural_key(best[1])):
                found[nxt] = (total, hop)
    return found


def _by_distance(candidates: dict[str, tuple[float, str]]) -> list[str]:
    return sorted(
        candidates, key=lambda m: (round(candidates[m][0], _DISTANCE_DECIMALS), natural_key(m))
    )


def build_measured_only(topology: FeederTopology, placement: SensorPlacement) -> SensorGraph:
    _require_valid(topology, placement)
    graph = closed_graph(topology)
    sensors = placement.buses
    sensor_set = set(sensors)
    three = {e.bus for e in placement.entries if e.phase_class is PhaseClass.THREE_PHASE}
    reach = {s: _accessible(graph, s, sensor_set) for s in sensors}
    edges: set[frozenset[str]] = set()

    # Three-phase backbone: nearest accessible first, never closing a loop.
    forest = UnionFind(sensors)
    for v in _bfs_order(graph, topology.substation.id, three):
        candidates = {m: reach[v][m] for m in reach[v] if m in three}
        for m in _by_distance(candidates):
            if forest[v] == forest[m]:
                logger.debug("skip %s-%s: closes a loop", v, m)
                continue
            forest.union(v, m)
            edges.add(frozenset((v, m)))
            logger.debug("edge %s-%s (%.4f)", v, m, candidates[m][0])

    # Single- and two-phase sensors hang off the backbone.
    for u in natural_sorted(sensor_set - three):
        acc3 = {m: reach[u][m] for m in reach[u] if m in three}
        if acc3:
            closest_per_branch: dict[str, str] = {}
            for m in _by_distance(acc3):
                closest_per_branch.setdefault(acc3[m][1], m)
            ranked = _by_distance({m: acc3[m] for m in closest_per_branch.values()})
            chosen = ranked[:2] if len(ranked) >= 2 else ranked[:1]
        else:
            others = {m: reach[u][m] for m in reach[u] if m not in three}
            chosen = _by_distance(others)[:1]
        for m in chosen:
            edges.add(frozenset((u, m)))
            logger.debug("edge %s-%s (lateral)", u, m)

    index = {bus: i for i, bus in enumerate(sensors)}
    nodes = tuple(
        GraphNode(index[e.bus], e.bus, e.phase_class, True) for e in placement.entries
    )
    pairs = frozenset(
        (min(index[a], index[b]), max(index[a], index[b])) for a, b in map(tuple, edges)
    )
    result = SensorGraph(nodes=nodes, edges=pairs, strategy=GraphStrategy.MEASURED_ONLY)
    _require_connected(result)
    return result


def _require_connected(graph: SensorGraph) -> None:
    if graph.num_nodes == 0:
        raise GraphConstructionError("placement is empty")
    components = list(nx.connected_components(graph.to_networkx()))
    if len(components) == 1:
        return
    main = next(c for c in components if 0 in c)
    stray = natural_sorted(graph.nodes[i].bus for c in components if c is not main for i in c)
    raise GraphConstructionError(
        f"sensor {stray[0]} is not connected to sensor {graph.nodes[0].bus}", bus=stray[0]
    )


def build_full_topology(topology: FeederTopology, placement: SensorPlacement) -> SensorGraph:
    _require_valid(topology, placement)
    observed = set(placement.buses)
    buses = natural_sorted(topology.bus_ids)
    index = {bus: i for i, bus in enumerate(buses)}
    nodes = tuple(
        GraphNode(
            i,
            bus,
            PhaseClass.from_count(len(topology.bus(bus).phases)),
            bus in observed,
        )
        for i, bus in enumerate(buses)
    )
    pairs = frozenset(
        (min(index[s.from_bus], index[s.to_bus]), max(index[s.from_bus], index[s.to_bus]))
        for s in topology.closed_segments()
    )
    result = SensorGraph(nodes=nodes, edges=pairs, strategy=GraphStrategy.FULL_TOPOLOGY)
    _require_connected(result)
    return result


def build_graph(
    strategy: GraphStrategy, topology: FeederTopology, placement: SensorPlacement
) -> SensorGraph:
    if strategy is GraphStrategy.MEASURED_ONLY:
        return build_measured_only(topology, placement)
    return build_full_topology(topology, placement)


def normalized_adjacency(graph: SensorGraph) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2 with degrees counted on A + I."""
    a_hat = graph.adjacency.astype(np.float64) + np.eye(graph.num_nodes)
    degree = a_hat.sum(axis=1)
    return a_hat / np.sqrt(np.outer(degree, degree))


def neighbor_sets(graph: SensorGraph, v: int) -> list[int]:
    if not 0 <= v < graph.num_nodes:
        raise KeyError(f"unknown node {v}")
    row = graph.adjacency[v]
    return [v] + [int(u) for u in np.flatnonzero(row)]


def neighbor_table(graph: SensorGraph) -> tuple[np.ndarray, np.ndarray]:
    """Padded neighborhoods: index (N, K) and validity mask (N, K); padding repeats v."""
    sets = [neighbor_sets(graph, v) for v in range(graph.num_nodes)]
    width = max(len(s) for s in sets)
    index = np.empty((graph.num_nodes, width), dtype=np.int64)
    mask = np.zeros((graph.num_nodes, width), dtype=bool)
    for v, members in enumerate(sets):
        index[v, : len(members)] = members
        index[v, len(members) :] = v
        mask[v, : len(members)] = True
    return index, mask


def permute_graph(graph: SensorGraph, perm: Sequence[int]) -> SensorGraph:
    """Reorder nodes so that new node k is old node ``perm[k]``."""
    perm = list(perm)
    if sorted(perm) != list(range(graph.num_nodes)):
        raise ValueError("perm is not a permutation of the node indices")
    new_index = {old: new for new, old in enumerate(perm)}
    nodes = tuple(
        GraphNode(k, graph.nodes[old].bus, graph.nodes[old].phase_class, graph.nodes[old].observed)
        for k, old in enumerate(perm)
    )
    edges = frozenset(
        (min(new_index[i], new_index[j]), max(new_index[i], new_index[j])) for i, j in graph.edges
    )
    return SensorGraph(nodes=nodes, edges=edges, strategy=graph.strategy)


def export_graph(graph: SensorGraph) -> str:
    lines = []
    if graph.strategy is not None:
        lines.append(f"# strategy {graph.strategy.value}")
    for node in graph.nodes:
        lines.append(f"node {node.index} {node.bus} {node.phase_class.value} {int(node.observed)}")
    for i, j in graph.edge_list():
        lines.append(f"edge {i} {j}")
    return "\n".join(lines) + "\n"


def parse_graph(text: str) -> SensorGraph:
    nodes: list[GraphNode] = []
    edges: list[tuple[int, int]] = []
    strategy: GraphStrategy | None = None
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("# strategy "):
            strategy = GraphStrategy(line.split()[-1])
            continue
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        try:
            if tokens[0] == "node" and len(tokens) == 5:
                nodes.append(
                    GraphNode(int(tokens[1]), tokens[2], PhaseClass(tokens[3]), tokens[4] == "1")
                )
            elif tokens[0] == "edge" and len(tokens) == 3:
                i, j = int(tokens[1]), int(tokens[2])
                edges.append((min(i, j), max(i, j)))
            else:
                raise ValueError(f"unrecognized record {tokens[0]!r}")
        except ValueError as exc:
            raise GraphConstructionError(f"line {number}: {exc}") from exc
    return SensorGraph(nodes=tuple(nodes), edges=frozenset(edges), strategy=strategy)


def to_dot(graph: SensorGraph, name: str = "feeder") -> str:
    lines = [f"graph {name} {{", "  node [shape=circle, fontsize=10];"]
    for node in graph.nodes:
        style = "filled" if node.observed else "solid"
        fill = {"three_phase": "tomato", "two_phase": "gold", "single_phase": "skyblue"}[
            node.phase_class.value
        ]
        attrs = f'label="{node.bus}", style={style}'
        if node.observed:
            attrs += f", fillcolor={fill}"
        lines.append(f'  n{node.index} [{attrs}];')
    for i, j in graph.edge_list():
        lines.append(f"  n{i} -- n{j};")
    lines.append("}")
    return "\n".join(lines) + "\n"
