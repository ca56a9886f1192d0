import os
import sys
from collections.abc import Callable
from typing import Any

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))
from mcp.server.fastmcp import FastMCP  # noqa: E402

from src.prompts.analyze import register_prompts  # noqa: E402
from src.resources.feeders import register_feeders  # noqa: E402
from src.tools.datagen import (  # noqa: E402
    NormStats,
    align_to_graph,
    apply_normalizer,
    fault_factors,
    load_cache,
    signature_context,
)
from src.tools.feeder import (  # noqa: E402
    FeederTopology,
    apply_switch_ops,
    configured_feeder,
    default_placement,
    electrical_distance,
    parse_feeder,
    parse_switch_op,
    validate,
)
from src.tools.graph import build_graph, export_graph  # noqa: E402
from src.tools.models import FaultType, GraphStrategy, SurrogateConfig  # noqa: E402
from src.tools.stgnn import load_model  # noqa: E402
from src.tools.trainer import evaluate  # noqa: E402

mcp = FastMCP("Feeder STGNN")
register_feeders(mcp)
register_prompts(mcp)

# Tool auto-registration: wrappers are decorated with @_register_tool and then
# attached to the MCP instance in a single loop at the bottom of the file.
_tool_registry: list[Callable[..., Any]] = []

# Safety limits to prevent accidental resource exhaustion.
_MAX_FEEDER_TEXT = 4 * 1024 * 1024
_MAX_SWITCH_OPS = 64


def _register_tool(fn: Callable[..., Any]) -> Callable[..., Any]:
    _tool_registry.append(fn)
    return fn


def _feeder(
    configuration: str, feeder_text: str | None = None, switch_ops: list[str] | None = None
) -> FeederTopology:
    if feeder_text is not None and len(feeder_text) > _MAX_FEEDER_TEXT:
        raise ValueError("feeder text too large")
    if switch_ops and len(switch_ops) > _MAX_SWITCH_OPS:
        raise ValueError(f"at most {_MAX_SWITCH_OPS} switch operations")
    base = parse_feeder(feeder_text) if feeder_text else None
    topology = configured_feeder(configuration, base)  # type: ignore[arg-type]
    if switch_ops:
        topology = apply_switch_ops(topology, [parse_switch_op(op) for op in switch_ops])
    return topology


@_register_tool
def tool_validate_feeder(
    configuration: str = "default",
    feeder_text: str | None = None,
    switch_ops: list[str] | None = None,
) -> dict:
    """Check a feeder for connectivity, radiality and phase consistency.

    Purpose: Confirm a topology is usable before building graphs or generating data.
    Usage: `configuration` is `default` or `green`; optional `feeder_text` replaces the shipped IEEE 123 feeder; optional `switch_ops` like `open:60-160`.
    Returns: Dict with `success`, `ok`, `report` (connected, radial, orphan buses, diagnostics) or `error`.
    Related: Run before `tool_build_graph`; the `feeder://{name}` resource shows the file format.
    """
    try:
        report = validate(_feeder(configuration, feeder_text, switch_ops))
    except (ValueError, KeyError) as exc:
        return {"success": False, "error": str(exc)}
    return {"success": True, "ok": report.ok, "report": report.model_dump(mode="json")}


@_register_tool
def tool_electrical_distance(bus_a: str, bus_b: str, configuration: str = "default") -> dict:
    """Shortest closed-path line length between two buses.

    Purpose: Inspect how far apart two buses are electrically (switches, regulators and transformers count as zero length).
    Usage: Provide two bus ids such as `13` and `97`; `configuration` is `default` or `green`.
    Returns: Dict with `success`, `distance` (per-unit line length, `null` when unreachable) or `error`.
    Related: Measured-only graph construction connects sensors by this distance.
    """
    try:
        distance = electrical_distance(_feeder(configuration), bus_a, bus_b)
    except (ValueError, KeyError) as exc:
        return {"success": False, "error": str(exc)}
    return {"success": True, "distance": None if distance == float("inf") else distance}


@_register_tool
def tool_build_graph(strategy: str = "measured-only", configuration: str = "default") -> dict:
    """Build the GNN graph for the shipped sensor placement.

    Purpose: Produce the measured-only (sensor buses only) or full-topology graph used by the models.
    Usage: `strategy` is `measured-only` or `full`; `configuration` is `default` or `green`.
    Returns: Dict with `success`, `num_nodes`, `observed`, `edges` as bus pairs, and `export` text, or `error`.
    Related: Compare default and green results to see how reconfiguration rewires the sensor graph.
    """
    try:
        graph = build_graph(GraphStrategy(strategy), _feeder(configuration), default_placement())
    except (ValueError, KeyError) as exc:
        return {"success": False, "error": str(exc)}
    edges = [[graph.nodes[i].bus, graph.nodes[j].bus] for i, j in graph.edge_list()]
    return {
        "success": True,
        "num_nodes": graph.num_nodes,
        "observed": int(graph.observed_mask.sum()),
        "edges": edges,
        "export": export_graph(graph),
    }


@_register_tool
def tool_fault_signature(
    location: str, fault_type: str = "ABC", resistance: float = 0.1, configuration: str = "default"
) -> dict:
    """Preview the noise-free per-phase voltage factor each sensor sees during a fault.

    Purpose: Understand how sag depth decays with electrical distance for a fault scenario.
    Usage: `location` is a fault bus, `fault_type` one of AG..ABCG, `resistance` 0.1, 1.0 or 10.0 ohm.
    Returns: Dict with `success` and `factors` mapping sensor bus to [A, B, C] multipliers (1.0 = unaffected), or `error`.
    Related: Missing phases at single- or two-phase sensors report 0.
    """
    try:
        topology = _feeder(configuration)
        context = signature_context(topology, default_placement(), [location])
        factors = fault_factors(
            context, location, FaultType(fault_type), resistance, SurrogateConfig()
        )
    except (ValueError, KeyError) as exc:
        return {"success": False, "error": str(exc)}
    factors = factors * context.phase_mask
    return {
        "success": True,
        "factors": {
            bus: [float(v) for v in row]
            for bus, row in zip(context.sensor_buses, factors, strict=True)
        },
    }


@_register_tool
def tool_evaluate_checkpoint(
    checkpoint: str, dataset: str, mean: list[float], std: list[float]
) -> dict:
    """Evaluate a saved model on a dataset cache with soft voting.

    Purpose: Score a trained checkpoint without leaving the agent session.
    Usage: `checkpoint` and `dataset` are file paths (`.stgm`, `.stgd`); `mean`/`std` are the per-phase training normalizer statistics.
    Returns: Dict with `success` and the evaluation report (macro F1, per-class F1, confusion) or `error`.
    Related: Produce checkpoints and caches with the `feeder-stgnn train` and `gen-data` commands.
    """
    try:
        model, metadata = load_model(checkpoint)
        data = apply_normalizer(load_cache(dataset), NormStats(tuple(mean), tuple(std)))
        aligned = align_to_graph(data, model.graph)
        report = evaluate(model, aligned, fingerprint=metadata.get("fingerprint", ""))
    except (ValueError, KeyError, OSError) as exc:
        return {"success": False, "error": str(exc)}
    return {"success": True, "report": report.model_dump(mode="json", exclude={"train_seconds"})}


# Apply all collected tool wrappers to the MCP instance.
for _registered_fn in _tool_registry:
    mcp.tool()(_registered_fn)


def main():
    transport = os.environ.get("MCP_TRANSPORT", "stdio")
    if transport == "streamable-http":
        host = os.environ.get("MCP_HOST", "127.0.0.1")
        port = int(os.environ.get("MCP_PORT", "8000"))
        mcp.settings.host = host
        mcp.settings.port = port
        mcp.run(transport="streamable-http")
    else:
        mcp.run()


if __name__ == "__main__":
    main()
