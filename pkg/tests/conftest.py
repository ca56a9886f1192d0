"""Pytest configuration and fixtures for feeder STGNN tests."""

import numpy as np
import pytest

from src.tools.datagen import build_dataset
from src.tools.feeder import configured_feeder, default_placement, parse_feeder, parse_placement
from src.tools.graph import SensorGraph, build_full_topology, build_measured_only
from src.tools.models import DatagenConfig, FaultType
from tests.fixtures.graphs import TINY_FEEDER, TINY_PLACEMENT


@pytest.fixture
def default_topology():
    """IEEE 123 feeder in its default switch configuration."""
    return configured_feeder("default")


@pytest.fixture
def green_topology():
    """IEEE 123 feeder after the green reconfiguration."""
    return configured_feeder("green")


@pytest.fixture
def placement():
    """Shipped 25-sensor micro-PMU placement."""
    return default_placement()


@pytest.fixture
def measured_graph(default_topology, placement):
    return build_measured_only(default_topology, placement)


@pytest.fixture
def full_graph(default_topology, placement):
    return build_full_topology(default_topology, placement)


@pytest.fixture
def tiny_topology():
    """Five-bus radial feeder with one single-phase lateral."""
    return parse_feeder(TINY_FEEDER)


@pytest.fixture
def tiny_placement():
    return parse_placement(TINY_PLACEMENT)


@pytest.fixture
def tiny_graph(tiny_topology, tiny_placement):
    return build_measured_only(tiny_topology, tiny_placement)


@pytest.fixture
def small_config():
    """Two fault positions, one fault type each, default resistance set."""
    return DatagenConfig(fault_buses=["13", "97"], fault_types=[FaultType.ABC], seed=0)


@pytest.fixture
def small_dataset(small_config, default_topology, placement):
    """80 windows: 40 per run, half of them labeled no-fault."""
    return build_dataset(small_config, default_topology, placement)


@pytest.fixture
def toy_graph():
    """Path 0-1-2-3 with node 3 unobserved."""
    return SensorGraph.from_edges(4, [(0, 1), (1, 2), (2, 3)], observed=[True, True, True, False])


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def mcp_server():
    """Provide MCP server instance for integration tests."""
    import os
    import sys

    sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))
    from src.server import mcp

    return mcp
