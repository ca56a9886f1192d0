"""Lightweight performance benchmark for the fault-location pipeline.

Runs each stage several times and prints the average elapsed time. This script
is intentionally standalone (no pytest dependency) so it can be run in
production-like containers.
"""

import os
import sys
import time

sys.path.insert(0, os.path.abspath("."))

import numpy as np

from src.tools.datagen import build_dataset
from src.tools.feeder import configured_feeder, default_placement
from src.tools.graph import build_full_topology, build_measured_only
from src.tools.models import Architecture, DatagenConfig, FaultType, ModelConfig
from src.tools.stgnn import build_model


def _timeit(fn, args, rounds=5):
    start = time.perf_counter()
    for _ in range(rounds):
        fn(*args)
    elapsed = time.perf_counter() - start
    return elapsed / rounds


def _forward_backward(model, features):
    model(features).sum().backward()


def main():
    topology = configured_feeder("default")
    green = configured_feeder("green")
    placement = default_placement()
    small = DatagenConfig(fault_buses=["13", "60", "97"], fault_types=[FaultType.AG, FaultType.ABC])
    measured = build_measured_only(topology, placement)
    full = build_full_topology(topology, placement)
    rng = np.random.default_rng(0)
    features = rng.standard_normal((32, measured.num_nodes, 3, 20)).astype(np.float32)
    full_features = rng.standard_normal((32, full.num_nodes, 3, 20)).astype(np.float32)

    benchmarks = [
        ("measured-only graph (default)", build_measured_only, (topology, placement), 20),
        ("measured-only graph (green)", build_measured_only, (green, placement), 20),
        ("full-topology graph", build_full_topology, (topology, placement), 20),
        ("dataset 3 buses x 2 types", build_dataset, (small, topology, placement), 3),
    ]
    for arch in Architecture:
        config = ModelConfig(architecture=arch)
        measured_model, full_model = build_model(config, measured), build_model(config, full)
        benchmarks.append(
            (f"{arch.value} batch (measured)", _forward_backward, (measured_model, features), 3)
        )
        benchmarks.append(
            (f"{arch.value} batch (full)", _forward_backward, (full_model, full_features), 2)
        )

    print(f"{'benchmark':<34} {'avg_s':>10} {'rounds':>8}")
    print("-" * 56)
    for name, fn, args, rounds in benchmarks:
        avg = _timeit(fn, args, rounds)
        print(f"{name:<34} {avg:>10.6f} {rounds:>8}")


if __name__ == "__main__":
    main()
