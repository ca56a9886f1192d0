import os
import sys

sys.path.insert(0, os.path.abspath("."))
import numpy as np

from src.tools.datagen import build_dataset, class_histogram, fit_normalizer
from src.tools.feeder import configured_feeder, default_placement, electrical_distance, validate
from src.tools.graph import build_full_topology, build_measured_only
from src.tools.models import Architecture, DatagenConfig, FaultType, ModelConfig
from src.tools.nn import gradient_check
from src.tools.stgnn import build_model, predict
from src.utils.metrics import confidence_interval


def main():
    placement = default_placement()
    for name in ("default", "green"):
        topology = configured_feeder(name)
        report = validate(topology)
        status = "ok" if report.ok else "errors"
        print(f"validate[{name}]:", status, "radial" if report.radial else "loops")
        graph = build_measured_only(topology, placement)
        print(f"measured-only[{name}]:", graph.num_nodes, "nodes", len(graph.edges), "edges")
    full = build_full_topology(configured_feeder("default"), placement)
    print("full topology:", full.num_nodes, "nodes", int(full.observed_mask.sum()), "observed")
    print("distance 13-97:", electrical_distance(configured_feeder("default"), "13", "97"))

    config = DatagenConfig(fault_buses=["13", "97"], fault_types=[FaultType.ABC], seed=0)
    dataset = build_dataset(config, configured_feeder("default"), placement)
    print("dataset:", len(dataset), "windows", class_histogram(dataset)[:3].tolist())
    print("normalizer:", fit_normalizer(dataset))

    graph = build_measured_only(configured_feeder("default"), placement)
    model = build_model(ModelConfig(architecture=Architecture.RGCN, dropout=0.0), graph, seed=0)
    print("predict:", predict(model, dataset.features[:4]).tolist())

    toy = build_model(
        ModelConfig(
            architecture=Architecture.RGATV2,
            gru_hidden=4,
            gnn_hidden=4,
            heads=2,
            dropout=0.0,
            attention_dropout=0.0,
        ),
        graph,
        seed=1,
        dtype=np.float64,
    )
    x = np.random.default_rng(0).standard_normal((2, graph.num_nodes, 3, 3))

    def loss():
        return (toy(x) ** 2).mean()

    errors = gradient_check(toy, loss)
    print("gradient check (max rel err):", max(errors.values()))
    print("confidence interval {0,1}:", confidence_interval([0.0, 1.0]))


if __name__ == "__main__":
    main()
