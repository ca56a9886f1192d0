"""Fault-location models: the per-node GRU baseline and the GRU + GNN pipeline.

Windows (B, N, F, S) are folded to (B*N, S, F) so one GRU is shared across every node;
the final hidden states become node embeddings that either go straight to the dense head
(baseline) or through the stacked message-passing layers first. Graph-level predictions
sum per-node softmax probabilities over observed nodes and take the argmax.
"""

import logging
from pathlib import Path
from typing import Any

import numpy as np

from src.tools.errors import CheckpointError, ShapeError
from src.tools.gnn import GATv2Layer, GCNLayer, GraphStructure, SAGELayer
from src.tools.graph import SensorGraph, export_graph, parse_graph
from src.tools.models import Architecture, ModelConfig
from src.tools.nn import (
    GRU,
    BatchNorm,
    Dense,
    Dropout,
    Module,
    Tensor,
    derive_rngs,
    load_checkpoint,
    relu,
    save_checkpoint,
    softmax_array,
)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "feeder-stgnn"


class FaultLocator(Module):
    def __init__(
        self,
        config: ModelConfig,
        graph: SensorGraph,
        rng: np.random.Generator,
        dropout_rng: np.random.Generator,
        dtype: Any = np.float32,
    ):
        super().__init__()
        self.config = config
        self.graph = graph
        self.dtype = np.dtype(dtype)
        self._structure = GraphStructure.from_graph(graph, self.dtype)
        self.gru = GRU(config.input_dim, config.gru_hidden, rng, self.dtype)
        arch = config.architecture
        if arch.is_baseline:
            self.layers: list[Module] = []
            self.head = Dense(config.gru_hidden, config.num_classes, rng, dtype=self.dtype)
            return
        dims = [config.gru_hidden] + [config.gnn_hidden] * config.gnn_layers
        self.layers = [
            self._make_layer(arch, d_in, d_out, rng, dropout_rng)
            for d_in, d_out in zip(dims, dims[1:], strict=False)
        ]
        self.norms = [
            BatchNorm(config.gnn_hidden, dtype=self.dtype) for _ in range(config.gnn_layers - 1)
        ]
        self.dropouts = [Dropout(config.dropout, dropout_rng) for _ in range(config.gnn_layers - 1)]
        self.head = Dense(config.gnn_hidden, config.num_classes, rng, dtype=self.dtype)

    def _make_layer(
        self,
        arch: Architecture,
        d_in: int,
        d_out: int,
        rng: np.random.Generator,
        dropout_rng: np.random.Generator,
    ) -> Module:
        if arch is Architecture.RGCN:
            return GCNLayer(d_in, d_out, rng, self.dtype)
        if arch is Architecture.RSAGE_MEAN:
            return SAGELayer(d_in, d_out, "mean", rng, self.dtype)
        if arch is Architecture.RSAGE_MAX:
            return SAGELayer(d_in, d_out, "max", rng, self.dtype)
        return GATv2Layer(
            d_in,
            d_out,
            self.config.heads,
            rng,
            dropout_rng,
            leaky_slope=self.config.leaky_slope,
            attention_dropout=self.config.attention_dropout,
            dtype=self.dtype,
        )

    @property
    def observed_mask(self) -> np.ndarray:
        return self.graph.observed_mask

    def embed(self, features: np.ndarray) -> Tensor:
        """Shared-GRU node embeddings (B, N, Z)."""
        features = np.asarray(features)
        if features.ndim == 3:
            features = features[None]
        if features.ndim != 4:
            raise ShapeError(f"windows must be (B, N, F, S), got {features.shape}")
        batch, n, f, s = features.shape
        if n != self.graph.num_nodes:
            raise ShapeError(f"window has {n} nodes but the graph has {self.graph.num_nodes}")
        if f != self.config.input_dim:
            raise ShapeError(
                f"window has {f} features per step, model expects {self.config.input_dim}"
            )
        sequence = features.transpose(0, 1, 3, 2).reshape(batch * n, s, f).astype(self.dtype)
        final, _ = self.gru(Tensor(sequence))
        return final.reshape(batch, n, self.config.gru_hidden)

    def forward(self, features: np.ndarray) -> Tensor:
        """Node logits (B, N, num_classes)."""
        h = self.embed(features)
        batch, n = h.shape[0], h.shape[1]
        last = len(self.layers) - 1
        for k, layer in enumerate(self.layers):
            h = layer(h, self._structure, activation=k == last)
            if k < last:
                width = h.shape[-1]
                h = self.norms[k](h.reshape(batch * n, width)).reshape(batch, n, width)
                h = self.dropouts[k](relu(h))
        return self.head(h)


def build_model(
    config: ModelConfig, graph: SensorGraph, seed: int = 0, dtype: Any = np.float32
) -> FaultLocator:
    init_rng, dropout_rng = derive_rngs(seed, 2)
    model = FaultLocator(config, graph, init_rng, dropout_rng, dtype)
    logger.debug(
        "built %s over %d nodes with %d parameters",
        config.architecture.value,
        graph.num_nodes,
        model.num_parameters(),
    )
    return model


def soft_vote(node_logits: np.ndarray, observed_mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sum per-node softmax over observed nodes; argmax ties resolve to the lowest class."""
    logits = np.asarray(node_logits, dtype=np.float64)
    squeeze = logits.ndim == 2
    if squeeze:
        logits = logits[None]
    mask = np.asarray(observed_mask, dtype=bool)
    if mask.shape != (logits.shape[1],):
        raise ShapeError(f"observed mask {mask.shape} does not match {logits.shape[1]} nodes")
    if not mask.any():
        raise ValueError("soft vote needs at least one observed node")
    summed = softmax_array(logits[:, mask, :], axis=-1).sum(axis=1)
    labels = summed.argmax(axis=-1)
    return (labels[0], summed[0]) if squeeze else (labels, summed)


def _eval_logits(model: FaultLocator, features: np.ndarray, batch_size: int) -> np.ndarray:
    was_training = model.training
    model.eval()
    try:
        chunks = [
            model(features[start : start + batch_size]).data
            for start in range(0, len(features), batch_size)
        ]
    finally:
        model.train(was_training)
    return np.concatenate(chunks, axis=0)


def predict(model: FaultLocator, features: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Graph-level class per window, eval mode."""
    features = np.asarray(features)
    single = features.ndim == 3
    if single:
        features = features[None]
    if len(features) == 0:
        return np.zeros(0, dtype=np.int64)
    labels, _ = soft_vote(_eval_logits(model, features, batch_size), model.observed_mask)
    return labels[0] if single else labels


def node_predictions(
    model: FaultLocator, features: np.ndarray, batch_size: int = 256
) -> np.ndarray:
    """Per-node argmax (B, N) before voting."""
    features = np.asarray(features)
    if len(features) == 0:
        return np.zeros((0, model.graph.num_nodes), dtype=np.int64)
    return _eval_logits(model, features, batch_size).argmax(axis=-1)


def save_model(
    model: FaultLocator, path: str | Path, metadata: dict[str, str] | None = None
) -> None:
    descriptor = {
        "format": CHECKPOINT_FORMAT,
        "model": model.config.model_dump(mode="json"),
        "graph": export_graph(model.graph),
        "dtype": model.dtype.name,
        "metadata": dict(metadata or {}),
    }
    save_checkpoint(path, descriptor, model.state_dict())


def load_model(path: str | Path) -> tuple[FaultLocator, dict[str, str]]:
    descriptor, tensors = load_checkpoint(path)
    if descriptor.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a fault-locator checkpoint")
    config = ModelConfig.model_validate(descriptor["model"])
    graph = parse_graph(descriptor["graph"])
    model = build_model(config, graph, dtype=descriptor.get("dtype", "float32"))
    model.load_state_dict(tensors)
    return model, descriptor.get("metadata", {})
