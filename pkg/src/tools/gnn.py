"""Spatial message-passing layers: GCN, GraphSAGE (mean / max) and multi-head GATv2.

Layers take node features ``(B, N, d)`` (or ``(N, d)``) and a ``GraphStructure`` holding
the dense operators derived once from a ``SensorGraph``. Every neighborhood includes the
node itself. With ``activation=False`` a layer returns its pre-activation output so that
the caller can insert batch normalization before the ReLU.
"""

from dataclasses import dataclass
from typing import Any

import numpy as np

from src.tools.errors import ShapeError
from src.tools.graph import SensorGraph, neighbor_table, normalized_adjacency
from src.tools.nn import (
    Module,
    Parameter,
    Tensor,
    concat,
    dropout,
    glorot_uniform,
    leaky_relu,
    masked_fill,
    relu,
    softmax,
    tensor_max,
)

_MASKED_SCORE = -1e30


@dataclass(frozen=True, eq=False)
class GraphStructure:
    a_hat: np.ndarray
    mean_matrix: np.ndarray
    neighbor_index: np.ndarray
    neighbor_mask: np.ndarray

    @property
    def num_nodes(self) -> int:
        return int(self.a_hat.shape[0])

    @classmethod
    def from_graph(cls, graph: SensorGraph, dtype: Any = np.float32) -> "GraphStructure":
        if graph.num_nodes == 0:
            raise ShapeError("graph has no nodes")
        a_self = graph.adjacency.astype(np.float64) + np.eye(graph.num_nodes)
        index, mask = neighbor_table(graph)
        return cls(
            a_hat=normalized_adjacency(graph).astype(dtype),
            mean_matrix=(a_self / a_self.sum(axis=1, keepdims=True)).astype(dtype),
            neighbor_index=index,
            neighbor_mask=mask,
        )


def _batched(h: Tensor, structure: GraphStructure, in_dim: int) -> tuple[Tensor, bool]:
    squeeze = h.ndim == 2
    if squeeze:
        h = h.reshape(1, *h.shape)
    if h.ndim != 3 or h.shape[1] != structure.num_nodes or h.shape[2] != in_dim:
        raise ShapeError(
            f"expected features (B, {structure.num_nodes}, {in_dim}), got {h.shape}"
        )
    return h, squeeze


def _finish(out: Tensor, squeeze: bool, activation: bool) -> Tensor:
    if activation:
        out = relu(out)
    return out.reshape(*out.shape[1:]) if squeeze else out


class GCNLayer(Module):
    """H' = ReLU(Â H W) with Â = D^-1/2 (A + I) D^-1/2."""

    def __init__(
        self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype: Any = np.float32
    ):
        super().__init__()
        self.in_dim = in_dim
        self.W = Parameter(glorot_uniform(rng, (in_dim, out_dim), dtype))

    def forward(self, h: Tensor, structure: GraphStructure, activation: bool = True) -> Tensor:
        h, squeeze = _batched(h, structure, self.in_dim)
        out = Tensor(structure.a_hat.astype(h.dtype)) @ (h @ self.W)
        return _finish(out, squeeze, activation)


class SAGELayer(Module):
    """h'_v = ReLU(W [h_v || AGG{h_u : u in N(v)}]) without neighbor sampling."""

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        aggregator: str,
        rng: np.random.Generator,
        dtype: Any = np.float32,
    ):
        super().__init__()
        if aggregator not in ("mean", "max"):
            raise ValueError(f"unknown aggregator {aggregator!r}")
        self.in_dim = in_dim
        self.aggregator = aggregator
        self.W = Parameter(glorot_uniform(rng, (2 * in_dim, out_dim), dtype))

    def aggregate(self, h: Tensor, structure: GraphStructure) -> Tensor:
        if self.aggregator == "mean":
            return Tensor(structure.mean_matrix.astype(h.dtype)) @ h
        # padding slots repeat the node itself, which is already a member
        gathered = h[:, structure.neighbor_index]
        return tensor_max(gathered, axis=2)

    def forward(self, h: Tensor, structure: GraphStructure, activation: bool = True) -> Tensor:
        h, squeeze = _batched(h, structure, self.in_dim)
        out = concat([h, self.aggregate(h, structure)], axis=-1) @ self.W
        return _finish(out, squeeze, activation)


class GATv2Layer(Module):
    """Multi-head GATv2 with heads concatenated.

    e_vu = a . LeakyReLU(W1 h_v + W2 h_u); alpha_v = softmax over N(v);
    out_v = sum_u alpha_vu W2 h_u per head. Attention dropout is not renormalised.
    """

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        heads: int,
        rng: np.random.Generator,
        dropout_rng: np.random.Generator | None = None,
        leaky_slope: float = 0.2,
        attention_dropout: float = 0.3,
        dtype: Any = np.float32,
    ):
        super().__init__()
        if out_dim % heads:
            raise ValueError(f"output dim {out_dim} is not divisible by {heads} heads")
        if not 0 <= attention_dropout < 1:
            raise ValueError(f"attention dropout {attention_dropout} outside [0, 1)")
        self.in_dim = in_dim
        self.heads = heads
        self.head_dim = out_dim // heads
        self.leaky_slope = leaky_slope
        self.attention_dropout = attention_dropout
        self.W1 = Parameter(glorot_uniform(rng, (in_dim, out_dim), dtype))
        self.W2 = Parameter(glorot_uniform(rng, (in_dim, out_dim), dtype))
        self.a = Parameter(glorot_uniform(rng, (heads, self.head_dim), dtype))
        self._rng = dropout_rng or np.random.default_rng(0)

    def _attention(self, h: Tensor, structure: GraphStructure) -> tuple[Tensor, Tensor]:
        batch, n, _ = h.shape
        left = (h @ self.W1).reshape(batch, n, 1, self.heads, self.head_dim)
        right = (h @ self.W2).reshape(batch, n, self.heads, self.head_dim)
        neighbors = right[:, structure.neighbor_index]
        scores = (leaky_relu(left + neighbors, self.leaky_slope) * self.a).sum(axis=-1)
        padding = ~structure.neighbor_mask[None, :, :, None]
        alpha = softmax(masked_fill(scores, padding, _MASKED_SCORE), axis=2)
        return alpha, neighbors

    def attention_coefficients(self, h: Tensor, structure: GraphStructure) -> np.ndarray:
        """Coefficients (B, N, K, heads) before dropout; padded slots are 0."""
        h, squeeze = _batched(h, structure, self.in_dim)
        alpha, _ = self._attention(h, structure)
        return alpha.data[0] if squeeze else alpha.data

    def forward(self, h: Tensor, structure: GraphStructure, activation: bool = True) -> Tensor:
        h, squeeze = _batched(h, structure, self.in_dim)
        alpha, neighbors = self._attention(h, structure)
        alpha = dropout(alpha, self.attention_dropout, self.training, self._rng)
        batch, n = h.shape[0], h.shape[1]
        k = structure.neighbor_index.shape[1]
        weighted = alpha.reshape(batch, n, k, self.heads, 1) * neighbors
        out = weighted.sum(axis=2).reshape(batch, n, self.heads * self.head_dim)
        return _finish(out, squeeze, activation)
