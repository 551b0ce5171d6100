"""Two-layer graph attention encoder with a nonlinear projection head.

Graphs are passed as an undirected edge list that already contains self-loops
(see :func:`build_edge_index`), so batches of disjoint subgraphs are handled by
simply concatenating their edge lists with node offsets.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import torch
from torch import nn
import torch.nn.functional as F

from .encoding import DTYPE
from .errors import InvalidGraph, InvalidInput, UnknownDisease

NEGATIVE_SLOPE = 0.2


def build_edge_index(num_nodes: int, pairs: Iterable[tuple[int, int]]) -> torch.Tensor:
    """Return a ``(2, E)`` long tensor of (source, target) messages.

    Every pair is used in both directions, duplicates are removed and each node
    gets a self-loop. Rows are sorted by (target, source).
    """
    edges = {(i, i) for i in range(num_nodes)}
    for a, b in pairs:
        edges.add((a, b))
        edges.add((b, a))
    ordered = sorted(edges, key=lambda e: (e[1], e[0]))
    if not ordered:
        return torch.zeros((2, 0), dtype=torch.long)
    return torch.tensor(ordered, dtype=torch.long).T.contiguous()


def segment_softmax(scores: torch.Tensor, segment: torch.Tensor, num_segments: int) -> torch.Tensor:
    """Softmax of ``scores`` within groups given by ``segment`` ids (dim 0)."""
    shape = (num_segments,) + tuple(scores.shape[1:])
    peak = torch.full(shape, float("-inf"), dtype=scores.dtype)
    peak = peak.scatter_reduce(0, segment.view(-1, *([1] * (scores.dim() - 1))).expand_as(scores),
                               scores, reduce="amax", include_self=True)
    # shifting by the per-segment max is exact for softmax, so it carries no gradient
    ex = torch.exp(scores - peak.detach()[segment])
    denom = torch.zeros(shape, dtype=scores.dtype).index_add(0, segment, ex)
    return ex / denom[segment]


def activation(name: str):
    if name == "elu":
        return F.elu
    if name == "identity":
        return lambda x: x
    raise InvalidInput(f"unknown activation {name!r}")


class GATLayer(nn.Module):
    """Single-head additive attention layer (no output activation)."""

    def __init__(self, in_dim: int, out_dim: int, generator: torch.Generator | None = None):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(out_dim, in_dim, dtype=DTYPE))
        self.att_src = nn.Parameter(torch.empty(out_dim, dtype=DTYPE))
        self.att_dst = nn.Parameter(torch.empty(out_dim, dtype=DTYPE))
        nn.init.xavier_uniform_(self.weight, generator=generator)
        bound = (6.0 / (2 * out_dim + 1)) ** 0.5
        nn.init.uniform_(self.att_src, -bound, bound, generator=generator)
        nn.init.uniform_(self.att_dst, -bound, bound, generator=generator)

    def attention(self, wx: torch.Tensor, edge_index: torch.Tensor) -> torch.Tensor:
        src, dst = edge_index
        logits = F.leaky_relu(wx[dst] @ self.att_dst + wx[src] @ self.att_src, NEGATIVE_SLOPE)
        return segment_softmax(logits, dst, wx.shape[0])

    def forward(self, x: torch.Tensor, edge_index: torch.Tensor, return_attention: bool = False):
        wx = x @ self.weight.T
        alpha = self.attention(wx, edge_index)
        src, dst = edge_index
        out = torch.zeros_like(wx).index_add(0, dst, alpha.unsqueeze(-1) * wx[src])
        return (out, alpha) if return_attention else out


class GraphEncoder(nn.Module):
    """g(x): GAT -> activation -> GAT -> W_o2 · act(W_o1 · x)."""

    def __init__(self, dim: int, hidden: int | None = None, act: str = "elu",
                 generator: torch.Generator | None = None):
        super().__init__()
        hidden = hidden or dim
        self.act_name = act
        self.layer1 = GATLayer(dim, hidden, generator)
        self.layer2 = GATLayer(hidden, hidden, generator)
        self.proj1 = nn.Parameter(torch.empty(hidden, hidden, dtype=DTYPE))
        self.proj2 = nn.Parameter(torch.empty(dim, hidden, dtype=DTYPE))
        nn.init.xavier_uniform_(self.proj1, generator=generator)
        nn.init.xavier_uniform_(self.proj2, generator=generator)

    def forward(self, x: torch.Tensor, edge_index: torch.Tensor, return_attention: bool = False):
        if x.dim() != 2 or x.shape[0] == 0:
            raise InvalidInput("graph encoder needs a non-empty (nodes, dim) feature matrix")
        phi = activation(self.act_name)
        h1, a1 = self.layer1(x, edge_index, return_attention=True)
        h1 = phi(h1)
        h2, a2 = self.layer2(h1, edge_index, return_attention=True)
        out = phi(h2 @ self.proj1.T) @ self.proj2.T
        return (out, (a1, a2)) if return_attention else out


def gat_forward(x: torch.Tensor, edge_index: torch.Tensor, encoder: GraphEncoder) -> torch.Tensor:
    return encoder(x, edge_index)


@dataclass
class PrototypeSet:
    labels: list[str]
    embeddings: torch.Tensor

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise UnknownDisease(label) from None


class GraphTensors:
    """Tensor view of a unified graph: initial features, edge list, disease rows."""

    def __init__(self, graph):
        self.graph = graph
        self.labels = graph.disease_labels
        if not self.labels:
            raise InvalidGraph("unified graph has no disease nodes")
        self.features = torch.as_tensor(graph.node_embeddings(), dtype=DTYPE)
        self.edge_index = build_edge_index(len(graph.nodes), ((h, t) for h, _, t in graph.edges))
        self.disease_rows = torch.tensor([graph.disease_node(l) for l in self.labels], dtype=torch.long)
        self.label_index = {l: i for i, l in enumerate(self.labels)}


def compute_prototypes(tensors: GraphTensors, encoder: GraphEncoder) -> PrototypeSet:
    out = encoder(tensors.features, tensors.edge_index)
    return PrototypeSet(list(tensors.labels), out[tensors.disease_rows])


def reweight_features(features: torch.Tensor, alpha: torch.Tensor, sizes: torch.Tensor) -> torch.Tensor:
    """Scale node features by alpha * |nodes|, so uniform attention is the identity."""
    return features * (alpha * sizes.to(features.dtype)).unsqueeze(-1)


def compute_graph_patient_embedding(node_ids: Sequence[int], local_edges: torch.Tensor, center: int,
                                    alpha: torch.Tensor, features: torch.Tensor,
                                    encoder: GraphEncoder) -> torch.Tensor:
    """Encode one attention-weighted subgraph and return the center node's output.

    ``node_ids`` index rows of ``features`` (the unified-graph node embeddings);
    ``local_edges`` is an edge index over positions in ``node_ids``.
    """
    idx = torch.as_tensor(list(node_ids), dtype=torch.long)
    x = reweight_features(features[idx], alpha, torch.tensor(len(idx)))
    return encoder(x, local_edges)[center]
