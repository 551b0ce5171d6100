"""Prototype-augmented query and attention-weighted 2-hop subgraph retrieval."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import torch
from torch import nn

from .encoding import DTYPE, Adapter, gated_aggregate
from .errors import InvalidInput
from .fusion import UnifiedGraph
from .graph_encoder import build_edge_index, segment_softmax


@dataclass
class QueryVector:
    values: torch.Tensor
    beta_effective: float


@dataclass
class Subgraph:
    """Induced 2-hop neighborhood of a disease node (global node ids, sorted)."""

    center: int
    nodes: list[int]
    edges: list[tuple[int, int, int]]
    _local: torch.Tensor | None = field(default=None, repr=False)

    @property
    def center_position(self) -> int:
        return self.nodes.index(self.center)

    def local_edge_index(self) -> torch.Tensor:
        if self._local is None:
            pos = {n: i for i, n in enumerate(self.nodes)}
            self._local = build_edge_index(len(self.nodes), ((pos[h], pos[t]) for h, _, t in self.edges))
        return self._local


@dataclass
class PatientSubgraph:
    center_disease: int
    nodes: list[int]
    edges: list[tuple[int, int, int]]
    attention: dict[int, float]


def build_query(keyword_vectors: torch.Tensor, adapter: Adapter, prototypes: torch.Tensor,
                beta_param: torch.Tensor, gate: torch.Tensor,
                mask: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """q = beta * mean(prototypes) + (1 - beta) * rho(f(keywords)), beta = sigmoid(beta_param).

    ``keyword_vectors`` holds frozen-encoder keyword embeddings, ``(K, D)`` or
    padded ``(B, K, D)`` with ``mask``. Returns ``(q, beta)``.
    """
    if keyword_vectors.shape[-2] == 0:
        raise InvalidInput("query construction needs at least one keyword")
    if prototypes.shape[0] == 0:
        raise InvalidInput("query construction needs at least one prototype")
    evidence = gated_aggregate(adapter(keyword_vectors), gate, mask)
    prior = prototypes.mean(dim=0)
    beta = torch.sigmoid(beta_param)
    return beta * prior + (1.0 - beta) * evidence, beta


def query_vector(keyword_vectors, adapter, prototypes, beta_param, gate) -> QueryVector:
    q, beta = build_query(keyword_vectors, adapter, prototypes, beta_param, gate)
    return QueryVector(q, float(beta))


def two_hop_neighborhood(graph: UnifiedGraph, disease_label: str) -> Subgraph:
    center = graph.disease_node(disease_label)
    depth = {center: 0}
    queue = deque([center])
    while queue:
        node = queue.popleft()
        if depth[node] == 2:
            continue
        for nbr in graph.neighbors(node):
            if nbr not in depth:
                depth[nbr] = depth[node] + 1
                queue.append(nbr)
    keep = set(depth)
    edges = [e for e in graph.edges if e[0] in keep and e[2] in keep]
    return Subgraph(center, sorted(keep), edges)


class RetrievalAttention(nn.Module):
    """Multi-head scaled dot-product relevance between a query and graph nodes.

    Per-head scores are averaged before a single softmax over the subgraph nodes.
    """

    def __init__(self, dim: int, heads: int = 4, generator: torch.Generator | None = None):
        super().__init__()
        if dim % heads:
            raise InvalidInput("embedding dimension must be divisible by the number of heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.w_q = nn.Parameter(torch.empty(dim, dim, dtype=DTYPE))
        self.w_k = nn.Parameter(torch.empty(dim, dim, dtype=DTYPE))
        nn.init.xavier_uniform_(self.w_q, generator=generator)
        nn.init.xavier_uniform_(self.w_k, generator=generator)

    def scores(self, query: torch.Tensor, nodes: torch.Tensor) -> torch.Tensor:
        """``query`` (..., D) broadcast against ``nodes`` (..., n, D) -> (..., n)."""
        q = (query @ self.w_q.T).reshape(*query.shape[:-1], 1, self.heads, self.head_dim)
        k = (nodes @ self.w_k.T).reshape(*nodes.shape[:-1], self.heads, self.head_dim)
        return (q * k).sum(-1).mean(-1) / math.sqrt(self.head_dim)

    def segment_scores(self, queries: torch.Tensor, nodes: torch.Tensor,
                       segment: torch.Tensor) -> torch.Tensor:
        """Batched form: ``queries`` (B, D), ``nodes`` (n_total, D), node-to-query ids."""
        q = (queries @ self.w_q.T).reshape(-1, self.heads, self.head_dim)
        k = (nodes @ self.w_k.T).reshape(-1, self.heads, self.head_dim)
        return (q[segment] * k).sum(-1).mean(-1) / math.sqrt(self.head_dim)


def attention_weights(scores: torch.Tensor) -> torch.Tensor:
    return torch.softmax(scores, dim=-1)


def attend_subgraph(query: QueryVector | torch.Tensor, subgraph: Subgraph,
                    node_embeddings: torch.Tensor, attn: RetrievalAttention) -> PatientSubgraph:
    if not subgraph.nodes:
        raise InvalidInput("cannot attend over an empty subgraph")
    q = query.values if isinstance(query, QueryVector) else query
    idx = torch.as_tensor(subgraph.nodes, dtype=torch.long)
    alpha = attention_weights(attn.scores(q, node_embeddings[idx]))
    return PatientSubgraph(subgraph.center, list(subgraph.nodes), list(subgraph.edges),
                           {n: float(a) for n, a in zip(subgraph.nodes, alpha.tolist())})


def batch_attention(queries: torch.Tensor, node_ids: torch.Tensor, segment: torch.Tensor,
                    node_embeddings: torch.Tensor, attn: RetrievalAttention) -> torch.Tensor:
    scores = attn.segment_scores(queries, node_embeddings[node_ids], segment)
    return segment_softmax(scores, segment, queries.shape[0])


def dump_subgraph(ps: PatientSubgraph, graph: UnifiedGraph) -> list[tuple[str, str, str, float, float]]:
    """Triples as (head, relation, tail, alpha_head, alpha_tail), most attended first."""
    rows = []
    for h, r, t in ps.edges:
        rows.append((graph.nodes[h].canonical_label, graph.relations[r].canonical_label,
                     graph.nodes[t].canonical_label, ps.attention[h], ps.attention[t]))
    rows.sort(key=lambda x: (-max(x[3], x[4]), x[0], x[1], x[2]))
    return rows
