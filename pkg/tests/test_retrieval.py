import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oracles import oracle_bfs
from protokg.encoding import Adapter, HashEncoder
from protokg.errors import InvalidInput, UnknownDisease
from protokg.fusion import fuse
from protokg.kg_construction import KnowledgeTriplet, RelationDefinition
from protokg.retrieval import (RetrievalAttention, Subgraph, attend_subgraph, attention_weights, build_query,
                               dump_subgraph, query_vector, two_hop_neighborhood)

D = torch.float64


def _chain_graph():
    trips = [KnowledgeTriplet("dd", "causes", "aa", "dd"), KnowledgeTriplet("aa", "causes", "bb", "dd"),
             KnowledgeTriplet("cc", "causes", "bb", "dd")]
    return fuse(trips, [RelationDefinition("causes", "x")], 0.99, HashEncoder(8), disease_labels=["dd", "ee"])


def test_two_hop_chain_cutoff():
    g = _chain_graph()
    sub = two_hop_neighborhood(g, "dd")
    assert {g.nodes[i].canonical_label for i in sub.nodes} == {"dd", "aa", "bb"}
    assert sub.nodes[sub.center_position] == g.disease_node("dd")


def test_isolated_disease():
    g = _chain_graph()
    sub = two_hop_neighborhood(g, "ee")
    assert sub.nodes == [g.disease_node("ee")] and sub.edges == []


def test_unknown_disease():
    with pytest.raises(UnknownDisease):
        two_hop_neighborhood(_chain_graph(), "zz")


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_two_hop_matches_bfs_oracle(seed):
    rng = np.random.default_rng(seed)
    names = [f"n{i}" for i in range(20)]
    trips = []
    for _ in range(25):
        a, b = rng.choice(20, 2, replace=False)
        trips.append(KnowledgeTriplet(names[a], "causes", names[b], names[0]))
    g = fuse(trips, [RelationDefinition("causes", "x")], 0.999, HashEncoder(16, seed=seed))
    adj = {}
    for h, _, t in g.edges:
        adj.setdefault(h, set()).add(t)
        adj.setdefault(t, set()).add(h)
    center = g.disease_node(names[0])
    assert set(two_hop_neighborhood(g, names[0]).nodes) == oracle_bfs(adj, center, 2)


def _query_parts(seed=0, dim=4):
    gen = torch.Generator().manual_seed(seed)
    kw = torch.randn(3, dim, generator=gen, dtype=D)
    protos = torch.randn(5, dim, generator=gen, dtype=D)
    gate = torch.randn(dim, dim, generator=gen, dtype=D)
    return kw, protos, gate


@pytest.mark.parametrize("beta_param, expect", [(-800.0, "evidence"), (800.0, "prior")])
def test_query_endpoints(beta_param, expect):
    from protokg.encoding import gated_aggregate
    kw, protos, gate = _query_parts()
    adapter = Adapter(4)
    q, beta = build_query(kw, adapter, protos, torch.tensor(beta_param, dtype=D), gate)
    target = protos.mean(0) if expect == "prior" else gated_aggregate(adapter(kw), gate)
    assert torch.allclose(q, target)


def test_query_hand_value():
    adapter = Adapter(2)
    kw = torch.tensor([[0.0, 1.0]], dtype=D)
    protos = torch.tensor([[1.0, 0.0]], dtype=D)
    qv = query_vector(kw, adapter, protos, torch.tensor(0.0, dtype=D), torch.zeros(2, 2, dtype=D))
    assert qv.beta_effective == 0.5
    assert torch.allclose(qv.values, torch.tensor([0.5, 0.5], dtype=D))


def test_query_needs_keywords():
    _, protos, gate = _query_parts()
    with pytest.raises(InvalidInput):
        build_query(torch.zeros(0, 4, dtype=D), Adapter(4), protos, torch.tensor(0.0, dtype=D), gate)


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.integers(0, 1000))
def test_query_is_convex_combination(bp, seed):
    from protokg.encoding import gated_aggregate
    kw, protos, gate = _query_parts(seed)
    adapter = Adapter(4)
    q, _ = build_query(kw, adapter, protos, torch.tensor(bp, dtype=D), gate)
    a, b = protos.mean(0), gated_aggregate(adapter(kw), gate)
    assert bool((q >= torch.minimum(a, b) - 1e-12).all() and (q <= torch.maximum(a, b) + 1e-12).all())


def test_attention_examples():
    a = attention_weights(torch.tensor([math.log(2.0), 0.0], dtype=D))
    assert torch.allclose(a, torch.tensor([2 / 3, 1 / 3], dtype=D))
    assert torch.equal(attention_weights(torch.tensor([0.7, 0.7], dtype=D)), torch.tensor([0.5, 0.5], dtype=D))


def test_single_node_subgraph_attention():
    attn = RetrievalAttention(4, 4, torch.Generator().manual_seed(0))
    ps = attend_subgraph(torch.ones(4, dtype=D), Subgraph(3, [3], []), torch.randn(5, 4, dtype=D), attn)
    assert ps.attention == {3: 1.0}


def test_heads_averaged_before_single_softmax():
    gen = torch.Generator().manual_seed(1)
    attn = RetrievalAttention(8, 4, gen)
    q = torch.randn(8, dtype=D)
    nodes = torch.randn(5, 8, dtype=D)
    per_head = []
    for h in range(4):
        sl = slice(2 * h, 2 * h + 2)
        per_head.append(((attn.w_k @ nodes.T).T[:, sl] @ (attn.w_q @ q)[sl]) / math.sqrt(2))
    expected = torch.stack(per_head).mean(0)
    assert torch.allclose(attn.scores(q, nodes), expected)


def test_subgraph_attention_normalized_and_shift_invariant(small_graph):
    from protokg.model import GraphContext
    ctx = GraphContext(small_graph)
    attn = RetrievalAttention(ctx.features.shape[1], 4, torch.Generator().manual_seed(2))
    label = ctx.labels[0]
    ps = attend_subgraph(torch.randn(ctx.features.shape[1], dtype=D), ctx.subgraph(label), ctx.features, attn)
    assert set(ps.attention) == set(ps.nodes)
    assert abs(sum(ps.attention.values()) - 1) <= 1e-9
    assert all(a > 0 for a in ps.attention.values())
    s = torch.randn(7, dtype=D)
    assert torch.allclose(attention_weights(s), attention_weights(s + 123.0), atol=1e-15)
    rows = dump_subgraph(ps, small_graph)
    assert len(rows) == len(ps.edges)
    keys = [max(r[3], r[4]) for r in rows]
    assert keys == sorted(keys, reverse=True)


def test_wrong_head_count():
    with pytest.raises(InvalidInput):
        RetrievalAttention(6, 4)
