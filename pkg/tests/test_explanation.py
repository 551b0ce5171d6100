import json

import pytest

from protokg.errors import ChatUnavailable, InvalidInput
from protokg.explanation import (Explanation, ExplanationRequest, build_prompt, dumps_explanations, explain,
                                 explain_records, retrieve, subgraph_triples, top_triples)
from protokg.kg_construction import ChatClient, DisabledChatClient, MemoryChatClient, prompt_key
from protokg.pipeline import prepare
from protokg.retrieval import PatientSubgraph
from protokg.training import Prediction


class FailingClient(ChatClient):
    def complete(self, prompt):
        raise ChatUnavailable("down")


def _star(graph, label, alphas):
    """Subgraph of the first len(alphas) out-edges of ``label`` with tail attentions ``alphas``."""
    center = graph.disease_node(label)
    picked, seen = [], set()
    for h, r, t in graph.edges:
        if h == center and t not in seen:
            picked.append((h, r, t))
            seen.add(t)
        if len(picked) == len(alphas):
            break
    att = {center: 0.0, **{t: a for (_, _, t), a in zip(picked, alphas)}}
    return PatientSubgraph(center, [center] + [t for _, _, t in picked], picked, att)


@pytest.fixture
def request_factory(small_graph, small_data):
    def make(alphas=(0.5, 0.3, 0.2), record=None):
        record = (record or small_data.test[0]).without_label()
        label = small_graph.disease_labels[0]
        ps = _star(small_graph, label, alphas)
        pred = Prediction([label] + [l for l in small_graph.disease_labels if l != label],
                          [1.0] * len(small_graph.disease_labels))
        return ExplanationRequest(record, pred, ps, small_graph)
    return make


def test_sort_then_truncate(request_factory, small_graph):
    req = request_factory()
    got = top_triples(req, 2)
    oracle = sorted(subgraph_triples(req.subgraph, small_graph), key=lambda t: -t.attention)[:2]
    assert [t.attention for t in got] == [0.5, 0.3]
    assert got == oracle
    prompt = build_prompt(req, 2)
    assert got[0].render() in prompt and got[1].render() in prompt
    assert "attention=0.2000" not in prompt
    assert prompt.index(got[0].render()) < prompt.index(got[1].render())


def test_prompt_contents_and_clamping(request_factory):
    req = request_factory()
    prompt = build_prompt(req, 50)
    assert req.record.narrative in prompt and req.predicted_label in prompt
    assert prompt.count("—") == 3 and "→" in prompt
    assert build_prompt(req, 50) == build_prompt(request_factory(), 50)
    with pytest.raises(InvalidInput):
        build_prompt(req, 0)


def test_empty_subgraph_rejected(request_factory, small_graph):
    req = request_factory(alphas=())
    with pytest.raises(InvalidInput):
        build_prompt(req)
    with pytest.raises(InvalidInput):
        explain(req, None)


def test_center_must_match_top1(request_factory, small_graph):
    req = request_factory()
    other = small_graph.disease_labels[1]
    with pytest.raises(InvalidInput):
        ExplanationRequest(req.record, Prediction([other], [1.0]), req.subgraph, small_graph)


def test_recorded_client_gives_llm_explanation(request_factory):
    req = request_factory()
    client = MemoryChatClient({prompt_key(build_prompt(req, 5)): "  The narrative fits.  "})
    exp = explain(req, client, 5)
    assert exp.generator == "llm" and exp.text == "The narrative fits."
    assert exp.supporting_triples == top_triples(req, 5)


@pytest.mark.parametrize("client", [None, DisabledChatClient(), FailingClient(), MemoryChatClient({})])
def test_template_fallback(request_factory, client):
    req = request_factory()
    a, b = explain(req, client), explain(request_factory(), client)
    assert a.generator == "template" and a.text and req.predicted_label in a.text
    assert a.text.encode() == b.text.encode()


def test_end_to_end_provenance_and_no_mutation(small_graph, small_data, small_encoder, small_hp):
    fitted = prepare(small_graph, small_encoder, small_hp, small_data.train)
    before = {k: v.clone() for k, v in fitted.model.state_dict().items()}
    n_edges = len(small_graph.edges)
    recs = small_data.test[:6]
    preds = fitted.predict([r.without_label() for r in recs])
    exps = explain_records(fitted.model, fitted.ctx, fitted.featurizer, recs, preds, DisabledChatClient(), 4)
    for rec, pred, exp in zip(recs, preds, exps):
        assert exp.predicted_label == pred.ranked_labels[0] and exp.record_id == rec.id
        ps = retrieve(fitted.model, fitted.ctx, fitted.featurizer, rec.without_label(), exp.predicted_label)
        allowed = {(t.head, t.relation, t.tail) for t in subgraph_triples(ps, small_graph)}
        assert 1 <= len(exp.supporting_triples) <= 4
        assert {(t.head, t.relation, t.tail) for t in exp.supporting_triples} <= allowed
        att = [t.attention for t in exp.supporting_triples]
        assert att == sorted(att, reverse=True)
    assert all(v.equal(fitted.model.state_dict()[k]) for k, v in before.items())
    assert len(small_graph.edges) == n_edges
    lines = dumps_explanations(exps).splitlines()
    assert len(lines) == len(recs)
    assert set(json.loads(lines[0])) == {"record_id", "predicted_label", "text", "triples", "generator"}


def test_explanation_ignores_gold_label(small_graph, small_data, small_encoder, small_hp):
    fitted = prepare(small_graph, small_encoder, small_hp, small_data.train)
    recs = small_data.test[:3]
    preds = fitted.predict(recs)
    a = explain_records(fitted.model, fitted.ctx, fitted.featurizer, recs, preds, None)
    b = explain_records(fitted.model, fitted.ctx, fitted.featurizer, [r.without_label() for r in recs], preds, None)
    assert [e.to_dict() for e in a] == [e.to_dict() for e in b]
    assert isinstance(a[0], Explanation)
