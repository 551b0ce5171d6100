"""Patient-specific explanations grounded in the retrieved subgraph of the predicted disease."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .errors import ChatUnavailable, InvalidInput, ProtoKGError
from .fusion import UnifiedGraph
from .keywords import extract_keywords
from .kg_construction import ChatClient
from .model import Featurizer, GraphContext, ModelState
from .patient import PatientRecord
from .retrieval import PatientSubgraph, attend_subgraph
from .training import Prediction

DEFAULT_TOP_N = 5

EXPLANATION_PROMPT = """You are assisting a physician. A patient described their condition as follows:

\"\"\"{narrative}\"\"\"

The model predicts the disease: {label}

Knowledge graph facts retrieved for this patient, most relevant first:
{triples}

Explain in a short paragraph why the patient's description is consistent with the predicted disease. \
Only rely on the narrative and the facts listed above."""


@dataclass(frozen=True)
class SupportingTriple:
    head: str
    relation: str
    tail: str
    attention: float

    def render(self) -> str:
        return f"{self.head} —{self.relation}→ {self.tail} (attention={self.attention:.4f})"

    def to_dict(self) -> dict:
        return {"head": self.head, "relation": self.relation, "tail": self.tail,
                "attention": self.attention}


@dataclass
class ExplanationRequest:
    record: PatientRecord
    prediction: Prediction
    subgraph: PatientSubgraph
    graph: UnifiedGraph

    def __post_init__(self):
        center = self.graph.nodes[self.subgraph.center_disease].canonical_label
        if not self.prediction.ranked_labels or center != self.prediction.ranked_labels[0]:
            raise InvalidInput("explanation subgraph must be centered at the top-1 prediction")

    @property
    def predicted_label(self) -> str:
        return self.prediction.ranked_labels[0]


@dataclass
class Explanation:
    record_id: str
    predicted_label: str
    text: str
    supporting_triples: list[SupportingTriple] = field(default_factory=list)
    generator: str = "template"

    def to_dict(self) -> dict:
        return {"record_id": self.record_id, "predicted_label": self.predicted_label, "text": self.text,
                "triples": [t.to_dict() for t in self.supporting_triples], "generator": self.generator}


def subgraph_triples(ps: PatientSubgraph, graph: UnifiedGraph) -> list[SupportingTriple]:
    """Every edge of the subgraph, scored by its more attended endpoint, best first."""
    out = []
    for h, r, t in ps.edges:
        out.append(SupportingTriple(graph.nodes[h].canonical_label, graph.relations[r].canonical_label,
                                    graph.nodes[t].canonical_label, max(ps.attention[h], ps.attention[t])))
    out.sort(key=lambda x: (-x.attention, x.head, x.relation, x.tail))
    return out


def top_triples(request: ExplanationRequest, top_n: int = DEFAULT_TOP_N) -> list[SupportingTriple]:
    if top_n < 1:
        raise InvalidInput("top_n must be at least 1")
    triples = subgraph_triples(request.subgraph, request.graph)
    if not triples:
        raise InvalidInput("retrieved subgraph has no triples")
    return triples[:top_n]


def build_prompt(request: ExplanationRequest, top_n: int = DEFAULT_TOP_N) -> str:
    triples = top_triples(request, top_n)
    return EXPLANATION_PROMPT.format(narrative=request.record.narrative, label=request.predicted_label,
                                     triples="\n".join(f"- {t.render()}" for t in triples))


def template_text(request: ExplanationRequest, triples: Sequence[SupportingTriple]) -> str:
    facts = "; ".join(f"{t.head} {t.relation} {t.tail} (attention {t.attention:.4f})" for t in triples)
    return (f"Predicted disease: {request.predicted_label}. "
            f"The retrieved knowledge most relevant to this patient: {facts}. "
            f"These facts link the reported narrative to {request.predicted_label}.")


def explain(request: ExplanationRequest, client: ChatClient | None,
            top_n: int = DEFAULT_TOP_N) -> Explanation:
    """LLM explanation when the client answers, otherwise the deterministic template."""
    triples = top_triples(request, top_n)
    text, generator = "", "template"
    if client is not None:
        try:
            text = client.complete(build_prompt(request, top_n)).strip()
            generator = "llm"
        except (ChatUnavailable, ProtoKGError, OSError):
            text = ""
    if not text:
        text, generator = template_text(request, triples), "template"
    return Explanation(request.record.id, request.predicted_label, text, triples, generator)


@torch.no_grad()
def retrieve(model: ModelState, ctx: GraphContext, featurizer: Featurizer, record: PatientRecord,
             label: str) -> PatientSubgraph:
    """Attention-weighted 2-hop subgraph of ``label`` for one record.

    A narrative without any usable keyword falls back to the prototype prior alone.
    """
    protos = model.prototypes(ctx)
    words = []
    if featurizer.stats is not None:
        words = extract_keywords(record.narrative, featurizer.stats, model.hp.theta).words
    if words:
        kv = torch.as_tensor(np.stack([featurizer.encoder.embed(w) for w in words]), dtype=protos.dtype)
        q = model.query_from_keywords(kv, protos)
    else:
        q = protos.mean(dim=0)
    return attend_subgraph(q, ctx.subgraph(label), ctx.features, model.retrieval)


def explain_records(model: ModelState, ctx: GraphContext, featurizer: Featurizer,
                    records: Sequence[PatientRecord], predictions: Sequence[Prediction],
                    client: ChatClient | None, top_n: int = DEFAULT_TOP_N) -> list[Explanation]:
    """Explanations centered at each record's predicted label; gold labels are never read."""
    if len(records) != len(predictions):
        raise InvalidInput("records and predictions differ in length")
    out = []
    for rec, pred in zip(records, predictions):
        rec = rec.without_label()
        ps = retrieve(model, ctx, featurizer, rec, pred.ranked_labels[0])
        out.append(explain(ExplanationRequest(rec, pred, ps, ctx.graph), client, top_n))
    return out


def dumps_explanations(explanations: Sequence[Explanation]) -> str:
    return "".join(json.dumps(e.to_dict(), ensure_ascii=False, sort_keys=True) + "\n" for e in explanations)
