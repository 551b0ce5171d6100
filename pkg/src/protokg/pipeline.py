"""In-process orchestration: corpus -> graph -> trained model -> report."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from typing import Sequence

from .encoding import Encoder
from .fusion import UnifiedGraph, fuse
from .keywords import CorpusStats, build_stats
from .kg_construction import ChatClient, define_relations, extract_corpus
from .metrics import EvalReport, evaluate_predictions
from .model import Featurizer, GraphContext, Hyperparams, ModelState, PatientBatch
from .patient import PatientRecord
from .training import TrainResult, predict, score_matrix, train


def build_knowledge(corpus: Sequence[dict], client: ChatClient, workers: int = 1):
    """Stage one and two over a ``{label, description}`` corpus."""
    results = extract_corpus(client, corpus, workers=workers)
    triplets = [t for r in results for t in r.triplets]
    definitions = define_relations(client, triplets, [c["label"] for c in corpus])
    return triplets, definitions, results


def build_graph(corpus: Sequence[dict], client: ChatClient, encoder: Encoder,
                delta: float) -> UnifiedGraph:
    triplets, definitions, _ = build_knowledge(corpus, client)
    cats = {c["label"]: c["category"] for c in corpus if c.get("category")}
    return fuse(triplets, definitions, delta, encoder,
                disease_labels=[c["label"] for c in corpus], disease_categories=cats)


def dataset_hash(records: Sequence[PatientRecord]) -> str:
    blob = json.dumps([r.to_dict() for r in records], sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class FittedPipeline:
    model: ModelState
    ctx: GraphContext
    featurizer: Featurizer
    stats: CorpusStats
    result: TrainResult | None = None

    def batch(self, records: Sequence[PatientRecord], with_keywords: bool = False) -> PatientBatch:
        return self.featurizer(records, with_keywords=with_keywords)

    def predict(self, records: Sequence[PatientRecord]):
        return predict(self.model, self.batch(records), self.ctx)

    def evaluate(self, records: Sequence[PatientRecord], checkpoint_id: str = "",
                 setting: dict | None = None) -> EvalReport:
        batch = self.batch(records)
        scores = score_matrix(self.model, batch, self.ctx)
        preds = predict(self.model, batch, self.ctx)
        graph = self.ctx.graph
        return evaluate_predictions(
            preds, scores, [r.label for r in records], self.ctx.labels, graph.category_of,
            seed=self.model.hp.seed, dataset_hash=dataset_hash(records),
            checkpoint_id=checkpoint_id, setting=dict(setting or {}))


def prepare(graph: UnifiedGraph, encoder: Encoder, hp: Hyperparams,
            train_records: Sequence[PatientRecord], stats: CorpusStats | None = None,
            model: ModelState | None = None) -> FittedPipeline:
    ctx = GraphContext(graph)
    stats = stats or build_stats([r.narrative for r in train_records])
    featurizer = Featurizer(encoder, hp, ctx.label_index, stats)
    model = model or ModelState(hp, len(ctx.labels))
    return FittedPipeline(model, ctx, featurizer, stats)


def fit(graph: UnifiedGraph, encoder: Encoder, hp: Hyperparams,
        train_records: Sequence[PatientRecord], valid_records: Sequence[PatientRecord] = (),
        **overrides) -> FittedPipeline:
    if overrides:
        hp = replace(hp, **overrides)
    fitted = prepare(graph, encoder, hp, train_records)
    train_batch = fitted.featurizer(train_records, with_keywords=hp.lam != 0)
    valid_batch = fitted.featurizer(valid_records, with_keywords=False) if valid_records else None
    fitted.result = train(fitted.model, train_batch, fitted.ctx, valid_batch)
    return fitted
