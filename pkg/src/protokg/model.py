"""Trainable parameters of the whole pipeline plus the tensors they consume."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .encoding import DTYPE, Adapter, Encoder
from .errors import InvalidInput, UnknownCategory, UnknownDisease
from .fusion import UnifiedGraph
from .graph_encoder import GraphEncoder, GraphTensors, PrototypeSet, reweight_features
from .keywords import CorpusStats, extract_keywords
from .patient import (DEFAULT_GENDERS, PatientEncoder, PatientRecord, age_bucket, clinical_vector,
                      encode_narrative, sentence_vectors)
from .retrieval import RetrievalAttention, Subgraph, batch_attention, build_query, two_hop_neighborhood


def derive_seed(seed: int, stream: str) -> int:
    """Independent 63-bit seed for a named random substream (data, init, training, ...)."""
    tag = int.from_bytes(hashlib.sha256(stream.encode("utf-8")).digest()[:8], "little")
    return int(np.random.SeedSequence([int(seed), tag]).generate_state(2, np.uint64)[0] >> np.uint64(1))


@dataclass
class Hyperparams:
    dim: int = 64
    tau: float = 0.1
    lam: float = 0.5
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    theta: float = 0.05
    beta_init: float = 0.0
    retrieval_heads: int = 4
    patient_heads: int = 2
    activation: str = "elu"
    prototype_mode: str = "knowledge"
    genders: tuple = DEFAULT_GENDERS
    clinical_fields: tuple = ()

    def __post_init__(self):
        self.genders = tuple(self.genders)
        self.clinical_fields = tuple(self.clinical_fields)
        if self.tau <= 0:
            raise InvalidInput("tau must be positive")
        if self.lam < 0:
            raise InvalidInput("lambda must be non-negative")
        if self.prototype_mode not in ("knowledge", "random"):
            raise InvalidInput(f"unknown prototype mode {self.prototype_mode!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["genders"] = list(self.genders)
        d["clinical_fields"] = list(self.clinical_fields)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class GraphContext:
    """Unified graph tensors plus cached 2-hop neighborhoods per disease."""

    def __init__(self, graph: UnifiedGraph):
        self.graph = graph
        self.tensors = GraphTensors(graph)
        self.labels = self.tensors.labels
        self.label_index = self.tensors.label_index
        self._subgraphs: dict[str, Subgraph] = {}

    @property
    def features(self) -> torch.Tensor:
        return self.tensors.features

    def subgraph(self, label: str) -> Subgraph:
        sub = self._subgraphs.get(label)
        if sub is None:
            sub = self._subgraphs[label] = two_hop_neighborhood(self.graph, label)
        return sub


@dataclass
class PatientBatch:
    """Padded frozen features for a list of records (label -1 when absent)."""

    ids: list[str]
    sentences: torch.Tensor
    sentence_mask: torch.Tensor
    gender: torch.Tensor
    age: torch.Tensor
    clinical: torch.Tensor
    labels: torch.Tensor
    keywords: torch.Tensor | None = None
    keyword_mask: torch.Tensor | None = None
    keyword_terms: list[list[str]] = field(default_factory=list)

    def __len__(self):
        return len(self.ids)

    def take(self, idx) -> "PatientBatch":
        idx_t = torch.as_tensor(idx, dtype=torch.long)
        pick = lambda t: None if t is None else t[idx_t]  # noqa: E731
        return PatientBatch(
            [self.ids[i] for i in idx], pick(self.sentences), pick(self.sentence_mask),
            pick(self.gender), pick(self.age), pick(self.clinical), pick(self.labels),
            pick(self.keywords), pick(self.keyword_mask),
            [self.keyword_terms[i] for i in idx] if self.keyword_terms else [])


def _pad(rows: Sequence[np.ndarray], dim: int) -> tuple[torch.Tensor, torch.Tensor]:
    width = max(len(r) for r in rows)
    out = np.zeros((len(rows), width, dim))
    mask = np.zeros((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
        mask[i, :len(r)] = True
    return torch.as_tensor(out, dtype=DTYPE), torch.as_tensor(mask)


class Featurizer:
    """Turns patient records into frozen-encoder tensors; never reads labels for features."""

    def __init__(self, encoder: Encoder, hp: Hyperparams, label_index: dict[str, int],
                 stats: CorpusStats | None = None):
        self.encoder = encoder
        self.hp = hp
        self.label_index = label_index
        self.stats = stats
        self.genders = tuple(hp.genders)

    def __call__(self, records: Sequence[PatientRecord], with_keywords: bool | None = None) -> PatientBatch:
        if not records:
            raise InvalidInput("no records to featurize")
        with_keywords = self.stats is not None if with_keywords is None else with_keywords
        dim = self.encoder.dim
        sents, genders, ages, clin, labels, kws, terms = [], [], [], [], [], [], []
        for rec in records:
            sents.append(sentence_vectors(rec.narrative, self.encoder))
            if rec.gender not in self.genders:
                raise UnknownCategory(f"record {rec.id!r}: gender {rec.gender!r} not in {self.genders}")
            genders.append(self.genders.index(rec.gender))
            ages.append(age_bucket(rec.age))
            clin.append(clinical_vector(rec.clinical_profile, self.hp.clinical_fields, dim)[0])
            if rec.label is None:
                labels.append(-1)
            elif rec.label in self.label_index:
                labels.append(self.label_index[rec.label])
            else:
                raise UnknownDisease(f"record {rec.id!r}: label {rec.label!r} not in graph")
            if with_keywords:
                ks = extract_keywords(rec.narrative, self.stats, self.hp.theta)
                if not ks.words:
                    raise InvalidInput(f"record {rec.id!r}: narrative has no usable keyword")
                terms.append(ks.words)
                kws.append(np.stack([self.encoder.embed(w) for w in ks.words]))
        sent_t, sent_m = _pad(sents, dim)
        batch = PatientBatch(
            [r.id for r in records], sent_t, sent_m, torch.tensor(genders, dtype=torch.long),
            torch.tensor(ages, dtype=torch.long), torch.as_tensor(np.stack(clin), dtype=DTYPE),
            torch.tensor(labels, dtype=torch.long))
        if with_keywords:
            batch.keywords, batch.keyword_mask = _pad(kws, dim)
            batch.keyword_terms = terms
        return batch


class ModelState(nn.Module):
    """Registry of every trainable tensor.

    ``adapter`` + ``gate`` form the trainable text encoder and gated pooling
    (shared by keyword and narrative aggregation), ``beta_param`` and
    ``retrieval`` drive subgraph attention, ``graph_encoder`` produces prototypes
    and graph-based patient embeddings, ``patient`` produces h_p.
    """

    def __init__(self, hp: Hyperparams, num_diseases: int):
        super().__init__()
        self.hp = hp
        gen = torch.Generator().manual_seed(derive_seed(hp.seed, "init"))
        d = hp.dim
        self.adapter = Adapter(d)
        self.gate = nn.Parameter(torch.empty(d, d, dtype=DTYPE))
        nn.init.xavier_uniform_(self.gate, generator=gen)
        self.beta_param = nn.Parameter(torch.tensor(float(hp.beta_init), dtype=DTYPE))
        self.retrieval = RetrievalAttention(d, hp.retrieval_heads, gen)
        self.graph_encoder = GraphEncoder(d, act=hp.activation, generator=gen)
        self.patient = PatientEncoder(d, hp.genders, hp.patient_heads, generator=gen)
        if hp.prototype_mode == "random":
            self.free_prototypes = nn.Parameter(torch.empty(num_diseases, d, dtype=DTYPE))
            nn.init.normal_(self.free_prototypes, 0.0, d ** -0.5, generator=gen)
        else:
            self.free_prototypes = None

    def prototypes(self, ctx: GraphContext) -> torch.Tensor:
        if self.free_prototypes is not None:
            return self.free_prototypes
        out = self.graph_encoder(ctx.tensors.features, ctx.tensors.edge_index)
        return out[ctx.tensors.disease_rows]

    def prototype_set(self, ctx: GraphContext) -> PrototypeSet:
        return PrototypeSet(list(ctx.labels), self.prototypes(ctx))

    def narrative_embedding(self, batch: PatientBatch) -> torch.Tensor:
        return encode_narrative(batch.sentences, self.adapter, self.gate, batch.sentence_mask)

    def patient_embedding(self, batch: PatientBatch) -> torch.Tensor:
        return self.patient(batch.gender, batch.age, batch.clinical, self.narrative_embedding(batch))

    def query(self, batch: PatientBatch, prototypes: torch.Tensor) -> torch.Tensor:
        if batch.keywords is None:
            raise InvalidInput("batch was featurized without keywords")
        q, _ = build_query(batch.keywords, self.adapter, prototypes, self.beta_param, self.gate,
                           batch.keyword_mask)
        return q

    def query_from_keywords(self, keyword_vectors: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
        q, _ = build_query(keyword_vectors, self.adapter, prototypes, self.beta_param, self.gate)
        return q

    def graph_patient_embedding(self, queries: torch.Tensor, labels: Sequence[str] | torch.Tensor,
                                ctx: GraphContext, return_attention: bool = False):
        """h_gp for each query, on the 2-hop subgraph of the given disease labels."""
        if isinstance(labels, torch.Tensor):
            labels = [ctx.labels[i] for i in labels.tolist()]
        node_ids, segment, edges, centers = [], [], [], []
        offset = 0
        for b, label in enumerate(labels):
            sub = ctx.subgraph(label)
            n = len(sub.nodes)
            node_ids.extend(sub.nodes)
            segment.extend([b] * n)
            edges.append(sub.local_edge_index() + offset)
            centers.append(offset + sub.center_position)
            offset += n
        node_ids = torch.tensor(node_ids, dtype=torch.long)
        segment = torch.tensor(segment, dtype=torch.long)
        alpha = batch_attention(queries, node_ids, segment, ctx.features, self.retrieval)
        sizes = torch.bincount(segment, minlength=len(labels))[segment]
        x = reweight_features(ctx.features[node_ids], alpha, sizes)
        out = self.graph_encoder(x, torch.cat(edges, dim=1))
        h_gp = out[torch.tensor(centers, dtype=torch.long)]
        if return_attention:
            return h_gp, alpha, node_ids, segment
        return h_gp


def build_model(hp: Hyperparams, ctx: GraphContext) -> ModelState:
    return ModelState(hp, len(ctx.labels))
