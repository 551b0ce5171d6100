"""Embedding-based alignment of extracted triplets into one unified graph.

Entities and relations are embedded with the frozen encoder, grouped by
single-linkage over the cosine-similarity graph thresholded at ``delta``, and
each group becomes one node (or relation) with a canonical label and the mean of
its members' embeddings.
"""
from __future__ import annotations

import hashlib
import json
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .encoding import Encoder
from .errors import InvalidGraph, InvalidInput, UnknownDisease
from .kg_construction import KnowledgeTriplet, RelationDefinition

GRAPH_FORMAT = "protokg.unified-graph"
GRAPH_VERSION = 1
DEFAULT_DELTA = 0.85


@dataclass
class GraphNode:
    id: int
    canonical_label: str
    members: dict[str, int]
    embedding: np.ndarray
    is_disease: bool = False

    @property
    def member_surface_forms(self) -> list[str]:
        return sorted(self.members)


@dataclass
class GraphRelation:
    id: int
    canonical_label: str
    members: dict[str, int]
    definitions: dict[str, str]
    embedding: np.ndarray

    @property
    def member_surface_forms(self) -> list[str]:
        return sorted(self.members)

    @property
    def definition(self) -> str:
        return self.definitions.get(self.canonical_label, "")


@dataclass
class UnifiedGraph:
    dim: int
    delta: float
    corpus_hash: str
    nodes: list[GraphNode]
    relations: list[GraphRelation]
    edges: list[tuple[int, int, int]]
    disease_categories: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self._disease_index = {n.canonical_label: n.id for n in self.nodes if n.is_disease}
        self._neighbors: list[set[int]] | None = None

    @property
    def disease_labels(self) -> list[str]:
        """Disease labels in canonical (lexicographic) order."""
        return sorted(self._disease_index)

    def disease_node(self, label: str) -> int:
        try:
            return self._disease_index[label]
        except KeyError:
            raise UnknownDisease(label) from None

    def neighbors(self, node_id: int) -> set[int]:
        """Undirected neighbors (edge direction and relation type ignored)."""
        if self._neighbors is None:
            nbrs: list[set[int]] = [set() for _ in self.nodes]
            for h, _, t in self.edges:
                nbrs[h].add(t)
                nbrs[t].add(h)
            self._neighbors = nbrs
        return self._neighbors[node_id]

    def node_embeddings(self) -> np.ndarray:
        return np.stack([n.embedding for n in self.nodes])

    def category_of(self, label: str) -> str:
        return self.disease_categories.get(label, "all")

    def structure(self) -> tuple:
        """Hashable structural summary used for equality checks."""
        nodes = tuple((n.canonical_label, n.is_disease, tuple(sorted(n.members.items())))
                      for n in self.nodes)
        rels = tuple((r.canonical_label, tuple(sorted(r.members.items()))) for r in self.relations)
        edges = tuple(sorted((self.nodes[h].canonical_label, self.relations[r].canonical_label,
                              self.nodes[t].canonical_label) for h, r, t in self.edges))
        return nodes, rels, edges

    def check_integrity(self) -> None:
        seen: set[str] = set()
        for i, n in enumerate(self.nodes):
            if n.id != i:
                raise InvalidGraph("node ids must be dense and ordered")
            overlap = seen.intersection(n.members)
            if overlap:
                raise InvalidGraph(f"surface forms shared between nodes: {sorted(overlap)}")
            seen.update(n.members)
        for h, r, t in self.edges:
            if not (0 <= h < len(self.nodes) and 0 <= t < len(self.nodes)
                    and 0 <= r < len(self.relations)):
                raise InvalidGraph(f"dangling edge {(h, r, t)}")


# -- clustering ------------------------------------------------------------

def _unit_rows(embeddings) -> np.ndarray:
    arr = np.asarray(embeddings, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidInput("expected a list of equal-length embeddings")
    norms = np.linalg.norm(arr, axis=1)
    if np.any(norms == 0):
        raise InvalidInput("cosine similarity undefined for a zero-norm embedding")
    return arr / norms[:, None]


def cluster_by_similarity(embeddings: Sequence[np.ndarray], delta: float,
                          cannot_link: Sequence[object | None] | None = None) -> list[list[int]]:
    """Partition indices by transitive closure of ``cos(i, j) > delta``.

    ``cannot_link`` optionally tags items (``None`` = untagged); two groups holding
    different tags are never merged. Candidate merges are applied strongest first,
    so the result is deterministic. Without tags this is plain single linkage.
    """
    if not 0.0 < delta <= 1.0:
        raise InvalidInput(f"delta must lie in (0, 1], got {delta}")
    n = len(embeddings)
    if n == 0:
        return []
    unit = _unit_rows(embeddings)
    sim = unit @ unit.T
    iu, ju = np.triu_indices(n, k=1)
    keep = sim[iu, ju] > delta
    iu, ju, s = iu[keep], ju[keep], sim[iu, ju][keep]
    order = np.lexsort((ju, iu, -s))

    parent = list(range(n))
    tag = [None] * n if cannot_link is None else list(cannot_link)

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for k in order:
        a, b = find(int(iu[k])), find(int(ju[k]))
        if a == b:
            continue
        if tag[a] is not None and tag[b] is not None and tag[a] != tag[b]:
            continue
        lo, hi = min(a, b), max(a, b)
        parent[hi] = lo
        tag[lo] = tag[lo] if tag[lo] is not None else tag[hi]

    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values(), key=lambda g: g[0])


def elect_canonical(members: dict[str, int]) -> str:
    """Most frequent surface form; ties go to the lexicographically smallest."""
    return min(members, key=lambda form: (-members[form], form))


def embed_items(encoder: Encoder, surface_texts: Sequence[str]) -> list[np.ndarray]:
    if len(surface_texts) == 0:
        raise InvalidInput("embed_items needs at least one text")
    return [encoder.embed(t) for t in surface_texts]


def relation_fusion_text(surface: str, definition: str) -> str:
    return f"{surface}: {definition}" if definition else surface


# -- fusion ----------------------------------------------------------------

def corpus_hash(triplets: Iterable[KnowledgeTriplet], definitions: Iterable[RelationDefinition],
                disease_labels: Iterable[str] = ()) -> str:
    payload = {
        "triplets": sorted([t.head, t.relation, t.tail, t.source_disease] for t in triplets),
        "definitions": sorted([d.relation, d.definition] for d in definitions),
        "diseases": sorted(set(disease_labels)),
    }
    return hashlib.sha256(json.dumps(payload, ensure_ascii=False).encode("utf-8")).hexdigest()


def _fuse_items(entity_counts: Counter, relation_counts: Counter, relation_defs: dict[str, str],
                edge_forms: Iterable[tuple[str, str, str]], disease_labels: set[str],
                delta: float, encoder: Encoder) -> tuple[list[GraphNode], list[GraphRelation], list]:
    for label in disease_labels:
        entity_counts.setdefault(label, 0)

    forms = sorted(entity_counts)
    emb = embed_items(encoder, forms)
    tags = [f if f in disease_labels else None for f in forms]
    raw_nodes = []
    for group in cluster_by_similarity(emb, delta, cannot_link=tags):
        members = {forms[i]: entity_counts[forms[i]] for i in group}
        diseases = [forms[i] for i in group if tags[i] is not None]
        canonical = diseases[0] if diseases else elect_canonical(members)
        vec = np.mean([emb[i] for i in group], axis=0)
        raw_nodes.append((canonical, members, vec, bool(diseases)))
    raw_nodes.sort(key=lambda x: (x[0], sorted(x[1])))
    nodes = [GraphNode(i, c, m, v, d) for i, (c, m, v, d) in enumerate(raw_nodes)]
    node_of = {form: n.id for n in nodes for form in n.members}

    rforms = sorted(relation_counts)
    raw_rels = []
    if rforms:
        remb = embed_items(encoder, [relation_fusion_text(f, relation_defs[f]) for f in rforms])
        for group in cluster_by_similarity(remb, delta):
            members = {rforms[i]: relation_counts[rforms[i]] for i in group}
            defs = {rforms[i]: relation_defs[rforms[i]] for i in group}
            raw_rels.append((elect_canonical(members), members, defs,
                             np.mean([remb[i] for i in group], axis=0)))
    raw_rels.sort(key=lambda x: (x[0], sorted(x[1])))
    relations = [GraphRelation(i, c, m, d, v) for i, (c, m, d, v) in enumerate(raw_rels)]
    rel_of = {form: r.id for r in relations for form in r.members}

    edges = set()
    for h, r, t in edge_forms:
        hi, ti = node_of[h], node_of[t]
        if hi != ti:
            edges.add((hi, rel_of[r], ti))
    return nodes, relations, sorted(edges)


def fuse(triplets: Sequence[KnowledgeTriplet], definitions: Sequence[RelationDefinition],
         delta: float, encoder: Encoder, disease_labels: Iterable[str] = (),
         disease_categories: dict[str, str] | None = None) -> UnifiedGraph:
    """Build the unified graph from a triplet corpus.

    ``disease_labels`` adds diseases that produced no triplets so every corpus label
    still has its own node.
    """
    if not triplets:
        raise InvalidInput("cannot fuse an empty triplet corpus")
    if not 0.0 < delta <= 1.0:
        raise InvalidInput(f"delta must lie in (0, 1], got {delta}")
    defs = {d.relation: d.definition for d in definitions}
    missing = sorted({t.relation for t in triplets} - set(defs))
    if missing:
        raise InvalidInput(f"relations without a definition: {missing}")
    labels = {t.source_disease for t in triplets} | set(disease_labels)
    entity_counts = Counter()
    for t in triplets:
        entity_counts[t.head] += 1
        entity_counts[t.tail] += 1
    relation_counts = Counter(t.relation for t in triplets)
    nodes, relations, edges = _fuse_items(
        entity_counts, relation_counts, {r: defs[r] for r in relation_counts},
        ((t.head, t.relation, t.tail) for t in triplets), labels, delta, encoder)
    graph = UnifiedGraph(encoder.dim, float(delta), corpus_hash(triplets, definitions, labels),
                         nodes, relations, edges, dict(disease_categories or {}))
    graph.check_integrity()
    return graph


def refuse(graph: UnifiedGraph, encoder: Encoder, delta: float | None = None) -> UnifiedGraph:
    """Run fusion again on an already fused graph (members, counts and definitions kept)."""
    delta = graph.delta if delta is None else delta
    entity_counts = Counter({f: c for n in graph.nodes for f, c in n.members.items()})
    relation_counts = Counter({f: c for r in graph.relations for f, c in r.members.items()})
    relation_defs = {f: d for r in graph.relations for f, d in r.definitions.items()}
    edge_forms = [(graph.nodes[h].canonical_label, graph.relations[r].canonical_label,
                   graph.nodes[t].canonical_label) for h, r, t in graph.edges]
    labels = {n.canonical_label for n in graph.nodes if n.is_disease}
    nodes, relations, edges = _fuse_items(entity_counts, relation_counts, relation_defs,
                                          edge_forms, labels, delta, encoder)
    out = UnifiedGraph(graph.dim, float(delta), graph.corpus_hash, nodes, relations, edges,
                       dict(graph.disease_categories))
    out.check_integrity()
    return out


# -- persistence -------------------------------------------------------------

def graph_to_dict(graph: UnifiedGraph, encoder_info: dict | None = None) -> dict:
    return {
        "format": GRAPH_FORMAT,
        "version": GRAPH_VERSION,
        "header": {"dim": graph.dim, "delta": graph.delta, "corpus_hash": graph.corpus_hash,
                   "encoder": encoder_info or {}},
        "nodes": [{"id": n.id, "canonical_label": n.canonical_label, "members": n.members,
                   "is_disease": n.is_disease} for n in graph.nodes],
        "relations": [{"id": r.id, "canonical_label": r.canonical_label, "members": r.members,
                       "definitions": r.definitions} for r in graph.relations],
        "edges": [list(e) for e in graph.edges],
        "disease_categories": graph.disease_categories,
        # json writes floats with repr(), which round-trips float64 exactly
        "embeddings": {"nodes": [n.embedding.tolist() for n in graph.nodes],
                       "relations": [r.embedding.tolist() for r in graph.relations]},
    }


def graph_from_dict(data: dict) -> UnifiedGraph:
    if data.get("format") != GRAPH_FORMAT:
        raise InvalidGraph("not a unified graph file")
    if data.get("version") != GRAPH_VERSION:
        raise InvalidGraph(f"unsupported graph file version {data.get('version')}")
    head = data["header"]
    nemb = data["embeddings"]["nodes"]
    remb = data["embeddings"]["relations"]
    nodes = [GraphNode(n["id"], n["canonical_label"], dict(n["members"]),
                       np.asarray(nemb[i], dtype=np.float64), bool(n["is_disease"]))
             for i, n in enumerate(data["nodes"])]
    rels = [GraphRelation(r["id"], r["canonical_label"], dict(r["members"]), dict(r["definitions"]),
                          np.asarray(remb[i], dtype=np.float64))
            for i, r in enumerate(data["relations"])]
    graph = UnifiedGraph(int(head["dim"]), float(head["delta"]), head["corpus_hash"], nodes, rels,
                         [tuple(e) for e in data["edges"]], dict(data.get("disease_categories", {})))
    graph.check_integrity()
    return graph


def dumps_graph(graph: UnifiedGraph, encoder_info: dict | None = None) -> str:
    return json.dumps(graph_to_dict(graph, encoder_info), ensure_ascii=False, indent=1) + "\n"


def save_graph(graph: UnifiedGraph, path: str | os.PathLike, encoder_info: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_graph(graph, encoder_info))


def load_graph(path: str | os.PathLike) -> UnifiedGraph:
    with open(path, encoding="utf-8") as fh:
        return graph_from_dict(json.load(fh))
