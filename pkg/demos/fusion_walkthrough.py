"""
Fusing per-disease triplets into one graph
==========================================

Surface forms that embed close together (cosine above delta) collapse into one
node labelled by their most frequent form. Raising delta only ever splits
clusters.
"""

from protokg.encoding import HashEncoder
from protokg.fusion import fuse, refuse
from protokg.kg_construction import KnowledgeTriplet, RelationDefinition

triplets = [
    KnowledgeTriplet("influenza", "causes", "high fever", "influenza"),
    KnowledgeTriplet("influenza", "leads to", "Fever high", "influenza"),
    KnowledgeTriplet("influenza", "causes", "dry cough", "influenza"),
    KnowledgeTriplet("bronchitis", "causes", "cough dry", "bronchitis"),
    KnowledgeTriplet("bronchitis", "results in", "chest pain", "bronchitis"),
    KnowledgeTriplet("bronchitis", "causes", "high fever", "bronchitis"),
]
definitions = [
    RelationDefinition("causes", "the head condition produces the tail symptom"),
    RelationDefinition("leads to", "the head condition produces the tail symptom"),
    RelationDefinition("results in", "the head condition brings about the tail"),
]
encoder = HashEncoder(32, seed=0)

for delta in (0.6, 0.85, 1.0):
    g = fuse(triplets, definitions, delta, encoder)
    print(f"delta={delta}: {len(g.nodes)} nodes, {len(g.relations)} relations")
    for n in g.nodes:
        print("   ", n.canonical_label, dict(n.members), "(disease)" if n.is_disease else "")

# fusing an already fused graph changes nothing
g = fuse(triplets, definitions, 0.85, encoder)
print("idempotent:", refuse(g, encoder).structure() == g.structure())
