"""
Long-tail sweep: one category starved of training data
======================================================

Subsamples the first category's training records and compares the
knowledge-derived prototypes with freely learned ones ("wo_pk"). Reports the
starved category's hit@1 for each setting.

A single small run like this one is noisy and the two settings can swap order;
the acceptance suite averages three seeds at D=64.
"""

import torch

from protokg.encoding import HashEncoder
from protokg.experiments import run_experiment, subsample
from protokg.kg_construction import MemoryChatClient
from protokg.model import Hyperparams
from protokg.pipeline import build_graph
from protokg.synthetic import CLINICAL_FIELDS, GENDERS, SyntheticSpec, generate_synthetic

torch.set_num_threads(1)

data = generate_synthetic(SyntheticSpec(categories=3, tags_per_category=4, records_per_tag=(30, 5, 10), seed=1))
encoder = HashEncoder(32, seed=1)
graph = build_graph(data.corpus, MemoryChatClient(data.transcripts), encoder, 0.85)
hp = Hyperparams(dim=32, clinical_fields=CLINICAL_FIELDS, genders=GENDERS, lr=3e-3, epochs=15, seed=1)

# keep 10% of cat1, everything else untouched
train = subsample(data.train, 0.1, hp.seed, keep=lambda r: graph.category_of(r.label) != "cat1")
print(len(train), "of", len(data.train), "training records kept")

series = run_experiment("ablation", graph, encoder, hp, train, data.valid, data.test, values=["full", "wo_pk"],
                        on_setting=lambda r: print("finished", r.name))
for r in series.results:
    print(f"{r.name:6s} cat1 hit@1 = {r.report.per_category['cat1']['hit@1']:.3f}   "
          f"overall hit@1 = {r.report.overall['hit@1']:.3f}")

# the same imbalance grid as a table (one row per setting x category)
series = run_experiment("single_class_imbalance", graph, encoder, hp, data.train, data.valid, data.test,
                        values=[0.0, 0.5, 1.0], target_category="cat1")
print(series.table())
