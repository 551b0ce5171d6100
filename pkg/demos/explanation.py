"""
Explaining a prediction with its retrieved subgraph
===================================================

The top-1 disease's two-hop neighborhood is weighted by the patient's query,
its most attended triples go into the prompt, and the text comes from the chat
client. Without a client the deterministic template is used.
"""

import torch

from protokg.encoding import HashEncoder
from protokg.explanation import ExplanationRequest, build_prompt, explain, retrieve
from protokg.kg_construction import DisabledChatClient, MemoryChatClient, prompt_key
from protokg.model import Hyperparams
from protokg.pipeline import build_graph, fit
from protokg.synthetic import CLINICAL_FIELDS, GENDERS, SyntheticSpec, generate_synthetic

torch.set_num_threads(1)

data = generate_synthetic(SyntheticSpec(categories=2, tags_per_category=3, records_per_tag=(20, 5, 5), seed=2))
encoder = HashEncoder(32, seed=2)
graph = build_graph(data.corpus, MemoryChatClient(data.transcripts), encoder, 0.85)
hp = Hyperparams(dim=32, clinical_fields=CLINICAL_FIELDS, genders=GENDERS, lr=3e-3, epochs=10, seed=2)
fitted = fit(graph, encoder, hp, data.train, data.valid)

record = data.test[0].without_label()
pred = fitted.predict([record])[0]
subgraph = retrieve(fitted.model, fitted.ctx, fitted.featurizer, record, pred.ranked_labels[0])
request = ExplanationRequest(record, pred, subgraph, graph)

prompt = build_prompt(request, top_n=3)
print(prompt)
print()

# offline: template text
print(explain(request, DisabledChatClient(), top_n=3).text)
print()

# a recorded reply keyed by the prompt, as a replaying client would return it
reply = MemoryChatClient({prompt_key(prompt): "The reported symptoms match the retrieved facts."})
exp = explain(request, reply, top_n=3)
print(exp.generator, "->", exp.text)
for t in exp.supporting_triples:
    print("   ", t.render())
