"""Build candidate pools for one toy example and show what each method produced.

Run: python demos/01_build_pools.py
"""
from collections import Counter
from importlib import resources

from calset.clients import Clients
from calset.core import load_examples
from calset.corruptions import EntityIndex, build_pool, load_beams

DATA = resources.files("calset") / "data"

with resources.as_file(DATA / "toy_examples.jsonl") as p:
    examples = load_examples(p)
with resources.as_file(DATA / "toy_beams.jsonl") as p:
    beams = load_beams(p)

# extrinsic swaps draw replacements from the whole corpus
index = EntityIndex.from_examples(examples.values())
eid, example = next(iter(examples.items()))
print(f"example {eid}\nreference: {example.reference_text}\n")

faith = build_pool(example, "faithfulness", clients=Clients.offline(), entity_index=index)
print(f"faithfulness pool: {len(faith)} candidates")
for (method, variant), n in sorted(Counter((c.method, c.method_params.get("variant")) for c in faith.candidates).items()):
    print(f"  {method:15s} {variant or '-':5s} {n}")

print("\none candidate per method:")
shown = set()
for c in faith.candidates:
    if c.method not in shown:
        shown.add(c.method)
        print(f"  [{c.polarity_hint}] {c.method}: {c.text[:100]}")

rel = build_pool(example, "relevance", beams=beams[eid])
print(f"\nrelevance pool: {len(rel)} beams")
for c in rel.candidates[:3]:
    print(f"  {c.method_params['generator']} rank {c.beam_rank}: {c.text[:80]}")
