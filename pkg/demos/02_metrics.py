"""Score candidates: ROUGE, extractive fragments, sentence alignment, z-normalization.

Run: python demos/02_metrics.py
"""
from importlib import resources

from calset.clients import Clients
from calset.core import load_examples
from calset.corruptions import build_pool, load_beams
from calset.metrics import (
    extractive_fragments,
    fit_stats,
    greedy_align,
    normalize_pool,
    rouge_n,
    score_pool,
    split_sentences,
)

print("rouge-1 'the cat' vs 'the cat sat':", rouge_n("the cat", "the cat sat", 1))
fs = extractive_fragments("a b c d", "a b d")
print(f"fragments {fs.fragments}: coverage {fs.coverage:.3f}, density {fs.density:.3f}")

source = ["the trial enrolled adults", "dosing was weekly", "outcomes were recorded monthly"]
print("aligned sources for 'the trial outcomes were recorded':", greedy_align("the trial outcomes were recorded", source))
print("sentences:", split_sentences("Smith et al. found it. Then 3 more followed."))

DATA = resources.files("calset") / "data"
with resources.as_file(DATA / "toy_examples.jsonl") as p:
    examples = load_examples(p)
with resources.as_file(DATA / "toy_beams.jsonl") as p:
    beams = load_beams(p)

# offline stubs stand in for the embedding / entailment / likelihood services
pools = [score_pool(build_pool(ex, "relevance", beams=beams[eid]), Clients.offline()) for eid, ex in examples.items()]
stats = fit_stats([c.scores.to_json() for p in pools for c in p.candidates], provenance="toy baseline")
for name, ms in sorted(stats.metrics.items()):
    print(f"  {name:15s} mean {ms.mean:+.4f}  std {ms.stddev:.4f}")

normed = normalize_pool(pools[0], stats)
best = max(normed.candidates, key=lambda c: c.scores.rel_agg)
print(f"\nbest rel_agg in {normed.example_id}: {best.scores.rel_agg:+.3f} ({best.candidate_id})")
