"""Run every catalog strategy on one scored pool and compare the chosen sets.

Run: python demos/03_selection.py
"""
from importlib import resources

from calset.analysis import format_table, set_statistics
from calset.clients import Clients
from calset.core import load_examples
from calset.corruptions import EntityIndex, build_pool, load_beams
from calset.metrics import fit_stats, normalize_pool, score_pool
from calset.selection import CATALOG, SelectionConfig, select

DATA = resources.files("calset") / "data"
with resources.as_file(DATA / "toy_examples.jsonl") as p:
    examples = load_examples(p)
with resources.as_file(DATA / "toy_beams.jsonl") as p:
    beams = load_beams(p)
index = EntityIndex.from_examples(examples.values())
clients = Clients.offline()

eid, ex = next(iter(examples.items()))
pools = {
    "relevance": score_pool(build_pool(ex, "relevance", beams=beams[eid]), clients),
    "faithfulness": score_pool(build_pool(ex, "faithfulness", clients=clients, entity_index=index), clients),
}

for kind, pool in pools.items():
    pool = normalize_pool(pool, fit_stats([c.scores.to_json() for c in pool.candidates]))
    rows = []
    for sid in CATALOG[kind]:
        chosen = select(pool, SelectionConfig(sid))
        st = set_statistics(chosen, pool)
        rows.append({"strategy": str(sid), **{k: v for k, v in st.to_json().items() if k in
                     ("mean_quality", "margin_gap", "inverse_self_bleu", "likelihood_gap", "precalibration_score")}})
    print(f"\n{kind} ({len(pool)} candidates)")
    print(format_table(rows, ["strategy", "mean_quality", "margin_gap", "inverse_self_bleu", "likelihood_gap", "precalibration_score"]))
