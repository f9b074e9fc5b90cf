"""Regenerate the bundled toy corpus (src/calset/data/toy_*.jsonl).

Ten synthetic examples across three domains, annotated by construction so
every span offset is exact, plus 2 generators x 10 diverse beams each.

    python3 tools/make_toy_corpus.py
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "calset" / "data"

VOCAB = {
    "clinical": {
        "DRUG": ["warfarin", "heparin", "metformin", "amiodarone", "prednisone", "vancomycin"],
        "DISEASE": ["pneumonia", "sepsis", "atrial fibrillation", "renal failure", "endocarditis"],
    },
    "chemical": {
        "CHEMICAL": ["toluene", "benzaldehyde", "palladium acetate", "sodium borohydride", "acetonitrile", "pyridine"],
        "PROCESS": ["hydrogenation", "oxidation", "cross-coupling", "reduction", "cyclization"],
    },
    "biomedical": {
        "GENE": ["TP53", "BRCA1", "EGFR", "KRAS", "MYC", "PTEN"],
        "CELL": ["fibroblasts", "macrophages", "T cells", "hepatocytes", "neurons"],
    },
}

NOUN_PHRASES = {
    "clinical": ["the clinical course", "a rare complication", "the initial presentation", "the follow-up visit", "the cardiac workup"],
    "chemical": ["the crude product", "a mild protocol", "the reaction mixture", "the final step", "a broad substrate scope"],
    "biomedical": ["the knockout model", "a striking phenotype", "the signaling pathway", "the expression profile", "a large cohort"],
}


class Builder:
    """Concatenate text pieces while recording annotated spans."""

    def __init__(self, target: str):
        self.text = ""
        self.target = target
        self.spans = {"entities": [], "numbers": [], "noun_phrases": []}

    def add(self, piece: str, kind: str | None = None, type_: str = "") -> "Builder":
        if kind:
            start = len(self.text)
            self.spans[kind].append(
                {"start": start, "end": start + len(piece), "surface": piece, "type": type_, "target": self.target}
            )
        self.text += piece
        return self


def clinical(rng, eid):
    v = VOCAB["clinical"]
    drugs = list(rng.permutation(v["DRUG"]))
    dis = list(rng.permutation(v["DISEASE"]))
    nps = list(rng.permutation(NOUN_PHRASES["clinical"]))
    age, days, pct, dose, n = (int(x) for x in rng.integers([40, 2, 20, 5, 12], [90, 14, 90, 80, 300]))
    src = Builder("source")
    sents = []
    for s in (
        [("A ", None), (str(age), "numbers"), ("-year-old man was admitted with ", None), (dis[0], "entities", "DISEASE"), (".", None)],
        [("He had a history of ", None), (dis[1], "entities", "DISEASE"), (" and was taking ", None), (drugs[2], "entities", "DRUG"), (" daily.", None)],
        [("Empiric ", None), (drugs[0], "entities", "DRUG"), (" was started at ", None), (str(dose), "numbers"), (" mg.", None)],
        [("On day ", None), (str(days), "numbers"), (" he developed ", None), (dis[2], "entities", "DISEASE"), (".", None)],
        [("Therapy was switched to ", None), (drugs[1], "entities", "DRUG"), (" and ", None), (drugs[3], "entities", "DRUG"), (" was added.", None)],
        [("In a cohort of ", None), (str(n), "numbers"), (" similar cases, ", None), (str(pct), "numbers"), (" percent recovered.", None)],
        [("He was discharged after ", None), (str(days + 5), "numbers"), (" days in stable condition.", None)],
    ):
        sents.append(_emit(src, s))
    ref = Builder("reference")
    for piece in (
        ("We report a ", None), (str(age), "numbers"), ("-year-old patient with ", None), (dis[0], "entities", "DISEASE"),
        (" who was treated with ", None), (drugs[0], "entities", "DRUG"), (". ", None),
        (nps[0], "noun_phrases"), (" was complicated by ", None), (dis[2], "entities", "DISEASE"), (" after ", None),
        (str(days), "numbers"), (" days and ", None), (nps[1], "noun_phrases"), (" showed significantly improved outcomes on ", None),
        (drugs[1], "entities", "DRUG"), (". ", None), (nps[2], "noun_phrases"), (" found high recovery in ", None),
        (str(pct), "numbers"), (" percent of patients, and ", None), (nps[3], "noun_phrases"), (" was new.", None),
    ):
        _add(ref, piece)
    return _example(eid, src, sents, ref)


def chemical(rng, eid):
    v = VOCAB["chemical"]
    chem = list(rng.permutation(v["CHEMICAL"]))
    proc = list(rng.permutation(v["PROCESS"]))
    nps = list(rng.permutation(NOUN_PHRASES["chemical"]))
    temp, yld, hrs, eq, n = (int(x) for x in rng.integers([20, 50, 1, 2, 8], [120, 99, 48, 10, 40]))
    src = Builder("source")
    sents = []
    for s in (
        [("We describe a ", None), (proc[0], "entities", "PROCESS"), (" of ", None), (chem[0], "entities", "CHEMICAL"), (" at ", None), (str(temp), "numbers"), (" degrees.", None)],
        [("The catalyst was ", None), (chem[1], "entities", "CHEMICAL"), (" in ", None), (chem[2], "entities", "CHEMICAL"), (".", None)],
        [("After ", None), (str(hrs), "numbers"), (" hours the yield reached ", None), (str(yld), "numbers"), (" percent.", None)],
        [("A subsequent ", None), (proc[1], "entities", "PROCESS"), (" used ", None), (str(eq), "numbers"), (" equivalents of ", None), (chem[3], "entities", "CHEMICAL"), (".", None)],
        [("Control runs with ", None), (chem[4], "entities", "CHEMICAL"), (" gave no ", None), (proc[2], "entities", "PROCESS"), (".", None)],
        [("In total ", None), (str(n), "numbers"), (" substrates were tested.", None)],
    ):
        sents.append(_emit(src, s))
    ref = Builder("reference")
    for piece in (
        ("A new synthesis based on ", None), (proc[0], "entities", "PROCESS"), (" of ", None), (chem[0], "entities", "CHEMICAL"),
        (" is reported. ", None), (nps[0], "noun_phrases"), (" using ", None), (chem[1], "entities", "CHEMICAL"),
        (" gave a high yield of ", None), (str(yld), "numbers"), (" percent after ", None), (str(hrs), "numbers"),
        (" hours. ", None), (nps[1], "noun_phrases"), (" and ", None), (nps[2], "noun_phrases"),
        (" showed rapid ", None), (proc[1], "entities", "PROCESS"), (" across ", None), (str(n), "numbers"),
        (" substrates, and ", None), (nps[3], "noun_phrases"), (" improved the analysis.", None),
    ):
        _add(ref, piece)
    return _example(eid, src, sents, ref)


def biomedical(rng, eid):
    v = VOCAB["biomedical"]
    genes = list(rng.permutation(v["GENE"]))
    cells = list(rng.permutation(v["CELL"]))
    nps = list(rng.permutation(NOUN_PHRASES["biomedical"]))
    fold, n, pct, wk, mice = (int(x) for x in rng.integers([2, 100, 10, 2, 10], [12, 900, 95, 20, 60]))
    src = Builder("source")
    sents = []
    for s in (
        [("Loss of ", None), (genes[0], "entities", "GENE"), (" was studied in ", None), (cells[0], "entities", "CELL"), (".", None)],
        [("Expression of ", None), (genes[1], "entities", "GENE"), (" rose ", None), (str(fold), "numbers"), (" fold within ", None), (str(wk), "numbers"), (" weeks.", None)],
        [("Sequencing of ", None), (str(n), "numbers"), (" tumors found ", None), (genes[2], "entities", "GENE"), (" mutations in ", None), (str(pct), "numbers"), (" percent.", None)],
        [("Co-culture with ", None), (cells[1], "entities", "CELL"), (" altered ", None), (genes[3], "entities", "GENE"), (" levels.", None)],
        [("A cohort of ", None), (str(mice), "numbers"), (" mice lacking ", None), (genes[4], "entities", "GENE"), (" was followed.", None)],
        [("No change was seen in ", None), (cells[2], "entities", "CELL"), (".", None)],
    ):
        sents.append(_emit(src, s))
    ref = Builder("reference")
    for piece in (
        ("This study found that loss of ", None), (genes[0], "entities", "GENE"), (" in ", None), (cells[0], "entities", "CELL"),
        (" increased ", None), (genes[1], "entities", "GENE"), (" expression ", None), (str(fold), "numbers"), (" fold. ", None),
        (nps[0], "noun_phrases"), (" showed ", None), (genes[2], "entities", "GENE"), (" mutations in ", None),
        (str(pct), "numbers"), (" percent of ", None), (str(n), "numbers"), (" tumors. ", None),
        (nps[1], "noun_phrases"), (" and ", None), (nps[2], "noun_phrases"), (" were observed, while ", None),
        (nps[3], "noun_phrases"), (" decreased in small ", None), (cells[1], "entities", "CELL"), (".", None),
    ):
        _add(ref, piece)
    return _example(eid, src, sents, ref)


def _add(builder: Builder, p) -> None:
    kind = p[1]
    builder.add(p[0], kind, p[2] if len(p) > 2 else ("CARDINAL" if kind == "numbers" else ""))


def _emit(builder: Builder, pieces) -> str:
    if builder.text:
        builder.add(" ")
    start = len(builder.text)
    for p in pieces:
        _add(builder, p)
    return builder.text[start:]


def _example(eid, src: Builder, sents, ref: Builder) -> dict:
    ann = {k: src.spans[k] + ref.spans[k] for k in ("entities", "numbers", "noun_phrases")}
    return {
        "example_id": eid,
        "source_text": src.text,
        "source_sentences": sents,
        "reference_text": ref.text,
        "annotations": ann,
    }


def _capitalize_sentences(ex: dict) -> dict:
    text = ex["reference_text"]
    chars = list(text)
    for i, ch in enumerate(chars):
        if ch.isalpha() and (i == 0 or text[max(0, i - 2) : i] == ". "):
            chars[i] = ch.upper()
    ex["reference_text"] = "".join(chars)
    for sp in ex["annotations"]["noun_phrases"]:
        sp["surface"] = ex["reference_text"][sp["start"] : sp["end"]]
    return ex


def beams_for(ex: dict, rng) -> list[dict]:
    ref_sents = [s.strip() + "." for s in ex["reference_text"].split(". ") if s.strip()]
    ref_sents = [s[:-1] if s.endswith("..") else s for s in ref_sents]
    src = ex["source_sentences"]
    rows = []
    seen: set[str] = set()
    for g, gen in enumerate(("primera", "longt5")):
        for rank in range(10):
            k = (rank + g) % len(ref_sents)
            picks = [ref_sents[k]]
            # weaker beams lean on copied source sentences
            n_src = 1 + rank // 3
            while True:
                order = rng.permutation(len(src))
                cand = picks + [src[int(j)] for j in order[:n_src]]
                if rank % 2:
                    cand.reverse()
                text = " ".join(cand)
                if text not in seen:
                    break
            seen.add(text)
            n_tok = len(text.split())
            base = -0.3 - 0.08 * rank - 0.05 * g
            lp = np.minimum(base + rng.normal(0.0, 0.15, n_tok), -1e-3)
            rows.append(
                {
                    "example_id": ex["example_id"],
                    "generator": gen,
                    "beam_rank": rank,
                    "text": text,
                    "token_logprobs": [round(float(x), 6) for x in lp],
                }
            )
    return rows


def main() -> None:
    rng = np.random.default_rng(20240611)
    makers = [clinical, chemical, biomedical]
    examples = []
    for i in range(10):
        maker = makers[i % 3]
        ex = maker(rng, f"toy-{maker.__name__[:4]}-{i:02d}")
        examples.append(_capitalize_sentences(ex))
    beams = [row for ex in examples for row in beams_for(ex, rng)]
    OUT.mkdir(parents=True, exist_ok=True)
    with open(OUT / "toy_examples.jsonl", "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex, ensure_ascii=False, sort_keys=True) + "\n")
    with open(OUT / "toy_beams.jsonl", "w", encoding="utf-8") as fh:
        for row in beams:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
    print(f"wrote {len(examples)} examples and {len(beams)} beams to {OUT}")


if __name__ == "__main__":
    main()
