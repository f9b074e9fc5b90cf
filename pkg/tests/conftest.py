from __future__ import annotations

from importlib import resources

import pytest

from calset.core import (
    AnnotationSet,
    Candidate,
    CandidatePool,
    Example,
    ScoreVector,
    Span,
    load_examples,
)
from calset.corruptions import load_beams

DATA = resources.files("calset") / "data"


@pytest.fixture(scope="session")
def toy_examples():
    with resources.as_file(DATA / "toy_examples.jsonl") as p:
        return load_examples(p)


@pytest.fixture(scope="session")
def toy_beams():
    with resources.as_file(DATA / "toy_beams.jsonl") as p:
        return load_beams(p)


@pytest.fixture(scope="session")
def toy_paths():
    with resources.as_file(DATA / "toy_examples.jsonl") as ex, resources.as_file(DATA / "toy_beams.jsonl") as bm:
        return str(ex), str(bm)


def span_of(text: str, surface: str, type_: str = "", target: str = "reference", nth: int = 0) -> Span:
    start = -1
    for _ in range(nth + 1):
        start = text.index(surface, start + 1)
    return Span(start, start + len(surface), surface, type_, target)


def bare_example(eid: str = "ex", reference: str = "ref text", source: str = "", **ann) -> Example:
    return Example(
        example_id=eid,
        source_text=source,
        reference_text=reference,
        annotations=AnnotationSet(**{k: tuple(v) for k, v in ann.items()}),
    )


def rel_pool(values, texts=None, faith=None, eid="ex", n_tokens=None) -> CandidatePool:
    """Relevance pool with given rel_agg (and optional faith_agg / texts)."""
    cands = []
    for i, v in enumerate(values):
        sv = ScoreVector(
            rel_agg=v,
            faith_agg=None if faith is None else faith[i],
            n_tokens=(n_tokens[i] if n_tokens else 5),
        )
        cands.append(
            Candidate(
                candidate_id=f"{eid}:diverse_beam:primera:{i:02d}",
                example_id=eid,
                method="diverse_beam",
                text=texts[i] if texts else f"candidate number {i}",
                method_params={"generator": "primera"},
                beam_rank=i,
                scores=sv,
            )
        )
    return CandidatePool(bare_example(eid), tuple(cands), "relevance")


def faith_pool(pos_vals, neg_vals, eid="ex", pos_texts=None, neg_texts=None, loglik=None, density=None) -> CandidatePool:
    cands = []
    for i, v in enumerate(pos_vals):
        j = i
        cands.append(
            Candidate(
                candidate_id=f"{eid}:paraphrase:t0.7:{i:02d}",
                example_id=eid,
                method="paraphrase",
                text=pos_texts[i] if pos_texts else f"positive text {i}",
                scores=ScoreVector(
                    faith_agg=v,
                    model_loglik=None if loglik is None else loglik[j],
                    extractive_density=None if density is None else density[j],
                    n_tokens=3,
                ),
            )
        )
    for i, v in enumerate(neg_vals):
        j = len(pos_vals) + i
        cands.append(
            Candidate(
                candidate_id=f"{eid}:swap_intrinsic:low:{i:02d}",
                example_id=eid,
                method="swap_intrinsic",
                text=neg_texts[i] if neg_texts else f"negative text {i}",
                scores=ScoreVector(
                    faith_agg=v,
                    model_loglik=None if loglik is None else loglik[j],
                    extractive_density=None if density is None else density[j],
                    n_tokens=3,
                ),
            )
        )
    return CandidatePool(bare_example(eid), tuple(cands), "faithfulness")
