import json
import logging

import pytest

from calset.core import (
    Candidate,
    CandidatePool,
    Example,
    MetricStats,
    NormalizationStats,
    RecordError,
    ScoreVector,
    SelectedSet,
    Span,
    StrategyId,
    count_tokens,
    load_pool,
    load_selected,
    load_stats,
    write_pool,
    write_selected,
    write_stats,
)

from conftest import bare_example, rel_pool


def write_lines(path, objs):
    path.write_text("".join(json.dumps(o) + "\n" for o in objs), encoding="utf-8")


def beam_record(cid, text, rank=0, eid="ex"):
    return {
        "example_id": eid,
        "candidate_id": cid,
        "method": "diverse_beam",
        "method_params": {"generator": "primera"},
        "beam_rank": rank,
        "text": text,
        "token_logprobs": [-0.5, -0.25],
    }


def test_load_single_beam_round_trip(tmp_path):
    p = tmp_path / "pool.jsonl"
    write_lines(p, [beam_record("ex:b:0", "a summary")])
    pools, dropped = load_pool(p, "relevance")
    assert dropped == 0
    assert len(pools) == 1 and len(pools[0]) == 1
    c = pools[0].candidates[0]
    assert c.token_logprobs == (-0.5, -0.25)
    assert c.polarity_hint == "unassigned"
    assert c.scores.n_tokens == 2


def test_duplicate_text_dropped_first_by_id_wins(tmp_path, caplog):
    p = tmp_path / "pool.jsonl"
    write_lines(p, [beam_record("ex:b:1", "same text", 1), beam_record("ex:b:0", "same text", 0)])
    with caplog.at_level(logging.WARNING, logger="calset"):
        pools, dropped = load_pool(p, "relevance")
    assert dropped == 1
    assert [c.candidate_id for c in pools[0].candidates] == ["ex:b:0"]


def test_dedup_uses_nfc(tmp_path):
    p = tmp_path / "pool.jsonl"
    write_lines(p, [beam_record("ex:b:0", "café", 0), beam_record("ex:b:1", "café", 1)])
    pools, dropped = load_pool(p, "relevance")
    assert dropped == 1


def test_method_not_allowed(tmp_path):
    p = tmp_path / "pool.jsonl"
    write_lines(p, [beam_record("ex:b:0", "x")])
    with pytest.raises(RecordError, match="method not allowed in pool_kind"):
        load_pool(p, "faithfulness")


def test_malformed_line_reports_line_number(tmp_path):
    p = tmp_path / "pool.jsonl"
    p.write_text(json.dumps(beam_record("ex:b:0", "x")) + "\n{not json\n")
    with pytest.raises(RecordError) as err:
        load_pool(p, "relevance")
    assert err.value.line == 2


def test_duplicate_candidate_id(tmp_path):
    p = tmp_path / "pool.jsonl"
    write_lines(p, [beam_record("ex:b:0", "x"), beam_record("ex:b:0", "y")])
    with pytest.raises(RecordError, match="duplicate candidate_id"):
        load_pool(p, "relevance")


def test_beam_rank_on_non_beam_method():
    with pytest.raises(RecordError, match="beam_rank"):
        Candidate("c", "ex", "paraphrase", "t", beam_rank=0)


def test_load_pool_order_independent(tmp_path):
    recs = [beam_record(f"ex:b:{i}", f"text {i}", i) for i in range(4)]
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_lines(a, recs)
    write_lines(b, list(reversed(recs)))
    assert load_pool(a, "relevance")[0] == load_pool(b, "relevance")[0]


def test_pool_write_load_round_trip(tmp_path):
    pool = rel_pool([0.5, 0.1, -0.2])
    p = tmp_path / "pool.jsonl"
    write_pool([pool], p)
    pools, _ = load_pool(p, "relevance")
    assert pools[0].candidates == pool.candidates
    assert pools[0].example == pool.example


def test_polarity_fixed_by_method():
    assert Candidate("a", "ex", "swap_extrinsic", "t").polarity_hint == "negative"
    assert Candidate("b", "ex", "mask_and_fill", "t").polarity_hint == "negative"
    assert Candidate("c", "ex", "reference", "t").polarity_hint == "positive"
    with pytest.raises(RecordError, match="polarity_hint"):
        Candidate("d", "ex", "paraphrase", "t", polarity_hint="negative")


def test_positive_logprob_rejected():
    with pytest.raises(RecordError, match="token_logprobs"):
        Candidate("a", "ex", "diverse_beam", "t", beam_rank=0, token_logprobs=(0.1,))


@pytest.mark.parametrize(
    "field,value",
    [("rouge1_f1", 1.2), ("factscore", -0.1), ("bartscore", 0.5), ("extractive_density", -1.0)],
)
def test_score_vector_ranges(field, value):
    with pytest.raises(RecordError):
        ScoreVector(**{field: value})


def test_example_sentences_must_reassemble():
    Example("e", "A b.  C d.", ("A b.", "C d."), "r")
    with pytest.raises(RecordError, match="reassemble"):
        Example("e", "A b. C d.", ("A b.", "X."), "r")


def test_span_bounds_checked():
    with pytest.raises(RecordError, match="exceeds"):
        bare_example(reference="short", entities=[Span(0, 10, "shortshort", "X")])
    with pytest.raises(RecordError):
        Span(3, 3, "", "X")


def _sets():
    s = StrategyId.parse("margin:max")
    return [
        SelectedSet("a", s, "relevance", rank_order=("a:1", "a:2", "a:3", "a:4")),
        SelectedSet("b", s, "faithfulness", positives=("b:p1", "b:p2"), negatives=("b:n1", "b:n2")),
        SelectedSet("c", StrategyId.parse("random"), "relevance", rank_order=("c:9", "c:1"), approximate=True),
    ]


def test_selected_round_trip(tmp_path):
    p = tmp_path / "sel.jsonl"
    assert write_selected(_sets(), p) == 3
    assert load_selected(p) == _sets()


def test_selected_empty(tmp_path):
    p = tmp_path / "sel.jsonl"
    assert write_selected([], p) == 0
    assert p.read_text() == ""
    assert load_selected(p) == []


def test_selected_disjointness_gate(tmp_path):
    p = tmp_path / "sel.jsonl"
    with pytest.raises(RecordError, match="overlap"):
        bad = SelectedSet("b", StrategyId("margin", "max"), "faithfulness", positives=("x", "y"), negatives=("y",))
        write_selected([bad], p)
    assert not p.exists()


def test_strategy_parse():
    assert StrategyId.parse("random") == StrategyId("random", "sample")
    assert str(StrategyId.parse("likelihood:top_beam")) == "likelihood:top_beam"
    with pytest.raises(ValueError):
        StrategyId.parse("margin")


def test_stats_round_trip(tmp_path):
    stats = NormalizationStats({"rouge1_f1": MetricStats(0.4, 0.1)}, "FT test set")
    p = tmp_path / "stats.json"
    write_stats(stats, p)
    obj = json.loads(p.read_text())
    assert obj["rouge1_f1"] == {"mean": 0.4, "stddev": 0.1}
    assert load_stats(p) == stats


def test_stats_require_positive_stddev():
    with pytest.raises((RecordError, ValueError)):
        MetricStats(0.0, 0.0)


def test_count_tokens_whitespace_nfc():
    assert count_tokens("  a  b\tc\n") == 3
    assert count_tokens("") == 0


def test_pool_rejects_foreign_candidate():
    c = Candidate("other:1", "other", "paraphrase", "t")
    with pytest.raises(RecordError):
        CandidatePool(bare_example("ex"), (c,), "faithfulness")
