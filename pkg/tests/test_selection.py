import dataclasses
import itertools
import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from calset.analysis import self_bleu
from calset.core import CandidatePool, StrategyId
from calset.selection import (
    CATALOG,
    SelectionConfig,
    SelectionError,
    best_subset,
    enumerate_k_subsets,
    select,
)

from conftest import faith_pool, rel_pool


def cfg(strategy, **kw):
    return SelectionConfig(strategy=StrategyId.parse(strategy), **kw)


def values_of(pool, ids, name="rel_agg"):
    by_id = pool.by_id()
    return [by_id[i].scores.get(name) for i in ids]


# -- enumeration ---------------------------------------------------------


@pytest.mark.parametrize("n,k,count", [(5, 4, 5), (20, 4, 4845), (60, 2, 1770)])
def test_enumeration_counts(n, k, count):
    stream = enumerate_k_subsets(n, k)
    subsets = list(stream)
    assert len(subsets) == count == math.comb(n, k)
    assert subsets == sorted(subsets)
    assert not stream.approximate


def test_enumeration_k_too_large():
    with pytest.raises(ValueError):
        enumerate_k_subsets(3, 4)


def test_enumeration_cap_sample_with_incumbent():
    stream = enumerate_k_subsets(12, 4, cap=50, rng_seed=3, incumbent=(11, 0, 5, 7))
    subs = list(stream)
    assert stream.approximate
    assert len(set(subs)) == len(subs) >= 50
    assert (0, 5, 7, 11) in subs
    assert subs == list(enumerate_k_subsets(12, 4, cap=50, rng_seed=3, incumbent=(11, 0, 5, 7)))


def test_best_subset_ties_lexicographic():
    idx, approx = best_subset(5, 2, lambda s: 0.0)
    assert idx == (0, 1) and not approx


def test_best_subset_capped_flags_approximate():
    idx, approx = best_subset(10, 3, lambda s: sum(s), cap=5)
    assert approx
    assert idx == (7, 8, 9)  # greedy incumbent finds the true optimum here


# -- relevance strategies ------------------------------------------------


def test_random_deterministic():
    pool = rel_pool([i / 20 for i in range(20)])
    a = select(pool, cfg("random", rng_seed=4))
    b = select(pool, cfg("random", rng_seed=4))
    assert a == b and len(a.rank_order) == 4


def test_pool_too_small():
    with pytest.raises(SelectionError, match="need 4"):
        select(rel_pool([0.1, 0.2, 0.3]), cfg("margin:max"))


def test_likelihood_on_faithfulness_requires_beam_rank():
    pool = faith_pool([0.1, 0.2], [0.0, -0.1])
    with pytest.raises(SelectionError, match="strategy requires beam_rank"):
        select(pool, cfg("likelihood:top_beam"))


def test_margin_max_small_pool_oracle():
    vals = [1.0, 0.9, 0.5, 0.1, 0.0]
    pool = rel_pool(vals)
    out = select(pool, cfg("margin:max"))
    best = max((max(c) - min(c)) / 3 for c in itertools.combinations(vals, 4))
    got = values_of(pool, out.rank_order)
    assert (max(got) - min(got)) / 3 == best
    assert got == sorted(got, reverse=True)


def test_top_beam():
    pool = rel_pool([0.5, 0.9, 0.1, 0.3, 0.2, 0.8, 0.0, 0.4, 0.6, 0.7])
    out = select(pool, cfg("likelihood:top_beam"))
    ranks = sorted(pool.by_id()[i].beam_rank for i in out.rank_order)
    assert ranks == [0, 1, 2, 3]
    # still emitted best-first by quality
    assert values_of(pool, out.rank_order) == [0.9, 0.5, 0.3, 0.1]


def test_bottom_and_extreme_beam():
    pool = rel_pool([i / 10 for i in range(10)])
    bottom = select(pool, cfg("likelihood:bottom_beam"))
    extreme = select(pool, cfg("likelihood:extreme_beam"))
    assert sorted(pool.by_id()[i].beam_rank for i in bottom.rank_order) == [6, 7, 8, 9]
    assert sorted(pool.by_id()[i].beam_rank for i in extreme.rank_order) == [0, 1, 8, 9]


def test_diversity_max_prefers_distinct_texts():
    texts = ["alpha beta gamma delta"] * 4 + [
        "one two three four",
        "red green blue yellow",
        "cat dog bird fish",
        "north south east west",
    ]
    pool = rel_pool([0.0] * 8, texts=texts)
    out = select(pool, cfg("diversity:max"))
    chosen = [pool.by_id()[i].text for i in out.rank_order]
    # one copy of the repeated text is as diverse as any other disjoint text,
    # so the contract is: never two copies, and the distinct-set optimum
    assert len(set(chosen)) == 4
    assert 1 - self_bleu(chosen) == 1 - self_bleu(texts[4:])
    low = select(pool, cfg("diversity:min"))
    assert {pool.by_id()[i].text for i in low.rank_order} == {texts[0]}


def test_quality_modes():
    vals = [0.9, 0.7, 0.5, 0.3, 0.1, -0.1, -0.3]
    pool = rel_pool(vals)
    got = lambda mode: values_of(pool, select(pool, cfg(f"quality:{mode}")).rank_order)
    assert got("high") == [0.9, 0.7, 0.5, 0.3]
    assert got("min") == [0.3, 0.1, -0.1, -0.3]
    assert got("extreme") == [0.9, 0.7, -0.1, -0.3]
    # mean is 0.3; closest four: 0.3, then 0.5/0.1 (tie, both in), then 0.7/-0.1 tie by id
    assert got("average") == [0.7, 0.5, 0.3, 0.1]


def test_spurious_length():
    pool = rel_pool([0.1, 0.2, 0.3, 0.4, 0.5], n_tokens=[10, 3, 7, 12, 5])
    longest = select(pool, cfg("spurious:max_length"))
    shortest = select(pool, cfg("spurious:min_length"))
    assert sorted(pool.by_id()[i].scores.n_tokens for i in longest.rank_order) == [5, 7, 10, 12]
    assert sorted(pool.by_id()[i].scores.n_tokens for i in shortest.rank_order) == [3, 5, 7, 10]


def test_missing_aggregate_named():
    pool = rel_pool([0.1, None, 0.2, 0.3, 0.4])
    with pytest.raises(SelectionError, match="rel_agg"):
        select(pool, cfg("margin:max"))


def test_hybrid_needs_faith_agg():
    pool = rel_pool([0.1, 0.2, 0.3, 0.4, 0.5])
    with pytest.raises(SelectionError, match="faith_agg"):
        select(pool, cfg("hybrid_corr:max"))


def _shuffle(pool, seed):
    cands = list(pool.candidates)
    random.Random(seed).shuffle(cands)
    return dataclasses.replace(pool, candidates=tuple(cands))


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.integers(-20, 20), min_size=4, max_size=9, unique=True),
    st.sampled_from(["margin:max", "margin:min", "quality:extreme", "quality:average", "hybrid_corr:max", "random"]),
    st.integers(0, 1000),
)
def test_permutation_invariance(vals, strategy, seed):
    faith = [((v * 7) % 11) / 10 for v in vals]
    pool = rel_pool([v / 10 for v in vals], faith=faith)
    a = select(pool, cfg(strategy))
    b = select(_shuffle(pool, seed), cfg(strategy))
    assert set(a.rank_order) == set(b.rank_order)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(-20, 20), min_size=4, max_size=8, unique=True), st.lists(st.integers(-9, 9), min_size=8, max_size=8))
def test_hybrid_scale_invariance(vals, fvals):
    rel = [v / 10 for v in vals]
    faith = [f / 10 for f in fvals[: len(vals)]]
    base = select(rel_pool(rel, faith=faith), cfg("hybrid_corr:max"))
    warped = select(rel_pool([math.exp(v) for v in rel], faith=[f ** 3 for f in faith]), cfg("hybrid_corr:max"))
    assert base.rank_order and set(base.rank_order) == set(warped.rank_order)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-3, 3, allow_nan=False), min_size=4, max_size=9))
def test_margin_max_dominates_min(vals):
    pool = rel_pool(vals)
    hi = values_of(pool, select(pool, cfg("margin:max")).rank_order)
    lo = values_of(pool, select(pool, cfg("margin:min")).rank_order)
    assert max(hi) - min(hi) >= max(lo) - min(lo)


def test_every_relevance_output_sorted():
    pool = rel_pool([0.3, -0.2, 0.8, 0.1, 0.5, -0.6], faith=[0.1, 0.4, 0.2, 0.9, -0.3, 0.0])
    for strategy in CATALOG["relevance"]:
        out = select(pool, SelectionConfig(strategy))
        got = values_of(pool, out.rank_order)
        assert got == sorted(got, reverse=True), strategy


# -- faithfulness strategies ---------------------------------------------


def test_faith_margin_modes():
    pool = faith_pool([0.9, 0.1, 0.5], [-0.8, 0.3, -0.1])
    mx = select(pool, cfg("margin:max"))
    mn = select(pool, cfg("margin:min"))
    assert values_of(pool, mx.positives, "faith_agg") == [0.9, 0.5]
    assert sorted(values_of(pool, mx.negatives, "faith_agg")) == [-0.8, -0.1]
    assert sorted(values_of(pool, mn.positives, "faith_agg")) == [0.1, 0.5]
    assert sorted(values_of(pool, mn.negatives, "faith_agg")) == [-0.1, 0.3]


def test_faith_likelihood_modes():
    pool = faith_pool([0.0, 0.0, 0.0], [0.0, 0.0, 0.0], loglik=[-1.0, -3.0, -2.0, -0.5, -4.0, -2.5])
    easy = select(pool, cfg("likelihood:easy"))
    hard = select(pool, cfg("likelihood:hard"))
    ll = lambda ids: sorted(pool.by_id()[i].scores.model_loglik for i in ids)
    assert ll(easy.positives) == [-2.0, -1.0] and ll(easy.negatives) == [-4.0, -2.5]
    assert ll(hard.positives) == [-3.0, -2.0] and ll(hard.negatives) == [-2.5, -0.5]


def test_faith_spurious_extract_gap():
    pool = faith_pool([0.0] * 3, [0.0] * 3, density=[5.0, 1.0, 3.0, 0.5, 4.0, 2.0])
    out = select(pool, cfg("spurious:max_extract_gap"))
    d = lambda ids: sorted(pool.by_id()[i].scores.extractive_density for i in ids)
    assert d(out.positives) == [3.0, 5.0] and d(out.negatives) == [0.5, 2.0]


def test_faith_extract_gap_requires_density():
    with pytest.raises(SelectionError, match="extractive_density"):
        select(faith_pool([0.1, 0.2], [0.0, 0.1]), cfg("spurious:max_extract_gap"))


def test_faith_diversity_within_groups():
    pos = ["a b c d", "a b c e", "w x y z"]
    neg = ["p q r s", "p q r t", "k l m n"]
    pool = faith_pool([0.0] * 3, [0.0] * 3, pos_texts=pos, neg_texts=neg)
    out = select(pool, cfg("diversity:max"))
    texts = lambda ids: {pool.by_id()[i].text for i in ids}
    assert "w x y z" in texts(out.positives) and "k l m n" in texts(out.negatives)
    low = select(pool, cfg("diversity:min"))
    assert texts(low.positives) == {"a b c d", "a b c e"}
    assert texts(low.negatives) == {"p q r s", "p q r t"}


def test_faith_outputs_respect_polarity():
    pool = faith_pool([0.3, 0.2, 0.1, 0.0], [0.1, -0.2, 0.4], loglik=[-1.0] * 7, density=[1.0] * 7)
    for strategy in CATALOG["faithfulness"]:
        out = select(pool, SelectionConfig(strategy))
        by_id = pool.by_id()
        assert all(by_id[i].polarity_hint == "positive" for i in out.positives)
        assert all(by_id[i].polarity_hint == "negative" for i in out.negatives)
        assert len(out.positives) == 2 and len(out.negatives) == 2


def test_faith_too_few_positives():
    with pytest.raises(SelectionError, match="positives"):
        select(faith_pool([0.1], [0.0, 0.2]), cfg("margin:max"))


def test_faith_quality_average_per_group():
    pool = faith_pool([1.0, 0.0, 0.6, 0.4], [-1.0, -0.5, 0.0])
    out = select(pool, cfg("quality:average"))
    assert sorted(values_of(pool, out.positives, "faith_agg")) == [0.4, 0.6]
    assert sorted(values_of(pool, out.negatives, "faith_agg")) == [-1.0, -0.5] or sorted(
        values_of(pool, out.negatives, "faith_agg")
    ) == [-0.5, 0.0]


def test_unknown_strategy_for_kind():
    with pytest.raises(SelectionError, match="not defined"):
        select(faith_pool([0.1, 0.2], [0.0, 0.1]), cfg("quality:high"))


def test_diversity_objective_matches_self_bleu():
    texts = ["the cat sat", "a dog ran", "the cat ran", "birds fly high", "the dog sat"]
    pool = rel_pool([0.0] * 5, texts=texts)
    out = select(pool, cfg("diversity:max"))
    chosen = [pool.by_id()[i].text for i in sorted(out.rank_order)]
    best = max(1 - self_bleu([texts[i] for i in c]) for c in itertools.combinations(range(5), 4))
    assert 1 - self_bleu(chosen) == best
