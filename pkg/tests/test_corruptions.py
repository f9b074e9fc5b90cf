from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from calset.clients import Clients, ServiceClient, ServiceEndpoint, UnderfillError, stub_transport
from calset.core import Span
from calset.corruptions import (
    CorruptionError,
    EntityIndex,
    MaskPlan,
    MissingBeamsError,
    PoolConfig,
    SwapPlan,
    Variant,
    apply_swaps,
    build_pool,
    corruption_count,
    mask_and_fill,
    plan_masks,
    plan_swaps,
)

from conftest import bare_example, span_of

REF = "Patients given aspirin and warfarin for stroke in Boston had 12 events and 30 deaths."
SRC = "Drugs: aspirin, ibuprofen, heparin, warfarin. Conditions: stroke, sepsis. Cities: Boston, Paris. Counts: 12, 30, 44, 51."


def swap_example(n_entities=4, n_numbers=2):
    ents = [("aspirin", "DRUG"), ("warfarin", "DRUG"), ("stroke", "DISEASE"), ("Boston", "CITY")][:n_entities]
    nums = ["12", "30"][:n_numbers]
    src_ents = [("aspirin", "DRUG"), ("ibuprofen", "DRUG"), ("heparin", "DRUG"), ("warfarin", "DRUG"),
                ("stroke", "DISEASE"), ("sepsis", "DISEASE"), ("Boston", "CITY"), ("Paris", "CITY")]
    return bare_example(
        reference=REF,
        source=SRC,
        entities=[span_of(REF, s, t) for s, t in ents] + [span_of(SRC, s, t, "source") for s, t in src_ents],
        numbers=[span_of(REF, n, "CARDINAL") for n in nums]
        + [span_of(SRC, n, "CARDINAL", "source") for n in ("12", "30", "44", "51")],
    )


# -- counting rule -------------------------------------------------------


@pytest.mark.parametrize(
    "rate,n,expected",
    [(0.5, 1, 1), (0.25, 8, 2), (0.75, 8, 6), (0.1, 3, 1), (0.5, 5, 3), (0.3, 5, 2), (1.0, 4, 4), (0.5, 0, 0)],
)
def test_corruption_count(rate, n, expected):
    assert corruption_count(rate, n) == expected


def test_corruption_count_rejects_bad_rate():
    with pytest.raises(ValueError):
        corruption_count(0.0, 3)


# -- swaps ---------------------------------------------------------------


def test_full_swap_counts():
    plan = plan_swaps(swap_example(), "intrinsic", 1.0, rng_seed=7)
    assert len(plan.entity_replacements) == 4
    assert len(plan.number_replacements) == 2
    types = {sp.surface: sp.type for sp in swap_example().annotations.entities}
    src_types = {sp.surface: sp.type for sp in swap_example().annotations.select("entities", "source")}
    for span, new in plan.entity_replacements:
        assert new != span.surface
        assert src_types[new] == types[span.surface]


def test_half_swap_single_entity():
    plan = plan_swaps(swap_example(1, 0), "intrinsic", 0.5, rng_seed=1)
    assert len(plan.entity_replacements) == 1 and not plan.number_replacements


def test_swap_identity_error():
    with pytest.raises(CorruptionError, match="swap produced identity"):
        plan_swaps(swap_example(0, 0), "intrinsic", 0.5)


def test_swap_skips_slots_without_replacement():
    ex = bare_example(reference="Zed met Ann.", entities=[Span(0, 3, "Zed", "PERSON")])
    with pytest.raises(CorruptionError, match="identity"):
        plan_swaps(ex, "intrinsic", 1.0)


def test_extrinsic_uses_index_and_needs_it():
    ex = swap_example()
    with pytest.raises(CorruptionError, match="index"):
        plan_swaps(ex, "extrinsic", 0.5)
    index = EntityIndex([("DRUG", "metformin"), ("DISEASE", "gout"), ("CITY", "Lima"), ("CARDINAL", "99")])
    plan = plan_swaps(ex, "extrinsic", 1.0, index, rng_seed=3)
    assert {new for _, new in plan.replacements} <= {"metformin", "gout", "Lima", "99"}


def test_apply_swaps_by_hand():
    text = "Take aspirin daily."
    plan = SwapPlan("intrinsic", 1.0, ((Span(5, 12, "aspirin", "DRUG"), "ibuprofen"),))
    assert apply_swaps(text, plan) == "Take ibuprofen daily."
    assert apply_swaps(text, SwapPlan("intrinsic", 1.0)) == text


def test_apply_swaps_right_to_left_keeps_offsets():
    plan = plan_swaps(swap_example(), "intrinsic", 1.0, rng_seed=2)
    out = apply_swaps(REF, plan)
    for span, new in plan.replacements:
        assert new in out
    assert out.endswith(" deaths.")


def test_overlapping_swap_spans_rejected():
    with pytest.raises(CorruptionError, match="overlapping"):
        SwapPlan("intrinsic", 1.0, ((Span(0, 5, "abcde"), "x"), (Span(3, 8, "defgh"), "y")))


def test_swaps_deterministic():
    a = plan_swaps(swap_example(), "intrinsic", 0.5, rng_seed=11)
    b = plan_swaps(swap_example(), "intrinsic", 0.5, rng_seed=11)
    assert a == b


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), n_ent=st.integers(1, 4), n_num=st.integers(0, 2))
def test_monotone_corruption(seed, n_ent, n_num):
    ex = swap_example(n_ent, n_num)
    low = plan_swaps(ex, "intrinsic", 0.5, rng_seed=seed)
    high = plan_swaps(ex, "intrinsic", 1.0, rng_seed=seed)
    assert {s for s, _ in low.replacements} <= {s for s, _ in high.replacements}


# -- masks ---------------------------------------------------------------


def np_example(n):
    words = [f"phrase{i}" for i in range(n)]
    ref = " and ".join(words) + "."
    return bare_example(reference=ref, noun_phrases=[span_of(ref, w) for w in words])


@pytest.mark.parametrize("m,n,k", [(0.25, 8, 2), (0.75, 8, 6), (0.1, 3, 1)])
def test_plan_masks_counts(m, n, k):
    plan = plan_masks(np_example(n), m, rng_seed=5)
    assert len(plan.spans) == k
    assert plan.masked_token_counts == (1,) * k
    assert list(plan.spans) == sorted(plan.spans, key=lambda s: s.start)


def test_plan_masks_no_phrases():
    with pytest.raises(CorruptionError, match="noun phrases"):
        plan_masks(bare_example(reference="x"), 0.5)


def test_plan_masks_skips_overlaps():
    ref = "the big red dog"
    ex = bare_example(reference=ref, noun_phrases=[Span(0, 15, ref), Span(4, 15, "big red dog"), Span(12, 15, "dog")])
    plan = plan_masks(ex, 1.0, rng_seed=0)
    for i, a in enumerate(plan.spans):
        for b in plan.spans[i + 1:]:
            assert not a.overlaps(b)


def test_mask_and_fill_empty_plan():
    ex = np_example(2)
    assert mask_and_fill(ex, MaskPlan(0.25), ServiceClient(offline=True)) == ex.reference_text


def test_mask_and_fill_offline_matches_stub():
    ref = "The small cohort showed gains."
    ex = bare_example(reference=ref, noun_phrases=[span_of(ref, "The small cohort")])
    plan = MaskPlan(1.0, (span_of(ref, "The small cohort"),), (3,))
    out = mask_and_fill(ex, plan, ServiceClient(offline=True), seed=9)
    # independent: ask the stub directly with the hand-masked text
    resp = stub_transport(
        "offline/v1/generate",
        {"kind": "infill", "items": [{"masked_text": "<extra_id_0> showed gains.", "min_tokens": [3], "seed": 9}]},
    )
    assert out == resp["outputs"][0][0] + " showed gains."
    assert len(resp["outputs"][0][0].split()) == 3


def test_mask_and_fill_underfill():
    ref = "The small cohort showed gains."
    ex = bare_example(reference=ref)
    plan = MaskPlan(1.0, (span_of(ref, "The small cohort"),), (3,))
    client = ServiceClient(ServiceEndpoint(max_retries=1), transport=lambda u, b: {"outputs": [["one"]]}, sleep=lambda s: None)
    with pytest.raises(UnderfillError) as err:
        mask_and_fill(ex, plan, client)
    assert err.value.span_index == 0


# -- pool assembly -------------------------------------------------------


def test_faithfulness_pool_counts(toy_examples):
    index = EntityIndex.from_examples(toy_examples.values())
    for ex in toy_examples.values():
        pool = build_pool(ex, "faithfulness", entity_index=index)
        assert len(pool) == 66
        counts = Counter((c.method, c.method_params.get("variant")) for c in pool.candidates)
        assert counts == {
            ("mask_and_fill", "low"): 10,
            ("mask_and_fill", "high"): 10,
            ("swap_intrinsic", "low"): 10,
            ("swap_intrinsic", "high"): 10,
            ("swap_extrinsic", "low"): 10,
            ("swap_extrinsic", "high"): 10,
            ("paraphrase", None): 5,
            ("reference", None): 1,
        }
        assert len({c.text for c in pool.candidates}) == 66


def test_relevance_pool_counts(toy_examples, toy_beams):
    for eid, ex in toy_examples.items():
        pool = build_pool(ex, "relevance", beams=toy_beams[eid])
        gens = Counter(c.method_params["generator"] for c in pool.candidates)
        assert len(pool) == 20 and gens == {"primera": 10, "longt5": 10}
        assert all(c.method_params["p"] == 1.0 for c in pool.candidates)


def test_reference_only_pool(toy_examples):
    ex = next(iter(toy_examples.values()))
    cfg = PoolConfig(variants=(), n_paraphrases=0)
    pool = build_pool(ex, "faithfulness", cfg)
    assert [c.method for c in pool.candidates] == ["reference"]


def test_pool_polarity(toy_examples):
    ex = next(iter(toy_examples.values()))
    pool = build_pool(ex, "faithfulness", entity_index=EntityIndex.from_examples(toy_examples.values()))
    for c in pool.candidates:
        expected = "positive" if c.method in ("paraphrase", "reference") else "negative"
        assert c.polarity_hint == expected


def test_pool_deterministic(toy_examples):
    ex = next(iter(toy_examples.values()))
    index = EntityIndex.from_examples(toy_examples.values())
    a = build_pool(ex, "faithfulness", entity_index=index, rng_seed=4)
    b = build_pool(ex, "faithfulness", clients=Clients.offline(), entity_index=index, rng_seed=4)
    assert a == b
    c = build_pool(ex, "faithfulness", entity_index=index, rng_seed=5)
    assert a != c


def test_missing_beams(toy_examples, toy_beams):
    eid, ex = next(iter(toy_examples.items()))
    only_primera = [b for b in toy_beams[eid] if b["generator"] == "primera"]
    with pytest.raises(MissingBeamsError, match="longt5"):
        build_pool(ex, "relevance", beams=only_primera)


def test_custom_variant_counts(toy_examples):
    ex = next(iter(toy_examples.values()))
    cfg = PoolConfig(variants=(Variant("mask_and_fill", "low", 0.25, count=3),), n_paraphrases=2, include_reference=False)
    pool = build_pool(ex, "faithfulness", cfg)
    assert Counter(c.method for c in pool.candidates) == {"mask_and_fill": 3, "paraphrase": 2}


def test_entity_index_tsv_round_trip(tmp_path, toy_examples):
    index = EntityIndex.from_examples(toy_examples.values())
    p = tmp_path / "ents.tsv"
    assert index.write_tsv(p) == len(index)
    assert EntityIndex.read_tsv(p).pairs() == index.pairs()
    bad = tmp_path / "bad.tsv"
    bad.write_text("no tab here\n")
    with pytest.raises(CorruptionError, match="TAB"):
        EntityIndex.read_tsv(bad)
