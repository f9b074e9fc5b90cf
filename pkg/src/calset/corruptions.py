"""Synthetic negatives (entity/number swaps, mask-and-fill) and pool assembly."""
from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
from fractions import Fraction
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .clients import Clients
from .core import (
    Candidate,
    CandidatePool,
    CalsetError,
    Example,
    Span,
    count_tokens,
    iter_jsonl,
    nfc,
    whitespace_tokens,
)

logger = logging.getLogger(__name__)


class CorruptionError(CalsetError, ValueError):
    pass


class MissingBeamsError(CorruptionError):
    pass


def corruption_count(rate: float, n: int) -> int:
    """``max(1, round_half_up(rate * n))`` for ``n > 0``, else 0."""
    if not 0 < rate <= 1:
        raise ValueError(f"rate must be in (0, 1], got {rate}")
    if n <= 0:
        return 0
    # round on the decimal value of the rate: 0.3 * 5 is 1.4999... in binary
    exact = Fraction(repr(float(rate))) * n
    return max(1, math.floor(exact + Fraction(1, 2)))


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary parts (independent of PYTHONHASHSEED)."""
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "big") >> 1


# ---------------------------------------------------------------------------
# entity index


class EntityIndex:
    """Corpus-wide ``semantic_type -> surfaces`` table for extrinsic swaps."""

    def __init__(self, pairs: Iterable[tuple[str, str]] = ()):
        table: dict[str, set[str]] = {}
        for typ, surface in pairs:
            table.setdefault(typ, set()).add(surface)
        self._table = {t: tuple(sorted(s)) for t, s in table.items()}

    def surfaces(self, typ: str) -> tuple[str, ...]:
        return self._table.get(typ, ())

    def pairs(self) -> list[tuple[str, str]]:
        return [(t, s) for t in sorted(self._table) for s in self._table[t]]

    def __len__(self) -> int:
        return sum(len(v) for v in self._table.values())

    @classmethod
    def from_examples(cls, examples: Iterable[Example]) -> "EntityIndex":
        pairs = []
        for ex in examples:
            for kind in ("entities", "numbers"):
                for span in ex.annotations.select(kind, "source"):
                    pairs.append((span.type, span.surface))
        return cls(pairs)

    def write_tsv(self, path: str | os.PathLike) -> int:
        from .core import atomic_write_lines

        for t, s in self.pairs():
            if "\t" in t or "\t" in s or "\n" in s:
                raise ValueError(f"entity {s!r} of type {t!r} contains a tab or newline")
        return atomic_write_lines(path, (f"{t}\t{s}" for t, s in self.pairs()))

    @classmethod
    def read_tsv(cls, path: str | os.PathLike) -> "EntityIndex":
        pairs = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                typ, sep, surface = line.partition("\t")
                if not sep:
                    raise CorruptionError(f"{path}:{lineno}: expected type<TAB>surface")
                pairs.append((typ, surface))
        return cls(pairs)


# ---------------------------------------------------------------------------
# swaps


@dataclass(frozen=True)
class SwapPlan:
    mode: str
    swap_rate: float
    entity_replacements: tuple[tuple[Span, str], ...] = ()
    number_replacements: tuple[tuple[Span, str], ...] = ()

    def __post_init__(self):
        if self.mode not in ("intrinsic", "extrinsic"):
            raise ValueError(f"swap mode must be intrinsic or extrinsic, got {self.mode!r}")
        spans = [s for s, _ in self.replacements]
        for i, a in enumerate(spans):
            for b in spans[i + 1 :]:
                if a.overlaps(b):
                    raise CorruptionError(f"overlapping swap spans {a} and {b}")

    @property
    def replacements(self) -> tuple[tuple[Span, str], ...]:
        return self.entity_replacements + self.number_replacements

    def __len__(self) -> int:
        return len(self.replacements)


def _same_surface(a: str, b: str) -> bool:
    return nfc(a).strip().lower() == nfc(b).strip().lower()


def plan_swaps(
    example: Example,
    mode: str,
    s: float,
    corpus_index: EntityIndex | None = None,
    rng_seed: int = 0,
) -> SwapPlan:
    """Choose reference entities/numbers to replace with same-type surfaces.

    Entities and numbers are counted separately. The chosen spans are a prefix
    of one seeded permutation, so a higher rate extends a lower one.
    """
    if mode == "extrinsic" and corpus_index is None:
        raise CorruptionError("extrinsic swaps need a corpus entity index")
    out: dict[str, list[tuple[Span, str]]] = {"entities": [], "numbers": []}
    taken: list[Span] = []
    for kind in ("entities", "numbers"):
        spans = sorted(example.annotations.select(kind, "reference"), key=lambda sp: (sp.start, sp.end))
        k = corruption_count(s, len(spans))
        if k == 0:
            continue
        order = np.random.default_rng(derive_seed(rng_seed, kind, "order")).permutation(len(spans))
        for pos in order[:k]:
            span = spans[int(pos)]
            if any(span.overlaps(t) for t in taken):
                logger.info("skip %s %r: overlaps an earlier swap", kind, span.surface)
                continue
            if mode == "intrinsic":
                pool = sorted({sp.surface for sp in example.annotations.select(kind, "source") if sp.type == span.type})
            else:
                pool = list(corpus_index.surfaces(span.type))
            pool = [p for p in pool if not _same_surface(p, span.surface)]
            if not pool:
                logger.info("skip %s %r: no %s replacement of type %s", kind, span.surface, mode, span.type)
                continue
            rng = np.random.default_rng(derive_seed(rng_seed, kind, span.start, span.end, "pick"))
            out[kind].append((span, pool[int(rng.integers(len(pool)))]))
            taken.append(span)
    if not out["entities"] and not out["numbers"]:
        raise CorruptionError("swap produced identity")
    return SwapPlan(
        mode=mode,
        swap_rate=s,
        entity_replacements=tuple(out["entities"]),
        number_replacements=tuple(out["numbers"]),
    )


def splice(text: str, replacements: Sequence[tuple[Span, str]]) -> str:
    """Replace spans right-to-left so earlier offsets stay valid."""
    ordered = sorted(replacements, key=lambda r: r[0].start)
    for (a, _), (b, _) in zip(ordered, ordered[1:]):
        if a.overlaps(b):
            raise CorruptionError(f"overlapping spans {a} and {b}")
    for span, _ in ordered:
        if span.end > len(text):
            raise CorruptionError(f"span [{span.start}, {span.end}) out of bounds for length {len(text)}")
    out = text
    for span, new in reversed(ordered):
        out = out[: span.start] + new + out[span.end :]
    return out


def apply_swaps(reference_text: str, plan: SwapPlan) -> str:
    return splice(reference_text, plan.replacements)


# ---------------------------------------------------------------------------
# mask-and-fill


@dataclass(frozen=True)
class MaskPlan:
    mask_rate: float
    spans: tuple[Span, ...] = ()
    masked_token_counts: tuple[int, ...] = ()

    def __post_init__(self):
        if len(self.spans) != len(self.masked_token_counts):
            raise ValueError("one masked token count per span")
        for i, a in enumerate(self.spans):
            for b in self.spans[i + 1 :]:
                if a.overlaps(b):
                    raise CorruptionError(f"overlapping mask spans {a} and {b}")


def plan_masks(example: Example, m: float, rng_seed: int = 0) -> MaskPlan:
    phrases = sorted(example.annotations.select("noun_phrases", "reference"), key=lambda sp: (sp.start, sp.end))
    if not phrases:
        raise CorruptionError(f"example {example.example_id} has no noun phrases to mask")
    k = corruption_count(m, len(phrases))
    order = np.random.default_rng(derive_seed(rng_seed, "mask")).permutation(len(phrases))
    chosen: list[Span] = []
    for pos in order:
        span = phrases[int(pos)]
        if any(span.overlaps(c) for c in chosen):
            continue
        chosen.append(span)
        if len(chosen) == k:
            break
    chosen.sort(key=lambda sp: sp.start)
    counts = tuple(max(1, len(whitespace_tokens(sp.surface))) for sp in chosen)
    return MaskPlan(mask_rate=m, spans=tuple(chosen), masked_token_counts=counts)


def mask_text(text: str, plan: MaskPlan) -> str:
    return splice(text, [(sp, f"<extra_id_{i}>") for i, sp in enumerate(plan.spans)])


def mask_and_fill(example: Example, plan: MaskPlan, client, seed: int = 0) -> str:
    if not plan.spans:
        return example.reference_text
    masked = mask_text(example.reference_text, plan)
    fills = client.infill(masked, list(plan.masked_token_counts), seed=seed)
    return splice(example.reference_text, list(zip(plan.spans, fills)))


# ---------------------------------------------------------------------------
# pool assembly


@dataclass(frozen=True)
class Variant:
    method: str
    name: str
    rate: float
    count: int = 10


DEFAULT_VARIANTS = (
    Variant("mask_and_fill", "low", 0.25),
    Variant("mask_and_fill", "high", 0.75),
    Variant("swap_intrinsic", "low", 0.5),
    Variant("swap_intrinsic", "high", 1.0),
    Variant("swap_extrinsic", "low", 0.5),
    Variant("swap_extrinsic", "high", 1.0),
)


@dataclass(frozen=True)
class PoolConfig:
    variants: tuple[Variant, ...] = DEFAULT_VARIANTS
    n_paraphrases: int = 5
    paraphrase_temperature: float = 0.7
    paraphrase_calls: int = 1
    demonstrations: tuple[tuple[str, str], ...] = ()
    include_reference: bool = True
    beam_generators: tuple[str, ...] = ("primera", "longt5")
    beams_per_generator: int = 10
    diversity_penalty: float = 1.0
    max_attempts: int = 5

    @classmethod
    def from_mapping(cls, obj: Mapping | None) -> "PoolConfig":
        obj = dict(obj or {})
        if "variants" in obj:
            obj["variants"] = tuple(Variant(**v) for v in obj["variants"])
        for key in ("demonstrations", "beam_generators"):
            if key in obj:
                obj[key] = tuple(tuple(x) if isinstance(x, list) else x for x in obj[key])
        return cls(**obj)


def load_beams(path: str | os.PathLike) -> dict[str, list[dict]]:
    """Beam file records grouped by example id."""
    out: dict[str, list[dict]] = {}
    for lineno, obj in iter_jsonl(path):
        for key in ("example_id", "generator", "beam_rank", "text"):
            if key not in obj:
                raise CorruptionError(f"{path}:{lineno}: beam record lacks {key!r}")
        out.setdefault(str(obj["example_id"]), []).append(obj)
    return out


def _variant_text(example: Example, variant: Variant, clients: Clients, index, seed: int, entity_index) -> tuple[str, dict]:
    if variant.method == "mask_and_fill":
        plan = plan_masks(example, variant.rate, seed)
        text = mask_and_fill(example, plan, clients.infill, seed=seed)
        return text, {"m": variant.rate, "n_masked": len(plan.spans)}
    mode = "intrinsic" if variant.method == "swap_intrinsic" else "extrinsic"
    plan = plan_swaps(example, mode, variant.rate, entity_index, seed)
    return apply_swaps(example.reference_text, plan), {
        "s": variant.rate,
        "n_entities": len(plan.entity_replacements),
        "n_numbers": len(plan.number_replacements),
    }


def build_pool(
    example: Example,
    pool_kind: str,
    config: PoolConfig | None = None,
    clients: Clients | None = None,
    rng_seed: int = 0,
    entity_index: EntityIndex | None = None,
    beams: Sequence[Mapping] | None = None,
) -> CandidatePool:
    """Assemble every candidate for one example.

    Faithfulness: 10 per corruption variant, paraphrases and the reference
    (66 with the defaults). Relevance: the diverse-beam outputs of each
    configured generator, read from ``beams`` (20 with the defaults).
    """
    config = config or PoolConfig()
    clients = clients or Clients.offline()
    eid = example.example_id
    cands: list[Candidate] = []

    if pool_kind == "relevance":
        records = list(beams or [])
        for gen in config.beam_generators:
            rows = sorted((r for r in records if r["generator"] == gen), key=lambda r: int(r["beam_rank"]))
            if not rows:
                raise MissingBeamsError(f"no beams from generator {gen!r} for example {eid}")
            for r in rows[: config.beams_per_generator]:
                lp = r.get("token_logprobs")
                cands.append(
                    Candidate(
                        candidate_id=f"{eid}:diverse_beam:{gen}:{int(r['beam_rank']):02d}",
                        example_id=eid,
                        method="diverse_beam",
                        text=r["text"],
                        method_params={"generator": gen, "p": config.diversity_penalty},
                        beam_rank=int(r["beam_rank"]),
                        token_logprobs=None if lp is None else tuple(lp),
                    )
                )
        return CandidatePool(example=example, candidates=tuple(cands), pool_kind="relevance")

    if pool_kind != "faithfulness":
        raise ValueError(f"unknown pool_kind {pool_kind!r}")

    seen = {nfc(example.reference_text)}
    for variant in config.variants:
        for i in range(variant.count):
            text = params = None
            for attempt in range(config.max_attempts):
                seed = derive_seed(rng_seed, eid, variant.method, variant.name, i, attempt)
                text, params = _variant_text(example, variant, clients, i, seed, entity_index)
                params = {**params, "variant": variant.name, "seed": seed, "attempt": attempt}
                if nfc(text) not in seen:
                    break
            else:
                logger.warning("%s %s/%s #%d still duplicates after %d attempts", eid, variant.method, variant.name, i, config.max_attempts)
            seen.add(nfc(text))
            cands.append(
                Candidate(
                    candidate_id=f"{eid}:{variant.method}:{variant.name}:{i:02d}",
                    example_id=eid,
                    method=variant.method,
                    text=text,
                    method_params=params,
                )
            )

    if config.n_paraphrases:
        paras: list[str] = []
        per_call = math.ceil(config.n_paraphrases / config.paraphrase_calls)
        for call in range(config.paraphrase_calls):
            demos = config.demonstrations
            if demos:
                rng = np.random.default_rng(derive_seed(rng_seed, eid, "demos", call))
                pick = rng.choice(len(demos), size=min(3, len(demos)), replace=False)
                demos = tuple(demos[int(j)] for j in sorted(pick))
            need = min(per_call, config.n_paraphrases - len(paras))
            for text in clients.paraphrase.paraphrase(
                example.reference_text, demos, config.paraphrase_temperature, need
            ):
                if text not in paras:
                    paras.append(text)
        for i, text in enumerate(paras):
            cands.append(
                Candidate(
                    candidate_id=f"{eid}:paraphrase:t{config.paraphrase_temperature}:{i:02d}",
                    example_id=eid,
                    method="paraphrase",
                    text=text,
                    method_params={"t": config.paraphrase_temperature},
                )
            )

    if config.include_reference:
        cands.append(
            Candidate(
                candidate_id=f"{eid}:reference:00",
                example_id=eid,
                method="reference",
                text=example.reference_text,
            )
        )
    cands.sort(key=lambda c: c.candidate_id)
    return CandidatePool(example=example, candidates=tuple(cands), pool_kind="faithfulness")
