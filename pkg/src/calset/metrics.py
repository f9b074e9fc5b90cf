"""Relevance/faithfulness metrics, z-normalization and aggregation.

ROUGE-N/L and the extractive fragment statistics are computed natively.
Embedding similarity, sequence log-likelihood and entailment come from a
scorer service (see :mod:`calset.clients`).
"""
from __future__ import annotations

import dataclasses
import math
import re
import string
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import (
    Candidate,
    CandidatePool,
    CalsetError,
    MetricStats,
    NormalizationStats,
    ScoreVector,
    count_tokens,
    nfc,
)

REL_METRICS = ("rouge1_f1", "rouge2_f1", "bertscore_ref")
FAITH_METRICS = ("bartscore", "bertscore_src", "factscore")

_PUNCT = string.punctuation + "\u2018\u2019\u201c\u201d\u2013\u2014"


class MetricError(CalsetError, ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase, NFC, split on whitespace, strip edge punctuation. No stemming."""
    out = []
    for tok in nfc(text).lower().split():
        tok = tok.strip(_PUNCT)
        if tok:
            out.append(tok)
    return out


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# ROUGE


def rouge_n(hypothesis: str, reference: str, n: int = 1) -> tuple[float, float, float]:
    """Clipped n-gram overlap. Returns ``(precision, recall, f1)``."""
    if n not in (1, 2):
        raise ValueError("rouge_n supports n in {1, 2}")
    hyp = ngrams(tokenize(hypothesis), n)
    ref = ngrams(tokenize(reference), n)
    overlap = sum((hyp & ref).values())
    n_hyp, n_ref = sum(hyp.values()), sum(ref.values())
    p = overlap / n_hyp if n_hyp else 0.0
    r = overlap / n_ref if n_ref else 0.0
    # 2PR/(P+R) == 2*overlap/(n_hyp+n_ref); the count form avoids extra rounding
    f = 2 * overlap / (n_hyp + n_ref) if overlap else 0.0
    return p, r, f


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(hypothesis: str, reference: str) -> tuple[float, float, float]:
    """Longest-common-subsequence ROUGE-L (not part of either aggregate)."""
    hyp, ref = tokenize(hypothesis), tokenize(reference)
    lcs = _lcs_length(hyp, ref)
    p = lcs / len(hyp) if hyp else 0.0
    r = lcs / len(ref) if ref else 0.0
    f = 2 * lcs / (len(hyp) + len(ref)) if lcs else 0.0
    return p, r, f


# ---------------------------------------------------------------------------
# extractive fragments


@dataclass(frozen=True)
class FragmentSet:
    fragments: tuple[tuple[int, int], ...]  # [start, end) token ranges in the summary
    summary_len: int

    @property
    def coverage(self) -> float:
        if not self.summary_len:
            return 0.0
        return sum(e - s for s, e in self.fragments) / self.summary_len

    @property
    def density(self) -> float:
        if not self.summary_len:
            return 0.0
        return sum((e - s) ** 2 for s, e in self.fragments) / self.summary_len


def extractive_fragments(source: str, summary: str) -> FragmentSet:
    """Greedy longest-match fragments shared by summary and source."""
    a = tokenize(source)
    s = tokenize(summary)
    positions: dict[str, list[int]] = {}
    for j, tok in enumerate(a):
        positions.setdefault(tok, []).append(j)
    frags = []
    i = 0
    while i < len(s):
        best = 0
        for j in positions.get(s[i], ()):
            k = 0
            while i + k < len(s) and j + k < len(a) and s[i + k] == a[j + k]:
                k += 1
            best = max(best, k)
        if best:
            frags.append((i, i + best))
            i += best
        else:
            i += 1
    return FragmentSet(tuple(frags), len(s))


# ---------------------------------------------------------------------------
# sentence splitting and alignment

DEFAULT_ABBREVIATIONS = frozenset(
    {"e.g.", "i.e.", "et al.", "al.", "fig.", "figs.", "dr.", "mr.", "mrs.", "ms.", "vs.", "approx.", "no.", "ref.", "eq."}
)
_BOUNDARY = re.compile(r"[.!?]\s+(?=[A-Z0-9])")


def split_sentences(text: str, abbreviations: Iterable[str] = DEFAULT_ABBREVIATIONS) -> list[str]:
    abbrevs = {a.lower() for a in abbreviations}
    out, start = [], 0
    for m in _BOUNDARY.finditer(text):
        end = m.start() + 1
        last_word = text[start:end].split()[-1].lower() if text[start:end].split() else ""
        tail2 = " ".join(text[start:end].split()[-2:]).lower()
        if last_word in abbrevs or tail2 in abbrevs:
            continue
        piece = text[start:end].strip()
        if piece:
            out.append(piece)
        start = m.end()
    piece = text[start:].strip()
    if piece:
        out.append(piece)
    return out


def _recall(selected_counts: Counter, target: Counter, n_target: int) -> float:
    return sum((selected_counts & target).values()) / n_target if n_target else 0.0


def greedy_align(summary_sentence: str, source_sentences: Sequence[str], max_k: int = 5) -> list[int]:
    """Greedily pick source sentences that most raise ROUGE-1 recall.

    Stops when no sentence adds recall or ``max_k`` are chosen. Always returns
    at least one index (the best single sentence, lowest index on ties).
    """
    if not source_sentences:
        raise ValueError("greedy_align needs at least one source sentence")
    if max_k < 1:
        raise ValueError("max_k must be >= 1")
    target = Counter(tokenize(summary_sentence))
    n_target = sum(target.values())
    counts = [Counter(tokenize(s)) for s in source_sentences]
    chosen: list[int] = []
    current = Counter()
    current_recall = 0.0
    while len(chosen) < max_k:
        best_i, best_recall = None, -1.0
        for i, c in enumerate(counts):
            if i in chosen:
                continue
            r = _recall(current + c, target, n_target)
            if r > best_recall:
                best_i, best_recall = i, r
        if best_i is None:
            break
        if chosen and best_recall - current_recall <= 0:
            break
        if not chosen and best_recall <= 0:
            chosen.append(best_i)
            break
        chosen.append(best_i)
        current = current + counts[best_i]
        current_recall = best_recall
    return chosen


def fact_score(summary: str, source_sentences: Sequence[str], client, max_k: int = 5) -> float:
    """Mean entailment probability of each summary sentence given its alignment."""
    sentences = split_sentences(summary)
    if not sentences:
        raise MetricError("no sentences in summary")
    pairs = []
    for sent in sentences:
        idx = greedy_align(sent, source_sentences, max_k=max_k)
        premise = " ".join(source_sentences[i] for i in sorted(idx))
        pairs.append((premise, sent))
    probs = client.score_pairs("entailment_supported", pairs)
    return float(np.mean(probs))


def avg_token_loglik(token_logprobs: Sequence[float]) -> float:
    if len(token_logprobs) == 0:
        raise ValueError("token_logprobs must be non-empty")
    if any(x > 0 for x in token_logprobs):
        raise ValueError("token log-probabilities must be <= 0")
    return math.fsum(token_logprobs) / len(token_logprobs)


# ---------------------------------------------------------------------------
# normalization and aggregation


def normalize(raw: float, stats: MetricStats) -> float:
    if not stats.stddev > 0:
        raise ValueError("stddev must be > 0")
    return (raw - stats.mean) / stats.stddev


def fit_stats(
    rows: Iterable[Mapping[str, float | None]],
    metrics: Sequence[str] = REL_METRICS + FAITH_METRICS,
    provenance: str = "",
    ddof: int = 0,
) -> NormalizationStats:
    """Mean/stddev per metric over a baseline score table (e.g. FT test outputs)."""
    rows = list(rows)
    out = {}
    for m in metrics:
        vals = np.array([r[m] for r in rows if r.get(m) is not None], dtype=float)
        if len(vals) <= ddof:
            continue
        sd = float(np.std(vals, ddof=ddof))
        if sd > 0:
            out[m] = MetricStats(float(np.mean(vals)), sd)
    return NormalizationStats(out, provenance)


@dataclass(frozen=True)
class AggregateWeights:
    rel: Mapping[str, float] = dataclasses.field(
        default_factory=lambda: {m: 1 / 3 for m in REL_METRICS}
    )
    faith: Mapping[str, float] = dataclasses.field(
        default_factory=lambda: {m: 1 / 3 for m in FAITH_METRICS}
    )

    def __post_init__(self):
        for name in ("rel", "faith"):
            w = getattr(self, name)
            if any(v < 0 for v in w.values()):
                raise ValueError(f"{name} weights must be non-negative")
            if abs(math.fsum(w.values()) - 1.0) > 1e-9:
                raise ValueError(f"{name} weights must sum to 1")

    def members(self, which: str) -> Mapping[str, float]:
        if which not in ("rel", "faith"):
            raise ValueError("which must be 'rel' or 'faith'")
        return self.rel if which == "rel" else self.faith


def aggregate(
    scores: ScoreVector | Mapping[str, float],
    stats: NormalizationStats,
    weights: AggregateWeights | None = None,
    which: str = "rel",
) -> float:
    """Weighted mean of z-normalized member metrics."""
    weights = weights or AggregateWeights()
    members = weights.members(which)
    total = []
    for metric, w in members.items():
        raw = scores.get(metric)
        if raw is None:
            raise MetricError(f"missing member metric {metric} for {which}_agg")
        total.append(w * normalize(raw, stats[metric]))
    return math.fsum(total)


# ---------------------------------------------------------------------------
# pool scoring


def candidate_loglik(c: Candidate) -> float | None:
    """Mean token log-likelihood under the fine-tuned model, if known."""
    if c.token_logprobs:
        return avg_token_loglik(c.token_logprobs)
    return c.scores.model_loglik


def score_pool(pool: CandidatePool, clients=None, neural: bool = True) -> CandidatePool:
    """Fill native metrics and (when ``neural``) the service-backed ones.

    Precomputed values already present in a candidate's ScoreVector are kept.
    """
    ex = pool.example
    updated = []
    for c in pool.candidates:
        sv = c.scores
        fields: dict = {"n_tokens": count_tokens(c.text)}
        if ex.reference_text:
            fields["rouge1_f1"] = rouge_n(c.text, ex.reference_text, 1)[2]
            fields["rouge2_f1"] = rouge_n(c.text, ex.reference_text, 2)[2]
            fields["rougeL_f1"] = rouge_l(c.text, ex.reference_text)[2]
        if ex.source_text:
            frag = extractive_fragments(ex.source_text, c.text)
            fields["extractive_density"] = frag.density
            fields["extractive_coverage"] = frag.coverage
        if c.token_logprobs:
            fields["model_loglik"] = avg_token_loglik(c.token_logprobs)
        updated.append(dataclasses.replace(sv, **fields))

    if neural and clients is not None:
        cands = pool.candidates
        todo = {
            "bertscore_ref": ("embed_sim_ref", clients.scorer, lambda c: (ex.reference_text, c.text)),
            "bertscore_src": ("embed_sim_src", clients.scorer, lambda c: (ex.source_text, c.text)),
            "bartscore": ("seq_loglik", clients.scorer, lambda c: (ex.source_text, c.text)),
            "model_loglik": ("seq_loglik", clients.likelihood, lambda c: ("model:" + ex.source_text, c.text)),
        }
        for metric, (kind, client, pair) in todo.items():
            idx = [i for i, sv in enumerate(updated) if sv.get(metric) is None]
            if not idx:
                continue
            values = client.score_pairs(kind, [pair(cands[i]) for i in idx])
            for i, v in zip(idx, values):
                updated[i] = dataclasses.replace(updated[i], **{metric: v})
        if ex.source_sentences:
            for i, c in enumerate(cands):
                if updated[i].factscore is None and split_sentences(c.text):
                    fs = fact_score(c.text, ex.source_sentences, clients.scorer)
                    updated[i] = dataclasses.replace(updated[i], factscore=fs)

    new = tuple(dataclasses.replace(c, scores=sv) for c, sv in zip(pool.candidates, updated))
    return dataclasses.replace(pool, candidates=new)


def normalize_pool(
    pool: CandidatePool,
    stats: NormalizationStats,
    weights: AggregateWeights | None = None,
) -> CandidatePool:
    """Attach rel_agg / faith_agg wherever every member metric is present."""
    weights = weights or AggregateWeights()
    new = []
    for c in pool.candidates:
        fields = {}
        for which in ("rel", "faith"):
            members = weights.members(which)
            if all(c.scores.get(m) is not None for m in members):
                fields[f"{which}_agg"] = aggregate(c.scores, stats, weights, which)
        new.append(dataclasses.replace(c, scores=dataclasses.replace(c.scores, **fields)))
    return dataclasses.replace(pool, candidates=tuple(new))
