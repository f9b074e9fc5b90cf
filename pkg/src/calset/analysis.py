"""Set statistics and correlate analysis.

BLEU here uses n-grams up to 4, add-one smoothing on every n-gram precision
and the standard brevity penalty.
"""
from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import CandidatePool, CalsetError, SelectedSet
from .metrics import candidate_loglik, extractive_fragments, ngrams, tokenize

MAX_ORDER = 4


class ConstantInputWarning(UserWarning):
    """Correlation requested on a constant input; the value is defined as 0."""


class AnalysisError(CalsetError, ValueError):
    pass


# ---------------------------------------------------------------------------
# BLEU


@dataclass(frozen=True)
class _Prepared:
    length: int
    counts: tuple[Counter, ...]


def prepare_bleu(text: str) -> _Prepared:
    toks = tokenize(text)
    return _Prepared(len(toks), tuple(ngrams(toks, n) for n in range(1, MAX_ORDER + 1)))


def bleu_prepared(cand: _Prepared, ref: _Prepared) -> float:
    if cand.length == 0:
        return 0.0
    log_p = 0.0
    for n in range(MAX_ORDER):
        c, r = cand.counts[n], ref.counts[n]
        match = sum((c & r).values())
        total = sum(c.values())
        log_p += math.log((match + 1) / (total + 1))
    bp = 1.0 if cand.length > ref.length else math.exp(1.0 - ref.length / cand.length)
    return bp * math.exp(log_p / MAX_ORDER)


def bleu(candidate: str, reference: str) -> float:
    """Sentence BLEU-4 with add-one smoothing and brevity penalty."""
    return bleu_prepared(prepare_bleu(candidate), prepare_bleu(reference))


def self_bleu(texts: Sequence[str]) -> float:
    """Mean BLEU over ordered pairs ``(a, b)``, ``a != b``."""
    if len(texts) < 2:
        raise AnalysisError("self_bleu needs at least two texts")
    prepared = [prepare_bleu(t) for t in texts]
    vals = [
        bleu_prepared(prepared[i], prepared[j])
        for i in range(len(texts))
        for j in range(len(texts))
        if i != j
    ]
    return math.fsum(vals) / len(vals)


def inverse_self_bleu(texts: Sequence[str]) -> float:
    return 1.0 - self_bleu(texts)


# ---------------------------------------------------------------------------
# simple set statistics


def margin_gap(values: Sequence[float]) -> float:
    """Mean adjacent difference of the descending-sorted values."""
    if len(values) < 2:
        raise AnalysisError("margin_gap needs at least two values")
    # the adjacent differences telescope to (max - min)
    return (max(values) - min(values)) / (len(values) - 1)


def likelihood_gap(positives: Sequence[float], negatives: Sequence[float]) -> float:
    if not len(positives) or not len(negatives):
        raise AnalysisError("likelihood_gap needs non-empty positives and negatives")
    return math.fsum(positives) / len(positives) - math.fsum(negatives) / len(negatives)


# ---------------------------------------------------------------------------
# correlation


def average_ranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    x = np.asarray(values, dtype=float)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _check_pair(xs, ys):
    if len(xs) != len(ys):
        raise AnalysisError("correlation inputs must have equal length")
    if len(xs) < 2:
        raise AnalysisError("correlation needs at least two points")


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    _check_pair(xs, ys)
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise AnalysisError("pearson is undefined for constant input")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def spearman(xs: Sequence[float], ys: Sequence[float], warn: bool = True) -> float:
    """Pearson correlation of average ranks; 0 (with a warning) if either side is constant."""
    _check_pair(xs, ys)
    rx, ry = average_ranks(xs), average_ranks(ys)
    if np.all(rx == rx[0]) or np.all(ry == ry[0]):
        if warn:
            warnings.warn("spearman on constant input; returning 0", ConstantInputWarning, stacklevel=2)
        return 0.0
    return pearson(rx, ry)


def precalibration_score(beam_ranks: Sequence[float], rel_aggs: Sequence[float]) -> float:
    """Negative spearman between beam order and metric order (best = rank 0).

    -1: the beam order already matches the metric; +1: exactly reversed.
    """
    metric_rank = average_ranks([-v for v in rel_aggs])
    return 0.0 - spearman(beam_ranks, metric_rank)


# ---------------------------------------------------------------------------
# per-set statistics


@dataclass(frozen=True)
class SetStatistics:
    example_id: str
    strategy: str
    mean_quality: float
    margin_gap: float
    inverse_self_bleu: float
    mean_length_tokens: float
    mean_extractive_density: float
    likelihood_gap: float | None = None
    precalibration_score: float | None = None

    def __post_init__(self):
        for k, v in asdict(self).items():
            if isinstance(v, float) and not math.isfinite(v):
                raise AnalysisError(f"statistic {k} is not finite")

    def to_json(self) -> dict:
        return asdict(self)


STAT_COLUMNS = (
    "mean_quality",
    "margin_gap",
    "inverse_self_bleu",
    "likelihood_gap",
    "mean_length_tokens",
    "mean_extractive_density",
    "precalibration_score",
)


def _density(c, source: str) -> float:
    d = c.scores.extractive_density
    if d is None:
        d = extractive_fragments(source, c.text).density
    return d


def set_statistics(selected: SelectedSet, pool: CandidatePool, quality_metric: str | None = None) -> SetStatistics:
    by_id = pool.by_id()
    try:
        members = [by_id[i] for i in selected.candidate_ids]
    except KeyError as exc:
        raise AnalysisError(f"selected id {exc.args[0]} not in pool {pool.example_id}") from None
    metric = quality_metric or ("rel_agg" if selected.kind == "relevance" else "faith_agg")
    q = [c.scores.get(metric) for c in members]
    if any(v is None for v in q):
        raise AnalysisError(f"set {selected.example_id}: members lack {metric}")

    lengths = [c.scores.n_tokens for c in members]
    dens = [_density(c, pool.example.source_text) for c in members]
    lik_gap = pre = None

    if selected.kind == "relevance":
        gap = margin_gap(q)
        diversity = inverse_self_bleu([c.text for c in members])
        ranks = [c.beam_rank for c in members]
        if all(r is not None for r in ranks):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ConstantInputWarning)
                pre = precalibration_score(ranks, q)
    else:
        P = [by_id[i] for i in selected.positives]
        N = [by_id[i] for i in selected.negatives]
        qp = [c.scores.get(metric) for c in P]
        qn = [c.scores.get(metric) for c in N]
        gap = math.fsum(qp) / len(qp) - math.fsum(qn) / len(qn)
        divs = [inverse_self_bleu([c.text for c in g]) for g in (P, N) if len(g) >= 2]
        diversity = math.fsum(divs) / len(divs) if divs else 0.0
        lp = [candidate_loglik(c) for c in P]
        ln = [candidate_loglik(c) for c in N]
        if all(v is not None for v in lp + ln):
            lik_gap = likelihood_gap(lp, ln)

    return SetStatistics(
        example_id=selected.example_id,
        strategy=str(selected.strategy),
        mean_quality=math.fsum(q) / len(q),
        margin_gap=gap,
        inverse_self_bleu=diversity,
        mean_length_tokens=math.fsum(lengths) / len(lengths),
        mean_extractive_density=math.fsum(dens) / len(dens),
        likelihood_gap=lik_gap,
        precalibration_score=pre,
    )


def mean_statistics(stats: Sequence[SetStatistics | Mapping]) -> dict[str, float | None]:
    """Column means across sets (None when no set has the column)."""
    rows = [s.to_json() if isinstance(s, SetStatistics) else dict(s) for s in stats]
    out: dict[str, float | None] = {}
    for col in STAT_COLUMNS:
        vals = [r[col] for r in rows if r.get(col) is not None]
        out[col] = math.fsum(vals) / len(vals) if vals else None
    return out


# ---------------------------------------------------------------------------
# correlate runs


@dataclass(frozen=True)
class CorrelationRow:
    statistic: str
    pearson: float | None
    n: int
    flag: str = ""


def correlate_runs(
    rows: Sequence[Mapping[str, float | None]],
    target: str = "delta",
    columns: Sequence[str] | None = None,
) -> list[CorrelationRow]:
    """Pearson correlation of each statistic column with the ``target`` column."""
    if columns is None:
        columns = sorted({k for r in rows for k in r if k != target and not k.startswith("_")})
    out = []
    for col in columns:
        pairs = [
            (float(r[col]), float(r[target]))
            for r in rows
            if r.get(col) is not None and r.get(target) is not None
        ]
        if len(pairs) < 2:
            out.append(CorrelationRow(col, None, len(pairs), "too few runs"))
            continue
        xs, ys = zip(*pairs)
        if len(set(xs)) == 1:
            out.append(CorrelationRow(col, None, len(pairs), "constant statistic"))
            continue
        if len(set(ys)) == 1:
            out.append(CorrelationRow(col, None, len(pairs), "constant target"))
            continue
        out.append(CorrelationRow(col, pearson(xs, ys), len(pairs)))
    return out


def format_table(rows: Sequence[Mapping], columns: Sequence[str] | None = None, precision: int = 4) -> str:
    """Aligned plain-text table."""
    if not rows:
        return ""
    columns = list(columns or rows[0].keys())

    def cell(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.{precision}f}"
        return str(v)

    body = [[cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for b in body:
        lines.append("  ".join(v.ljust(w) for v, w in zip(b, widths)))
    return "\n".join(lines)
