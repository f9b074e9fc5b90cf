"""Selection strategies for rank sets (relevance) and contrast sets (faithfulness).

Every strategy is addressed by a ``family:mode`` :class:`StrategyId`. Rank
sets are always emitted best-first by the quality metric; contrast sets are
split into positives and negatives by polarity hint.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Iterator, Sequence

import numpy as np

from . import analysis
from .corruptions import derive_seed
from .core import Candidate, CandidatePool, CalsetError, SelectedSet, StrategyId
from .metrics import candidate_loglik

CATALOG: dict[str, tuple[StrategyId, ...]] = {
    "relevance": tuple(
        StrategyId(f, m)
        for f, m in [
            ("random", "sample"),
            ("quality", "extreme"),
            ("quality", "average"),
            ("quality", "min"),
            ("quality", "high"),
            ("margin", "max"),
            ("margin", "min"),
            ("diversity", "max"),
            ("diversity", "min"),
            ("likelihood", "extreme_beam"),
            ("likelihood", "top_beam"),
            ("likelihood", "bottom_beam"),
            ("spurious", "max_length"),
            ("spurious", "min_length"),
            ("hybrid_corr", "max"),
        ]
    ),
    "faithfulness": tuple(
        StrategyId(f, m)
        for f, m in [
            ("random", "sample"),
            ("quality", "average"),
            ("margin", "max"),
            ("margin", "min"),
            ("diversity", "max"),
            ("diversity", "min"),
            ("likelihood", "easy"),
            ("likelihood", "hard"),
            ("spurious", "max_extract_gap"),
        ]
    ),
}


class SelectionError(CalsetError, ValueError):
    pass


@dataclass(frozen=True)
class SelectionConfig:
    strategy: StrategyId
    k_rank: int = 4
    k_pos: int = 2
    k_neg: int = 2
    quality_metric: str | None = None  # rel_agg / faith_agg; defaults by pool kind
    rng_seed: int = 0
    enumeration_cap: int = 200_000
    beam_generator: str | None = "primera"

    def __post_init__(self):
        if isinstance(self.strategy, str):
            object.__setattr__(self, "strategy", StrategyId.parse(self.strategy))
        if self.k_rank < 2:
            raise ValueError("k_rank must be >= 2")
        if self.k_pos < 1 or self.k_neg < 1:
            raise ValueError("k_pos and k_neg must be >= 1")
        if self.enumeration_cap < 1:
            raise ValueError("enumeration_cap must be >= 1")
        if self.quality_metric not in (None, "rel_agg", "faith_agg"):
            raise ValueError("quality_metric must be rel_agg or faith_agg")


# ---------------------------------------------------------------------------
# subset enumeration


class SubsetStream:
    """Index subsets in lexicographic order, or a seeded sample past the cap."""

    def __init__(self, n: int, k: int, cap: int = 200_000, rng_seed: int = 0, incumbent: Sequence[int] | None = None):
        if not 0 < k <= n:
            raise ValueError(f"need 0 < k <= n, got k={k}, n={n}")
        self.n, self.k, self.cap = n, k, cap
        self.total = math.comb(n, k)
        self.approximate = self.total > cap
        self._seed = rng_seed
        self._incumbent = tuple(sorted(incumbent)) if incumbent is not None else None

    def __len__(self) -> int:
        if not self.approximate:
            return self.total
        return self.cap + (self._incumbent is not None)

    def __iter__(self) -> Iterator[tuple[int, ...]]:
        if not self.approximate:
            yield from itertools.combinations(range(self.n), self.k)
            return
        rng = np.random.default_rng(self._seed)
        seen = set()
        while len(seen) < self.cap:
            s = tuple(sorted(int(x) for x in rng.choice(self.n, size=self.k, replace=False)))
            if s not in seen:
                seen.add(s)
        out = sorted(seen)
        if self._incumbent is not None and self._incumbent not in seen:
            out.append(self._incumbent)
            out.sort()
        yield from out


def enumerate_k_subsets(n: int, k: int, cap: int = 200_000, rng_seed: int = 0, incumbent=None) -> SubsetStream:
    return SubsetStream(n, k, cap, rng_seed, incumbent)


def greedy_incumbent(n: int, k: int, objective: Callable[[tuple[int, ...]], float]) -> tuple[int, ...]:
    best_pair = max(itertools.combinations(range(n), 2), key=objective)
    chosen = list(best_pair)
    while len(chosen) < k:
        rest = [i for i in range(n) if i not in chosen]
        nxt = max(rest, key=lambda i: objective(tuple(sorted(chosen + [i]))))
        chosen.append(nxt)
    return tuple(sorted(chosen))


def best_subset(
    n: int,
    k: int,
    objective: Callable[[tuple[int, ...]], float | Fraction],
    maximize: bool = True,
    cap: int = 200_000,
    rng_seed: int = 0,
) -> tuple[tuple[int, ...], bool]:
    """Extremize ``objective`` over k-subsets; ties go to the lexicographically first."""
    sign = 1 if maximize else -1
    incumbent = None
    if math.comb(n, k) > cap and k >= 2:
        incumbent = greedy_incumbent(n, k, lambda s: sign * objective(s))
    stream = enumerate_k_subsets(n, k, cap, rng_seed, incumbent)
    best, best_val = None, -math.inf
    for s in stream:
        v = sign * objective(s)
        if v > best_val:
            best, best_val = s, v
    return best, stream.approximate


# ---------------------------------------------------------------------------
# objectives (index-based, shared with the analysis module's statistics)


def margin_objective(values: Sequence[float]) -> Callable[[tuple[int, ...]], Fraction]:
    """Margin gap of the subset, in exact arithmetic so near-ties never flip."""
    exact = [Fraction(v) for v in values]

    def f(subset):
        vals = [exact[i] for i in subset]
        return (max(vals) - min(vals)) / (len(vals) - 1)

    return f


def diversity_objective(bleu: np.ndarray) -> Callable[[tuple[int, ...]], float]:
    """Mean pairwise inverse self-BLEU using a precomputed ordered-pair matrix."""

    def f(subset):
        vals = [bleu[i, j] for i in subset for j in subset if i != j]
        return 1.0 - math.fsum(vals) / len(vals)

    return f


def correlation_objective(xs: Sequence[float], ys: Sequence[float]) -> Callable[[tuple[int, ...]], Fraction]:
    """Signed squared spearman (``rho * |rho|``), exact; same ordering as rho.

    Average ranks are half-integers, so the whole computation stays rational.
    A constant side scores 0, matching :func:`analysis.spearman`.
    """

    def f(subset):
        rx = [Fraction(r) for r in analysis.average_ranks([xs[i] for i in subset])]
        ry = [Fraction(r) for r in analysis.average_ranks([ys[i] for i in subset])]
        mx, my = sum(rx) / len(rx), sum(ry) / len(ry)
        sxy = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
        sxx = sum((a - mx) ** 2 for a in rx)
        syy = sum((b - my) ** 2 for b in ry)
        if sxx == 0 or syy == 0:
            return Fraction(0)
        return sxy * abs(sxy) / (sxx * syy)

    return f


# ---------------------------------------------------------------------------
# helpers

_REQUIRES = {
    ("likelihood", "top_beam"): "beam_rank",
    ("likelihood", "bottom_beam"): "beam_rank",
    ("likelihood", "extreme_beam"): "beam_rank",
    ("likelihood", "easy"): "loglik",
    ("likelihood", "hard"): "loglik",
    ("spurious", "max_extract_gap"): "extractive_density",
}


def _field(c: Candidate, name: str):
    if name == "beam_rank":
        return c.beam_rank
    if name == "loglik":
        return candidate_loglik(c)
    return c.scores.get(name)


def _require(cands: Sequence[Candidate], strategy: StrategyId, name: str) -> None:
    for c in cands:
        if _field(c, name) is None:
            raise SelectionError(f"{strategy}: strategy requires {name} (missing on {c.candidate_id})")


def _ranked(cands: Sequence[Candidate], key, descending: bool = True) -> list[Candidate]:
    """Sort by ``key``; ties always resolve by candidate_id ascending."""
    by_id = sorted(cands, key=lambda c: c.candidate_id)
    return sorted(by_id, key=lambda c: -key(c) if descending else key(c))


def _closest_to_mean(cands: Sequence[Candidate], key, k: int) -> list[Candidate]:
    mean = math.fsum(key(c) for c in cands) / len(cands)
    return sorted(cands, key=lambda c: (abs(key(c) - mean), c.candidate_id))[:k]


def _pairwise_bleu(cands: Sequence[Candidate]) -> np.ndarray:
    prepared = [analysis.prepare_bleu(c.text) for c in cands]
    n = len(cands)
    m = np.ones((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                m[i, j] = analysis.bleu_prepared(prepared[i], prepared[j])
    return m


# ---------------------------------------------------------------------------
# dispatch


def select(pool: CandidatePool, config: SelectionConfig) -> SelectedSet:
    """Apply ``config.strategy`` to one pool."""
    strategy = config.strategy
    req = _REQUIRES.get((strategy.family, strategy.mode))
    cands = sorted(pool.candidates, key=lambda c: c.candidate_id)
    if req is not None:
        _require(cands, strategy, req)
    if strategy not in CATALOG[pool.pool_kind]:
        raise SelectionError(f"strategy {strategy} is not defined for {pool.pool_kind} pools")
    if pool.pool_kind == "relevance":
        return _select_relevance(pool, cands, config)
    return _select_faithfulness(pool, cands, config)


def _select_relevance(pool: CandidatePool, cands: list[Candidate], config: SelectionConfig) -> SelectedSet:
    s = config.strategy
    k = config.k_rank
    metric = config.quality_metric or "rel_agg"
    if len(cands) < k:
        raise SelectionError(f"pool {pool.example_id} has {len(cands)} candidates, need {k}")
    # rank sets are emitted in quality order, so every strategy needs the metric
    _require(cands, s, metric)
    q = lambda c: c.scores.get(metric)
    approximate = False

    if s.family == "random":
        rng = np.random.default_rng(derive_seed(config.rng_seed, pool.example_id))
        chosen = [cands[int(i)] for i in rng.choice(len(cands), size=k, replace=False)]
    elif s.family == "quality":
        ranked = _ranked(cands, q)
        if s.mode == "high":
            chosen = ranked[:k]
        elif s.mode == "min":
            chosen = ranked[-k:]
        elif s.mode == "extreme":
            top = math.ceil(k / 2)
            chosen = ranked[:top] + ranked[len(ranked) - (k - top) :]
        else:
            chosen = _closest_to_mean(cands, q, k)
    elif s.family == "margin":
        vals = [q(c) for c in cands]
        idx, approximate = best_subset(
            len(cands), k, margin_objective(vals), s.mode == "max", config.enumeration_cap, config.rng_seed
        )
        chosen = [cands[i] for i in idx]
    elif s.family == "diversity":
        bleu = _pairwise_bleu(cands)
        idx, approximate = best_subset(
            len(cands), k, diversity_objective(bleu), s.mode == "max", config.enumeration_cap, config.rng_seed
        )
        chosen = [cands[i] for i in idx]
    elif s.family == "hybrid_corr":
        _require(cands, s, "faith_agg")
        xs = [c.scores.rel_agg for c in cands]
        ys = [c.scores.faith_agg for c in cands]
        idx, approximate = best_subset(
            len(cands), k, correlation_objective(xs, ys), True, config.enumeration_cap, config.rng_seed
        )
        chosen = [cands[i] for i in idx]
    elif s.family == "likelihood":
        beams = [c for c in cands if c.method_params.get("generator") == config.beam_generator]
        if not beams:
            beams = cands
        if len(beams) < k:
            raise SelectionError(f"pool {pool.example_id} has {len(beams)} beams, need {k}")
        ordered = sorted(beams, key=lambda c: (c.beam_rank, c.candidate_id))
        if s.mode == "top_beam":
            chosen = ordered[:k]
        elif s.mode == "bottom_beam":
            chosen = ordered[-k:]
        else:
            top = math.ceil(k / 2)
            chosen = ordered[:top] + ordered[len(ordered) - (k - top) :]
    elif s.family == "spurious":
        ranked = _ranked(cands, lambda c: c.scores.n_tokens)
        chosen = ranked[:k] if s.mode == "max_length" else ranked[-k:]
    else:  # pragma: no cover - catalog guards this
        raise SelectionError(f"unhandled strategy {s}")

    ordered = _ranked(chosen, q)
    return SelectedSet(
        example_id=pool.example_id,
        strategy=s,
        kind="relevance",
        rank_order=tuple(c.candidate_id for c in ordered),
        approximate=approximate,
    )


def _select_faithfulness(pool: CandidatePool, cands: list[Candidate], config: SelectionConfig) -> SelectedSet:
    s = config.strategy
    kp, kn = config.k_pos, config.k_neg
    metric = config.quality_metric or "faith_agg"
    pos = [c for c in cands if c.polarity_hint == "positive"]
    neg = [c for c in cands if c.polarity_hint == "negative"]
    if len(pos) < kp or len(neg) < kn:
        raise SelectionError(
            f"pool {pool.example_id} has {len(pos)} positives / {len(neg)} negatives, need {kp} / {kn}"
        )
    q = lambda c: c.scores.get(metric)
    if s.family in ("quality", "margin"):
        _require(cands, s, metric)
    approximate = False

    if s.family == "random":
        rng = np.random.default_rng(derive_seed(config.rng_seed, pool.example_id))
        P = [pos[int(i)] for i in rng.choice(len(pos), size=kp, replace=False)]
        N = [neg[int(i)] for i in rng.choice(len(neg), size=kn, replace=False)]
    elif s.family == "quality":
        P = _closest_to_mean(pos, q, kp)
        N = _closest_to_mean(neg, q, kn)
    elif s.family == "margin":
        if s.mode == "max":
            P = _ranked(pos, q)[:kp]
            N = _ranked(neg, q, descending=False)[:kn]
        else:
            P = _ranked(pos, q, descending=False)[:kp]
            N = _ranked(neg, q)[:kn]
    elif s.family == "diversity":
        groups = []
        for group, k in ((pos, kp), (neg, kn)):
            if k == 1:
                # a single member has no pairwise diversity; take the first by id
                groups.append([group[0]])
                continue
            bleu = _pairwise_bleu(group)
            idx, approx = best_subset(
                len(group), k, diversity_objective(bleu), s.mode == "max", config.enumeration_cap, config.rng_seed
            )
            approximate = approximate or approx
            groups.append([group[i] for i in idx])
        P, N = groups
    elif s.family == "likelihood":
        ll = candidate_loglik
        if s.mode == "easy":
            P = _ranked(pos, ll)[:kp]
            N = _ranked(neg, ll, descending=False)[:kn]
        else:
            P = _ranked(pos, ll, descending=False)[:kp]
            N = _ranked(neg, ll)[:kn]
    elif s.family == "spurious":
        dens = lambda c: c.scores.extractive_density
        P = _ranked(pos, dens)[:kp]
        N = _ranked(neg, dens, descending=False)[:kn]
    else:  # pragma: no cover
        raise SelectionError(f"unhandled strategy {s}")

    if all(q(c) is not None for c in P + N):
        P, N = _ranked(P, q), _ranked(N, q)
    return SelectedSet(
        example_id=pool.example_id,
        strategy=s,
        kind="faithfulness",
        positives=tuple(c.candidate_id for c in P),
        negatives=tuple(c.candidate_id for c in N),
        approximate=approximate,
    )


def select_many(pools: Sequence[CandidatePool], config: SelectionConfig) -> list[SelectedSet]:
    return [select(p, config) for p in pools]
