"""Domain types and line-delimited record I/O shared by every stage.

All types are frozen dataclasses; use :func:`dataclasses.replace` to derive
updated copies (e.g. after scoring or normalization).
"""
from __future__ import annotations

import dataclasses
import json
import logging
import os
import tempfile
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence

logger = logging.getLogger(__name__)

METHODS = (
    "mask_and_fill",
    "swap_intrinsic",
    "swap_extrinsic",
    "paraphrase",
    "reference",
    "diverse_beam",
)
POLARITY_BY_METHOD = {
    "mask_and_fill": "negative",
    "swap_intrinsic": "negative",
    "swap_extrinsic": "negative",
    "paraphrase": "positive",
    "reference": "positive",
    "diverse_beam": "unassigned",
}
POOL_KINDS = ("faithfulness", "relevance")
ALLOWED_METHODS = {
    "faithfulness": frozenset(
        {"mask_and_fill", "swap_intrinsic", "swap_extrinsic", "paraphrase", "reference"}
    ),
    "relevance": frozenset({"diverse_beam"}),
}


class CalsetError(Exception):
    """Base class for every error raised by this package."""


class RecordError(CalsetError, ValueError):
    """A record violates its schema or a domain invariant."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


# ---------------------------------------------------------------------------
# text helpers


def nfc(text: str) -> str:
    return unicodedata.normalize("NFC", text)


def whitespace_tokens(text: str) -> list[str]:
    """Tokens used for every length count: NFC, lowercase, split on whitespace.

    Stored texts are never rewritten; this only feeds derived counts.
    """
    return nfc(text).lower().split()


def count_tokens(text: str) -> int:
    return len(whitespace_tokens(text))


def _squash(text: str) -> str:
    return " ".join(nfc(text).split())


# ---------------------------------------------------------------------------
# annotations and examples


@dataclass(frozen=True)
class Span:
    start: int
    end: int
    surface: str
    type: str = ""
    target: str = "reference"

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise RecordError(f"invalid span offsets [{self.start}, {self.end})")
        if self.target not in ("reference", "source"):
            raise RecordError(f"span target must be 'reference' or 'source', got {self.target!r}")

    def overlaps(self, other: "Span") -> bool:
        return self.start < other.end and other.start < self.end

    def to_json(self) -> dict:
        return {
            "start": self.start,
            "end": self.end,
            "surface": self.surface,
            "type": self.type,
            "target": self.target,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "Span":
        return cls(
            start=int(obj["start"]),
            end=int(obj["end"]),
            surface=str(obj["surface"]),
            type=str(obj.get("type", "")),
            target=str(obj.get("target", "reference")),
        )


@dataclass(frozen=True)
class AnnotationSet:
    entities: tuple[Span, ...] = ()
    numbers: tuple[Span, ...] = ()
    noun_phrases: tuple[Span, ...] = ()

    def select(self, kind: str, target: str) -> list[Span]:
        return [s for s in getattr(self, kind) if s.target == target]

    def to_json(self) -> dict:
        return {
            "entities": [s.to_json() for s in self.entities],
            "numbers": [s.to_json() for s in self.numbers],
            "noun_phrases": [s.to_json() for s in self.noun_phrases],
        }

    @classmethod
    def from_json(cls, obj: Mapping | None) -> "AnnotationSet":
        obj = obj or {}
        return cls(
            entities=tuple(Span.from_json(s) for s in obj.get("entities", [])),
            numbers=tuple(Span.from_json(s) for s in obj.get("numbers", [])),
            noun_phrases=tuple(Span.from_json(s) for s in obj.get("noun_phrases", [])),
        )


@dataclass(frozen=True)
class Example:
    """One training instance: source document, its sentences, the reference."""

    example_id: str
    source_text: str = ""
    source_sentences: tuple[str, ...] = ()
    reference_text: str = ""
    annotations: AnnotationSet = field(default_factory=AnnotationSet)

    def __post_init__(self):
        if not self.example_id:
            raise RecordError("example_id must be non-empty")
        object.__setattr__(self, "source_sentences", tuple(self.source_sentences))
        if self.source_sentences and _squash(" ".join(self.source_sentences)) != _squash(
            self.source_text
        ):
            raise RecordError(
                f"example {self.example_id}: source_sentences do not reassemble source_text"
            )
        texts = {"reference": self.reference_text, "source": self.source_text}
        for kind in ("entities", "numbers", "noun_phrases"):
            for span in getattr(self.annotations, kind):
                text = texts[span.target]
                if span.end > len(text):
                    raise RecordError(
                        f"example {self.example_id}: {kind} span [{span.start}, {span.end}) "
                        f"exceeds {span.target} length {len(text)}"
                    )

    def to_json(self) -> dict:
        return {
            "example_id": self.example_id,
            "source_text": self.source_text,
            "source_sentences": list(self.source_sentences),
            "reference_text": self.reference_text,
            "annotations": self.annotations.to_json(),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "Example":
        return cls(
            example_id=str(obj["example_id"]),
            source_text=str(obj.get("source_text", "")),
            source_sentences=tuple(obj.get("source_sentences", [])),
            reference_text=str(obj.get("reference_text", "")),
            annotations=AnnotationSet.from_json(obj.get("annotations")),
        )


# ---------------------------------------------------------------------------
# scores and candidates

_UNIT_INTERVAL = ("rouge1_f1", "rouge2_f1", "rougeL_f1", "factscore", "extractive_coverage")


@dataclass(frozen=True)
class ScoreVector:
    rouge1_f1: float | None = None
    rouge2_f1: float | None = None
    rougeL_f1: float | None = None
    bertscore_ref: float | None = None
    bertscore_src: float | None = None
    bartscore: float | None = None
    factscore: float | None = None
    rel_agg: float | None = None
    faith_agg: float | None = None
    extractive_density: float | None = None
    extractive_coverage: float | None = None
    model_loglik: float | None = None
    n_tokens: int = 0

    def __post_init__(self):
        for name in _UNIT_INTERVAL:
            v = getattr(self, name)
            if v is not None and not (0.0 <= v <= 1.0):
                raise RecordError(f"score {name}={v} outside [0, 1]")
        for name in ("bartscore", "model_loglik"):
            v = getattr(self, name)
            if v is not None and v > 0:
                raise RecordError(f"score {name}={v} must be <= 0")
        if self.extractive_density is not None and self.extractive_density < 0:
            raise RecordError("extractive_density must be >= 0")
        if self.n_tokens < 0:
            raise RecordError("n_tokens must be >= 0")

    def get(self, name: str) -> float | None:
        return getattr(self, name)

    def to_json(self) -> dict:
        return {k: v for k, v in dataclasses.asdict(self).items() if v is not None}

    @classmethod
    def from_json(cls, obj: Mapping | None, n_tokens: int = 0) -> "ScoreVector":
        obj = dict(obj or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise RecordError(f"unknown score fields: {sorted(unknown)}")
        obj.setdefault("n_tokens", n_tokens)
        return cls(**obj)


@dataclass(frozen=True)
class Candidate:
    candidate_id: str
    example_id: str
    method: str
    text: str
    method_params: Mapping[str, Any] = field(default_factory=dict)
    polarity_hint: str | None = None
    beam_rank: int | None = None
    token_logprobs: tuple[float, ...] | None = None
    scores: ScoreVector | None = None

    def __post_init__(self):
        if not self.candidate_id:
            raise RecordError("candidate_id must be non-empty")
        if self.method not in POLARITY_BY_METHOD:
            raise RecordError(f"unknown method {self.method!r}")
        expected = POLARITY_BY_METHOD[self.method]
        if self.polarity_hint is None:
            object.__setattr__(self, "polarity_hint", expected)
        elif self.polarity_hint != expected:
            raise RecordError(
                f"candidate {self.candidate_id}: polarity_hint {self.polarity_hint!r} "
                f"does not match method {self.method} ({expected})"
            )
        if (self.beam_rank is not None) != (self.method == "diverse_beam"):
            raise RecordError(
                f"candidate {self.candidate_id}: beam_rank must be set iff method is diverse_beam"
            )
        if self.beam_rank is not None and self.beam_rank < 0:
            raise RecordError(f"candidate {self.candidate_id}: beam_rank must be >= 0")
        if self.token_logprobs is not None:
            lp = tuple(float(x) for x in self.token_logprobs)
            if any(x > 0 for x in lp):
                raise RecordError(f"candidate {self.candidate_id}: token_logprobs must be <= 0")
            object.__setattr__(self, "token_logprobs", lp)
        object.__setattr__(self, "method_params", dict(self.method_params))
        if self.scores is None:
            object.__setattr__(self, "scores", ScoreVector(n_tokens=count_tokens(self.text)))

    def to_json(self) -> dict:
        return {
            "example_id": self.example_id,
            "candidate_id": self.candidate_id,
            "method": self.method,
            "method_params": dict(self.method_params),
            "polarity_hint": self.polarity_hint,
            "beam_rank": self.beam_rank,
            "text": self.text,
            "token_logprobs": None if self.token_logprobs is None else list(self.token_logprobs),
            "scores": self.scores.to_json(),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "Candidate":
        text = str(obj["text"])
        lp = obj.get("token_logprobs")
        return cls(
            candidate_id=str(obj["candidate_id"]),
            example_id=str(obj["example_id"]),
            method=str(obj["method"]),
            text=text,
            method_params=obj.get("method_params") or {},
            polarity_hint=obj.get("polarity_hint"),
            beam_rank=obj.get("beam_rank"),
            token_logprobs=None if lp is None else tuple(lp),
            scores=ScoreVector.from_json(obj.get("scores"), n_tokens=count_tokens(text)),
        )


@dataclass(frozen=True)
class CandidatePool:
    example: Example
    candidates: tuple[Candidate, ...]
    pool_kind: str

    def __post_init__(self):
        if self.pool_kind not in POOL_KINDS:
            raise RecordError(f"unknown pool_kind {self.pool_kind!r}")
        object.__setattr__(self, "candidates", tuple(self.candidates))
        ids = [c.candidate_id for c in self.candidates]
        if len(set(ids)) != len(ids):
            raise RecordError(f"pool {self.example_id}: duplicate candidate_id")
        allowed = ALLOWED_METHODS[self.pool_kind]
        for c in self.candidates:
            if c.method not in allowed:
                raise RecordError(
                    f"candidate {c.candidate_id}: method not allowed in pool_kind "
                    f"{self.pool_kind} ({c.method})"
                )
            if c.example_id != self.example.example_id:
                raise RecordError(f"candidate {c.candidate_id} belongs to {c.example_id}")

    @property
    def example_id(self) -> str:
        return self.example.example_id

    def by_id(self) -> dict[str, Candidate]:
        return {c.candidate_id: c for c in self.candidates}

    def __len__(self) -> int:
        return len(self.candidates)


# ---------------------------------------------------------------------------
# selection outputs


@dataclass(frozen=True, order=True)
class StrategyId:
    family: str
    mode: str

    def __str__(self) -> str:
        return f"{self.family}:{self.mode}"

    @classmethod
    def parse(cls, text: str) -> "StrategyId":
        family, _, mode = text.partition(":")
        if family == "random" and not mode:
            mode = "sample"
        if not family or not mode:
            raise ValueError(f"strategy must look like family:mode, got {text!r}")
        return cls(family, mode)


@dataclass(frozen=True)
class SelectedSet:
    """Output of a selection strategy.

    Relevance sets fill ``rank_order`` (best first); faithfulness sets fill
    ``positives`` and ``negatives``.
    """

    example_id: str
    strategy: StrategyId
    kind: str
    rank_order: tuple[str, ...] = ()
    positives: tuple[str, ...] = ()
    negatives: tuple[str, ...] = ()
    approximate: bool = False

    def __post_init__(self):
        for name in ("rank_order", "positives", "negatives"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    @property
    def mode(self) -> str:
        return self.strategy.mode

    @property
    def candidate_ids(self) -> tuple[str, ...]:
        if self.kind == "relevance":
            return self.rank_order
        return self.positives + self.negatives

    def validate(self) -> None:
        if self.kind not in POOL_KINDS:
            raise RecordError(f"unknown set kind {self.kind!r}")
        if self.kind == "relevance":
            if self.positives or self.negatives:
                raise RecordError("relevance sets carry rank_order only")
            if len(set(self.rank_order)) != len(self.rank_order) or len(self.rank_order) < 2:
                raise RecordError(f"set {self.example_id}: rank_order needs >= 2 distinct ids")
        else:
            if self.rank_order:
                raise RecordError("faithfulness sets carry positives/negatives only")
            if not self.positives or not self.negatives:
                raise RecordError(f"set {self.example_id}: positives and negatives must be non-empty")
            if set(self.positives) & set(self.negatives):
                raise RecordError(f"set {self.example_id}: positives and negatives overlap")
            for group in (self.positives, self.negatives):
                if len(set(group)) != len(group):
                    raise RecordError(f"set {self.example_id}: repeated candidate id")

    def to_json(self) -> dict:
        obj = {
            "example_id": self.example_id,
            "strategy": str(self.strategy),
            "kind": self.kind,
        }
        if self.kind == "relevance":
            obj["rank_order"] = list(self.rank_order)
        else:
            obj["positives"] = list(self.positives)
            obj["negatives"] = list(self.negatives)
        obj["approximate"] = self.approximate
        return obj

    @classmethod
    def from_json(cls, obj: Mapping) -> "SelectedSet":
        return cls(
            example_id=str(obj["example_id"]),
            strategy=StrategyId.parse(obj["strategy"]),
            kind=str(obj["kind"]),
            rank_order=tuple(obj.get("rank_order", ())),
            positives=tuple(obj.get("positives", ())),
            negatives=tuple(obj.get("negatives", ())),
            approximate=bool(obj.get("approximate", False)),
        )


# ---------------------------------------------------------------------------
# JSONL I/O


def dumps(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(", ", ": "))


def iter_jsonl(path: str | os.PathLike) -> Iterator[tuple[int, dict]]:
    """Yield ``(line_number, object)`` for every non-blank line."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordError(f"malformed JSON ({exc.msg})", line=lineno, path=str(path)) from None
            if not isinstance(obj, dict):
                raise RecordError("record must be a JSON object", line=lineno, path=str(path))
            yield lineno, obj


def atomic_write_lines(path: str | os.PathLike, lines: Iterable[str]) -> int:
    """Write lines to ``path`` via a temp file + rename. Returns the line count."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            for line in lines:
                fh.write(line)
                fh.write("\n")
                n += 1
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return n


def load_examples(path: str | os.PathLike) -> dict[str, Example]:
    examples: dict[str, Example] = {}
    for lineno, obj in iter_jsonl(path):
        try:
            ex = Example.from_json(obj)
        except (KeyError, TypeError, RecordError) as exc:
            raise RecordError(f"bad example record: {exc}", line=lineno, path=str(path)) from None
        if ex.example_id in examples:
            raise RecordError(f"duplicate example_id {ex.example_id}", line=lineno, path=str(path))
        examples[ex.example_id] = ex
    return examples


def write_examples(examples: Iterable[Example], path: str | os.PathLike) -> int:
    return atomic_write_lines(path, (dumps(ex.to_json()) for ex in examples))


def load_pool(
    path: str | os.PathLike,
    pool_kind: str,
    examples: Mapping[str, Example] | None = None,
) -> tuple[list[CandidatePool], int]:
    """Read a pool file into one :class:`CandidatePool` per example.

    Lines holding a ``candidate_id`` are candidate records; any other line is
    an example record. Examples missing from both the file and ``examples``
    get a bare placeholder carrying only the id.

    Returns ``(pools, n_dropped)`` where ``n_dropped`` counts candidates
    dropped because their NFC-normalized text duplicated an earlier one.
    """
    if pool_kind not in POOL_KINDS:
        raise ValueError(f"unknown pool_kind {pool_kind!r}")
    found_examples: dict[str, Example] = dict(examples or {})
    grouped: dict[str, list[Candidate]] = {}
    seen_ids: set[str] = set()
    for lineno, obj in iter_jsonl(path):
        try:
            if "candidate_id" in obj:
                cand = Candidate.from_json(obj)
                if cand.candidate_id in seen_ids:
                    raise RecordError(f"duplicate candidate_id {cand.candidate_id}")
                if cand.method not in ALLOWED_METHODS[pool_kind]:
                    raise RecordError(
                        f"method not allowed in pool_kind {pool_kind} ({cand.method})"
                    )
                seen_ids.add(cand.candidate_id)
                grouped.setdefault(cand.example_id, []).append(cand)
            else:
                ex = Example.from_json(obj)
                found_examples[ex.example_id] = ex
        except RecordError as exc:
            raise RecordError(str(exc), line=lineno, path=str(path)) from None
        except (KeyError, TypeError, ValueError) as exc:
            raise RecordError(f"bad record: {exc!r}", line=lineno, path=str(path)) from None

    pools = []
    n_dropped = 0
    for example_id in sorted(grouped):
        cands = sorted(grouped[example_id], key=lambda c: c.candidate_id)
        kept, seen_text = [], set()
        for c in cands:
            key = nfc(c.text)
            if key in seen_text:
                n_dropped += 1
                logger.warning("dropping duplicate text %s in %s", c.candidate_id, example_id)
                continue
            seen_text.add(key)
            kept.append(c)
        example = found_examples.get(example_id) or Example(example_id=example_id)
        pools.append(CandidatePool(example=example, candidates=tuple(kept), pool_kind=pool_kind))
    return pools, n_dropped


def write_pool(pools: Sequence[CandidatePool], path: str | os.PathLike) -> int:
    """Write pools (example record then its candidates). Returns the candidate count."""
    lines = []
    n = 0
    for pool in sorted(pools, key=lambda p: p.example_id):
        lines.append(dumps(pool.example.to_json()))
        for c in sorted(pool.candidates, key=lambda c: c.candidate_id):
            lines.append(dumps(c.to_json()))
            n += 1
    atomic_write_lines(path, lines)
    return n


def write_selected(sets: Sequence[SelectedSet], path: str | os.PathLike) -> int:
    for s in sets:
        s.validate()
    return atomic_write_lines(path, (dumps(s.to_json()) for s in sets))


def load_selected(path: str | os.PathLike) -> list[SelectedSet]:
    out = []
    for lineno, obj in iter_jsonl(path):
        try:
            out.append(SelectedSet.from_json(obj))
        except (KeyError, TypeError, ValueError) as exc:
            raise RecordError(f"bad selected-set record: {exc}", line=lineno, path=str(path)) from None
    return out


# ---------------------------------------------------------------------------
# normalization statistics


@dataclass(frozen=True)
class MetricStats:
    mean: float
    stddev: float

    def __post_init__(self):
        if not self.stddev > 0:
            raise RecordError(f"stddev must be > 0, got {self.stddev}")


@dataclass(frozen=True)
class NormalizationStats:
    metrics: Mapping[str, MetricStats]
    provenance: str = ""

    def __getitem__(self, name: str) -> MetricStats:
        try:
            return self.metrics[name]
        except KeyError:
            raise KeyError(f"no normalization stats for metric {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.metrics

    def to_json(self) -> dict:
        obj: dict[str, Any] = {
            k: {"mean": v.mean, "stddev": v.stddev} for k, v in sorted(self.metrics.items())
        }
        if self.provenance:
            obj["_provenance"] = self.provenance
        return obj

    @classmethod
    def from_json(cls, obj: Mapping) -> "NormalizationStats":
        metrics = {
            k: MetricStats(float(v["mean"]), float(v["stddev"]))
            for k, v in obj.items()
            if not k.startswith("_")
        }
        return cls(metrics=metrics, provenance=str(obj.get("_provenance", "")))


def load_stats(path: str | os.PathLike) -> NormalizationStats:
    with open(path, encoding="utf-8") as fh:
        return NormalizationStats.from_json(json.load(fh))


def write_stats(stats: NormalizationStats, path: str | os.PathLike) -> None:
    atomic_write_lines(path, [json.dumps(stats.to_json(), indent=2, sort_keys=True)])

