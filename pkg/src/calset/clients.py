"""Clients for the external neural services: infilling, paraphrase, scoring.

Every backend speaks one protocol: a single POST per batch with body
``{"kind": ..., "items": [...]}`` answered by ``{"outputs": [...]}``.
Generation goes to ``{base_url}/v1/generate``, scoring to ``/v1/score``.

Setting ``CALSET_OFFLINE=1`` (or passing ``offline=True``) routes every call
to deterministic in-process stubs, so the whole pipeline runs without network.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
import os
import re
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

from .core import CalsetError, whitespace_tokens

logger = logging.getLogger(__name__)

SENTINEL_RE = re.compile(r"<extra_id_(\d+)>")
SCORE_KINDS = ("embed_sim_ref", "embed_sim_src", "entailment_supported", "seq_loglik")
PARAPHRASE_INSTRUCTION = "Paraphrase this abstract."


class ServiceError(CalsetError):
    """Transport failure or a response that breaks the client contract."""


class ProtocolError(ServiceError):
    pass


class UnderfillError(ServiceError):
    def __init__(self, message: str, span_index: int):
        self.span_index = span_index
        super().__init__(message)


@dataclass(frozen=True)
class ServiceEndpoint:
    base_url: str = "offline"
    timeout: float = 30.0
    max_retries: int = 2
    token: str | None = None
    backoff: float = 0.5
    max_backoff: float = 4.0

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if not self.timeout > 0:
            raise ValueError("timeout must be > 0")
        if self.backoff < 0 or self.max_backoff < 0:
            raise ValueError("backoff must be >= 0")

    @property
    def is_offline(self) -> bool:
        return self.base_url == "offline" or os.environ.get("CALSET_OFFLINE") == "1"


Transport = Callable[[str, dict], dict]


def _unit_hash(*parts: str) -> float:
    h = hashlib.sha256("\x1f".join(parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "big") / 2.0**64


def _hash_word(*parts: str) -> str:
    h = hashlib.sha256("\x1f".join(parts).encode("utf-8")).hexdigest()
    consonants = "bcdfghjklmnprstvz"
    vowels = "aeiou"
    out = []
    for i in range(3):
        out.append(consonants[int(h[4 * i : 4 * i + 2], 16) % len(consonants)])
        out.append(vowels[int(h[4 * i + 2 : 4 * i + 4], 16) % len(vowels)])
    return "".join(out)


# Fixed synonym table used by the offline paraphrase stub.
SYNONYMS: dict[str, tuple[str, ...]] = {
    "patient": ("subject",),
    "patients": ("subjects",),
    "treated": ("managed",),
    "treatment": ("therapy",),
    "showed": ("demonstrated", "revealed"),
    "increased": ("elevated", "raised"),
    "decreased": ("reduced", "lowered"),
    "significant": ("marked",),
    "significantly": ("markedly",),
    "study": ("investigation",),
    "results": ("findings",),
    "reaction": ("transformation",),
    "yield": ("output",),
    "compound": ("substance",),
    "synthesis": ("preparation",),
    "observed": ("noted", "seen"),
    "using": ("with",),
    "high": ("elevated",),
    "low": ("reduced",),
    "improved": ("enhanced", "bettered"),
    "admitted": ("hospitalized",),
    "discharged": ("released",),
    "developed": ("acquired",),
    "found": ("identified", "detected"),
    "method": ("approach",),
    "analysis": ("examination",),
    "rapid": ("fast", "quick"),
    "large": ("big", "sizable"),
    "small": ("minor", "modest"),
    "new": ("novel",),
    "report": ("describe",),
    "we": ("the authors",),
}


def _paraphrase_variants(text: str):
    """Deterministic stream of distinct synonym-table rewrites of ``text``."""
    words = text.split(" ")
    slots = []
    for i, w in enumerate(words):
        core = w.rstrip(".,;:")
        alts = SYNONYMS.get(core.lower())
        if alts:
            tail = w[len(core) :]
            slots.append((i, [w] + [a + tail for a in alts]))
    choices = [alts for _, alts in slots]
    for combo in itertools.product(*choices):
        if all(c == alts[0] for c, alts in zip(combo, choices)):
            continue
        out = list(words)
        for (i, _), c in zip(slots, combo):
            out[i] = c
        yield " ".join(out)


def _prompt_target(prompt: str) -> str:
    marker = "Abstract: "
    start = prompt.rfind(marker)
    body = prompt[start + len(marker) :] if start >= 0 else prompt
    end = body.rfind("\nParaphrase:")
    return body[:end] if end >= 0 else body


def stub_transport(url: str, body: dict) -> dict:
    """Offline stand-in for every backend. Pure function of the request."""
    kind = body["kind"]
    items = body["items"]
    if url.endswith("/v1/generate") and kind == "infill":
        outputs = []
        for item in items:
            masked = item["masked_text"]
            seed = str(item.get("seed", 0))
            fills = []
            for i, n in enumerate(item["min_tokens"]):
                words = [_hash_word(masked, seed, str(i), str(j)) for j in range(max(1, n))]
                fills.append(" ".join(words))
            outputs.append(fills)
        return {"outputs": outputs}
    if url.endswith("/v1/generate") and kind == "paraphrase":
        outputs = []
        for item in items:
            target = _prompt_target(item["prompt"])
            skip = int(item.get("offset", 0))
            stream = itertools.islice(_paraphrase_variants(target), skip, skip + int(item["n"]))
            outputs.append(list(stream))
        return {"outputs": outputs}
    if url.endswith("/v1/score") and kind in SCORE_KINDS:
        outputs = []
        for item in items:
            u = _unit_hash(kind, item["a"], item["b"])
            if kind == "seq_loglik":
                outputs.append(-(0.25 + 4.0 * u))
            else:
                outputs.append(u)
        return {"outputs": outputs}
    raise ProtocolError(f"stub has no handler for {url} kind={kind}")


def http_transport(endpoint: ServiceEndpoint) -> Transport:
    def post(url: str, body: dict) -> dict:
        data = json.dumps(body).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if endpoint.token:
            headers["Authorization"] = f"Bearer {endpoint.token}"
        req = urllib.request.Request(url, data=data, headers=headers, method="POST")
        with urllib.request.urlopen(req, timeout=endpoint.timeout) as resp:
            return json.loads(resp.read().decode("utf-8"))

    return post


class ServiceClient:
    """Thin wrapper enforcing the per-call contracts on top of a transport."""

    def __init__(
        self,
        endpoint: ServiceEndpoint | None = None,
        transport: Transport | None = None,
        offline: bool | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.endpoint = endpoint or ServiceEndpoint()
        if transport is None:
            use_stub = self.endpoint.is_offline if offline is None else offline
            transport = stub_transport if use_stub else http_transport(self.endpoint)
        self.transport = transport
        self._sleep = sleep
        self.calls = 0

    @property
    def base_url(self) -> str:
        return self.endpoint.base_url.rstrip("/")

    def _post(self, route: str, body: dict) -> list:
        url = f"{self.base_url}{route}"
        last: Exception | None = None
        for attempt in range(self.endpoint.max_retries + 1):
            if attempt:
                delay = min(self.endpoint.backoff * 2 ** (attempt - 1), self.endpoint.max_backoff)
                self._sleep(delay)
            try:
                self.calls += 1
                resp = self.transport(url, body)
            except (urllib.error.URLError, OSError, TimeoutError) as exc:
                last = exc
                logger.warning("POST %s failed (attempt %d): %s", url, attempt + 1, exc)
                continue
            if not isinstance(resp, Mapping) or not isinstance(resp.get("outputs"), list):
                raise ProtocolError(f"{url}: response lacks an 'outputs' list")
            return resp["outputs"]
        raise ServiceError(f"{url}: transport failed after {self.endpoint.max_retries + 1} attempts: {last}")

    # -- infill ------------------------------------------------------------

    def infill(self, masked_text: str, min_tokens: Sequence[int], seed: int = 0) -> list[str]:
        """Fill every ``<extra_id_i>`` sentinel in ``masked_text``.

        Each fill must contain at least ``min_tokens[i]`` whitespace tokens;
        under-filled requests are re-sent up to ``max_retries`` times.
        """
        n_sentinels = len(SENTINEL_RE.findall(masked_text))
        if n_sentinels != len(min_tokens):
            raise ProtocolError(
                f"sentinel mismatch: {n_sentinels} sentinels, {len(min_tokens)} lengths"
            )
        if n_sentinels == 0:
            return []
        for attempt in range(self.endpoint.max_retries + 1):
            body = {
                "kind": "infill",
                "items": [
                    {"masked_text": masked_text, "min_tokens": list(min_tokens), "seed": seed, "attempt": attempt}
                ],
            }
            outputs = self._post("/v1/generate", body)
            if len(outputs) != 1 or not isinstance(outputs[0], list):
                raise ProtocolError("infill response must hold one fill list per item")
            fills = [str(f) for f in outputs[0]]
            if len(fills) != n_sentinels:
                raise ProtocolError(f"expected {n_sentinels} fills, got {len(fills)}")
            short = [i for i, (f, n) in enumerate(zip(fills, min_tokens)) if len(whitespace_tokens(f)) < n]
            if not short:
                return fills
            logger.info("infill under-filled spans %s (attempt %d)", short, attempt + 1)
        raise UnderfillError(
            f"fill for span {short[0]} shorter than {min_tokens[short[0]]} tokens after retries",
            span_index=short[0],
        )

    # -- paraphrase --------------------------------------------------------

    def paraphrase(
        self,
        reference: str,
        demonstrations: Sequence[tuple[str, str]] = (),
        temperature: float = 0.7,
        n_outputs: int = 5,
        instruction: str = PARAPHRASE_INSTRUCTION,
    ) -> list[str]:
        if n_outputs < 1:
            raise ValueError("n_outputs must be >= 1")
        prompt = build_paraphrase_prompt(reference, demonstrations, instruction)
        distinct: list[str] = []
        offset = 0
        for attempt in range(self.endpoint.max_retries + 1):
            need = n_outputs - len(distinct)
            body = {
                "kind": "paraphrase",
                "items": [
                    {"prompt": prompt, "temperature": temperature, "n": need, "offset": offset, "attempt": attempt}
                ],
            }
            outputs = self._post("/v1/generate", body)
            if len(outputs) != 1 or not isinstance(outputs[0], list):
                raise ProtocolError("paraphrase response must hold one output list per item")
            offset += need
            for text in outputs[0]:
                text = str(text)
                if text not in distinct:
                    distinct.append(text)
            if len(distinct) >= n_outputs:
                return distinct[:n_outputs]
        raise ServiceError(
            f"could not collect {n_outputs} distinct paraphrases (got {len(distinct)})"
        )

    # -- scoring -----------------------------------------------------------

    def score_pairs(self, kind: str, pairs: Sequence[tuple[str, str]]) -> list[float]:
        if kind not in SCORE_KINDS:
            raise ValueError(f"unknown score kind {kind!r}")
        if not pairs:
            raise ValueError("score_pairs needs at least one pair")
        body = {"kind": kind, "items": [{"a": a, "b": b} for a, b in pairs]}
        outputs = self._post("/v1/score", body)
        if len(outputs) != len(pairs):
            raise ProtocolError(f"expected {len(pairs)} scores, got {len(outputs)}")
        values = [float(v) for v in outputs]
        for i, v in enumerate(values):
            if not math.isfinite(v):
                raise ProtocolError(f"score {i} is not finite")
            if kind == "entailment_supported" and not 0.0 <= v <= 1.0:
                raise ProtocolError(f"entailment score {v} at index {i} outside [0, 1]")
            if kind == "seq_loglik" and v > 0:
                raise ProtocolError(f"log-likelihood {v} at index {i} is positive")
        return values


def build_paraphrase_prompt(
    reference: str,
    demonstrations: Sequence[tuple[str, str]] = (),
    instruction: str = PARAPHRASE_INSTRUCTION,
) -> str:
    """Instruction line, then each demonstration pair, then the target."""
    parts = [instruction, ""]
    for original, para in demonstrations:
        parts += [f"Abstract: {original}", f"Paraphrase: {para}", ""]
    parts += [f"Abstract: {reference}", "Paraphrase:"]
    return "\n".join(parts)


@dataclass
class Clients:
    """The service handles one pipeline run needs."""

    infill: ServiceClient
    paraphrase: ServiceClient
    scorer: ServiceClient
    likelihood: ServiceClient

    @classmethod
    def offline(cls) -> "Clients":
        c = ServiceClient(offline=True)
        return cls(infill=c, paraphrase=c, scorer=c, likelihood=c)

    @classmethod
    def from_config(cls, endpoints: Mapping[str, Mapping] | None, offline: bool = False) -> "Clients":
        endpoints = endpoints or {}

        def make(name: str) -> ServiceClient:
            ep = ServiceEndpoint(**endpoints.get(name, {}))
            return ServiceClient(ep, offline=True if offline else None)

        return cls(
            infill=make("infill"),
            paraphrase=make("paraphrase"),
            scorer=make("scorer"),
            likelihood=make("likelihood"),
        )
