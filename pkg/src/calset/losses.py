"""Calibration objectives as pure numeric kernels over log-probs and latents.

Nothing here touches a model: token log-probabilities, sequence
log-likelihoods and latent vectors are supplied by the caller. Analytic
gradients are provided alongside each kernel so exported losses can be
checked with finite differences.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

CONSEQ_EPS = 1e-6


class ClampWarning(UserWarning):
    """The unlikelihood term hit its probability clamp."""


@dataclass(frozen=True)
class LossHyperParams:
    lambda_mle: float = 0.1
    lambda_ca: float = 1.0
    lambda_margin: float = 0.001
    length_penalty: float = 1.0
    scale: float = 0.01
    temperature: float = 1.0
    include_positive_in_denominator: bool = False

    def __post_init__(self):
        for name in ("lambda_mle", "lambda_ca", "lambda_margin"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("scale", "temperature"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")


# Per-dataset calibration settings used for the reported runs.
HPARAMS = {
    ("relevance", "clinical"): LossHyperParams(0.1, 1.0, 0.001, 1.0, 0.01),
    ("relevance", "chemical"): LossHyperParams(0.1, 1.0, 0.001, 2.0, 0.1),
    ("relevance", "biomedical"): LossHyperParams(0.1, 1.0, 0.001, 2.0, 0.1),
    ("faithfulness", "clinical"): LossHyperParams(1.0, 1.0),
    ("faithfulness", "chemical"): LossHyperParams(1.0, 10.0),
    ("faithfulness", "biomedical"): LossHyperParams(1.0, 1.0),
}


# ---------------------------------------------------------------------------
# MLE and combination


def mle_loss(token_logprobs: Sequence[float]) -> float:
    """Negative log-likelihood of the reference: ``-sum(log p)``."""
    return -math.fsum(token_logprobs)


def mle_loss_grad(token_logprobs: Sequence[float]) -> np.ndarray:
    return -np.ones(len(token_logprobs))


def combined_objective(mle: float, ca: float, lambda_mle: float, lambda_ca: float) -> float:
    return lambda_mle * mle + lambda_ca * ca


# ---------------------------------------------------------------------------
# pairwise margin rank


def length_normalized_score(token_logprobs: Sequence[float], scale: float = 1.0, alpha: float = 1.0) -> float:
    """``scale * sum(log p) / L**alpha``."""
    L = len(token_logprobs)
    if L == 0:
        raise ValueError("token_logprobs must be non-empty")
    return scale * math.fsum(token_logprobs) / L**alpha


def length_normalized_score_grad(token_logprobs: Sequence[float], scale: float = 1.0, alpha: float = 1.0) -> np.ndarray:
    L = len(token_logprobs)
    return np.full(L, scale / L**alpha)


def margin_rank_loss(scores: Sequence[float], lambda_margin: float = 0.001) -> float:
    """Sum over ``i < j`` of ``max(0, f_j - f_i + (j - i) * lambda)``.

    ``scores[0]`` belongs to the best-ranked candidate.
    """
    f = np.asarray(scores, dtype=float)
    terms = []
    for i in range(len(f)):
        for j in range(i + 1, len(f)):
            terms.append(max(0.0, f[j] - f[i] + (j - i) * lambda_margin))
    return math.fsum(terms)


def margin_rank_loss_grad(scores: Sequence[float], lambda_margin: float = 0.001) -> np.ndarray:
    f = np.asarray(scores, dtype=float)
    g = np.zeros_like(f)
    for i in range(len(f)):
        for j in range(i + 1, len(f)):
            if f[j] - f[i] + (j - i) * lambda_margin > 0:
                g[j] += 1.0
                g[i] -= 1.0
    return g


# ---------------------------------------------------------------------------
# latent alignment


def _unit_rows(h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(h, axis=1)
    if np.any(norms == 0):
        raise ValueError("latent vectors must be non-zero")
    return h / norms[:, None], norms


def contrastive_loss(
    positives: Sequence[Sequence[float]],
    negatives: Sequence[Sequence[float]],
    temperature: float = 1.0,
    include_positive_in_denominator: bool = False,
) -> float:
    """Latent-alignment loss over unordered positive pairs, anchored on the first.

    For each pair ``(i, j)``, ``i < j``::

        -log( exp(cos(h_i, h_j)/t) / sum_k exp(cos(h_i, h_k)/t) )

    where ``k`` runs over negatives (plus ``j`` when
    ``include_positive_in_denominator``), averaged over ``C(|P|, 2)`` pairs.
    """
    P = np.asarray(positives, dtype=float)
    N = np.asarray(negatives, dtype=float)
    _check_latents(P, N, temperature)
    up, _ = _unit_rows(P)
    un, _ = _unit_rows(N)
    total = []
    for i in range(len(up)):
        neg_logits = un @ up[i] / temperature
        for j in range(i + 1, len(up)):
            pos_logit = float(up[i] @ up[j]) / temperature
            logits = np.append(neg_logits, pos_logit) if include_positive_in_denominator else neg_logits
            m = logits.max()
            lse = m + math.log(np.exp(logits - m).sum())
            total.append(lse - pos_logit)
    return math.fsum(total) / math.comb(len(up), 2)


def _check_latents(P: np.ndarray, N: np.ndarray, temperature: float) -> None:
    if P.ndim != 2 or N.ndim != 2 or P.shape[1] != N.shape[1]:
        raise ValueError("latents must be 2-D with a shared dimension")
    if len(P) < 2:
        raise ValueError("contrastive_loss needs at least two positives")
    if len(N) < 1:
        raise ValueError("contrastive_loss needs at least one negative")
    if not temperature > 0:
        raise ValueError("temperature must be > 0")


def _cos_grad(u_a: np.ndarray, u_b: np.ndarray, norm_a: float) -> np.ndarray:
    """d cos(a, b) / d a, given unit vectors and |a|."""
    return (u_b - (u_a @ u_b) * u_a) / norm_a


def contrastive_loss_grad(
    positives: Sequence[Sequence[float]],
    negatives: Sequence[Sequence[float]],
    temperature: float = 1.0,
    include_positive_in_denominator: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`contrastive_loss` w.r.t. positives and negatives."""
    P = np.asarray(positives, dtype=float)
    N = np.asarray(negatives, dtype=float)
    _check_latents(P, N, temperature)
    up, np_ = _unit_rows(P)
    un, nn = _unit_rows(N)
    gP = np.zeros_like(P)
    gN = np.zeros_like(N)
    n_pairs = math.comb(len(up), 2)
    t = temperature
    for i in range(len(up)):
        neg_logits = un @ up[i] / t
        for j in range(i + 1, len(up)):
            pos_logit = float(up[i] @ up[j]) / t
            if include_positive_in_denominator:
                logits = np.append(neg_logits, pos_logit)
            else:
                logits = neg_logits
            w = np.exp(logits - logits.max())
            w /= w.sum()
            wn = w[: len(un)]
            wp = w[len(un)] if include_positive_in_denominator else 0.0
            # term = LSE(logits) - pos_logit
            coef_pos = wp - 1.0
            gP[i] += coef_pos / t * _cos_grad(up[i], up[j], np_[i])
            gP[j] += coef_pos / t * _cos_grad(up[j], up[i], np_[j])
            for k in range(len(un)):
                gP[i] += wn[k] / t * _cos_grad(up[i], un[k], np_[i])
                gN[k] += wn[k] / t * _cos_grad(un[k], up[i], nn[k])
    return gP / n_pairs, gN / n_pairs


# ---------------------------------------------------------------------------
# ConSeq


def conseq_loss(positive_ll: Sequence[float], negative_ll: Sequence[float], eps: float = CONSEQ_EPS) -> float:
    """``-mean(ll_p) - mean(log(1 - exp(ll_n)))`` with ``exp(ll_n) <= 1 - eps``.

    Inputs are full-sequence natural-log likelihoods. Emits
    :class:`ClampWarning` when the clamp engages.
    """
    if not len(positive_ll) or not len(negative_ll):
        raise ValueError("conseq_loss needs positives and negatives")
    probs = np.exp(np.asarray(negative_ll, dtype=float))
    if np.any(probs > 1 - eps):
        warnings.warn("negative likelihood clamped to 1 - eps", ClampWarning, stacklevel=2)
        probs = np.minimum(probs, 1 - eps)
    pos_term = -math.fsum(positive_ll) / len(positive_ll)
    neg_term = -math.fsum(np.log1p(-probs)) / len(probs)
    return pos_term + neg_term


def conseq_loss_grad(positive_ll: Sequence[float], negative_ll: Sequence[float], eps: float = CONSEQ_EPS) -> tuple[np.ndarray, np.ndarray]:
    pos = np.asarray(positive_ll, dtype=float)
    neg = np.asarray(negative_ll, dtype=float)
    g_pos = np.full(len(pos), -1.0 / len(pos))
    p = np.exp(neg)
    clamped = p > 1 - eps
    g_neg = np.where(clamped, 0.0, p / (1 - np.minimum(p, 1 - eps))) / len(neg)
    return g_pos, g_neg
