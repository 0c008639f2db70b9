"""Caption-adjusted attention, answer scoring, loss and the soft-score metric."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class AdjustedAttention:
    scores: Tensor | None  # (B, K) raw a^cv, None without adjustment
    alpha: Tensor | None  # (B, K)
    attended: Tensor  # (B, H)


@dataclass
class AnswerPrediction:
    h: Tensor
    logits: Tensor  # (B, N)
    probs: Tensor  # (B, N) sigmoid scores
    index: np.ndarray  # (B,) argmax


def init_params(rng: np.random.Generator, cfg, n_answers: int) -> dict[str, np.ndarray]:
    if n_answers < 1:
        raise ValueError("need at least one answer candidate")
    H, Hq, Hc = cfg.v_hidden, cfg.q_hidden, cfg.cap_hidden
    p: dict[str, np.ndarray] = {}
    p.update(ad.init_fc(rng, "caa.c", Hc, H))
    p.update(ad.init_fc(rng, "caa.v", H, H))
    p.update(ad.init_fc(rng, "caa.score", H, 1))
    p.update(ad.init_fc(rng, "joint.v", H, Hq))
    p.update(ad.init_fc(rng, "joint.c", Hc, Hq))
    p.update(ad.init_fc(rng, "answer", Hq, n_answers))
    return p


def adjust_attention(P, Vq: Tensor, mask: np.ndarray, c: Tensor | None, use_caa: bool = True,
                     slope: float = ad.LRELU_SLOPE) -> AdjustedAttention:
    """a_k = f(f(c) * f(v^q_k)), alpha = softmax(a), attended = sum_k alpha_k v^q_k.

    With ``use_caa`` off every weight is fixed at 1.0 and the adjustment
    layers are never evaluated.
    """
    if not use_caa:
        return AdjustedAttention(None, None, ad.sum(Vq, axis=1))
    if c is None:
        raise ValueError("caption features are required when caption attention adjustment is on")
    B, K, H = Vq.shape
    fc_ = ad.reshape(ad.fc(c, P, "caa.c", slope), (B, 1, H))
    fv = ad.fc(Vq, P, "caa.v", slope)
    scores = ad.reshape(ad.fc(fv * fc_, P, "caa.score", slope), (B, K))
    alpha = ad.softmax(scores, mask)
    attended = ad.sum(Vq * ad.reshape(alpha, (B, K, 1)), axis=1)
    return AdjustedAttention(scores, alpha, attended)


def predict(P, q: Tensor, attended: Tensor, c: Tensor, slope: float = ad.LRELU_SLOPE) -> AnswerPrediction:
    """h = q * (f(attended) + f(c)); logits = affine(h); probs = sigmoid(logits)."""
    h = q * (ad.fc(attended, P, "joint.v", slope) + ad.fc(c, P, "joint.c", slope))
    logits = ad.linear(h, P, "answer")
    return AnswerPrediction(h, logits, ad.sigmoid(logits), logits.value.argmax(axis=-1))


def vqa_loss(logits: Tensor, targets) -> Tensor:
    """Per-example binary cross-entropy against soft scores, summed over candidates."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise ValueError(f"vqa_loss: logits {logits.shape} vs targets {targets.shape}")
    return ad.sum(ad.bce_with_logits(logits, targets), axis=-1)


def soft_accuracy(pred_index: int, answer_scores: dict[str, float], answers: list[str]) -> float:
    return float(answer_scores.get(answers[int(pred_index)], 0.0))
