"""Question encoder, question-guided object attention, and the gated caption encoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class QuestionAttendedFeatures:
    Vq: Tensor  # (B, K, H), zero rows for masked objects
    vbar: Tensor  # (B, H), sum over objects
    alpha: Tensor  # (B, K)


@dataclass
class CaptionEncoding:
    word_hidden: Tensor  # (B*C, T, E)
    gates: Tensor | None  # (B*C, T, E) or (B*C, T, 1); None when gating is off
    caption_hidden: Tensor  # (B*C, Hc), state after each caption's last word
    per_caption: Tensor  # (B, C, Hc)
    pooled: Tensor  # (B, Hc)


def init_params(rng: np.random.Generator, cfg, vocab_size: int, feature_dim: int) -> dict[str, np.ndarray]:
    H, Hq, E, Hc = cfg.v_hidden, cfg.q_hidden, cfg.word_embed, cfg.cap_hidden
    p: dict[str, np.ndarray] = {}
    p["q.embed"] = ad.glorot(rng, vocab_size, cfg.q_embed)
    p.update(ad.init_gru(rng, "q.gru", cfg.q_embed, Hq))
    p.update(ad.init_fc(rng, "qv.img", feature_dim, H))
    p.update(ad.init_fc(rng, "qv.q", Hq, H))
    # fc over concat(f(v_k), f(q)), stored as its two row blocks
    p["qv.att.Wv"] = ad.glorot(rng, 2 * H, H, (H, H))
    p["qv.att.Wq"] = ad.glorot(rng, 2 * H, H, (H, H))
    p["qv.att.b"] = np.zeros(H)
    p["qv.score.W"] = ad.glorot(rng, H, 1)
    p["qv.score.b"] = np.zeros(1)
    p["cap.embed"] = ad.glorot(rng, vocab_size, E)
    p.update(ad.init_gru(rng, "cap.word_gru", E, E))
    p.update(ad.init_fc(rng, "cap.gate_v", H, E))
    p.update(ad.init_fc(rng, "cap.gate_q", Hq, E))
    p.update(ad.init_gru(rng, "cap.caption_gru", E, Hc))
    p.update(ad.init_fc(rng, "cap.out", Hc, Hc))
    return p


def embed_question(P, tokens: np.ndarray, lengths: np.ndarray) -> Tensor:
    """Final GRU state over each question; padding past ``lengths`` is skipped."""
    tokens = np.asarray(tokens)
    lengths = np.asarray(lengths)
    if np.any(lengths < 1):
        raise ValueError("empty question")
    T = int(lengths.max())
    emb = ad.embedding(P["q.embed"], tokens[:, :T])
    H = P["q.gru.Uh"].shape[0]
    mask = np.arange(T)[None, :] < lengths[:, None]
    h0 = ad.constant(np.zeros((tokens.shape[0], H)))
    return ad.gru_sequence(emb, h0, P, "q.gru", mask)[-1]


def attend_question_visual(P, V: np.ndarray, mask: np.ndarray, q: Tensor, slope: float = ad.LRELU_SLOPE) -> QuestionAttendedFeatures:
    """Per-object question attention; v^q_k = alpha_k * n_valid * f(v_k)."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=1).all():
        raise ValueError("every object of an example is masked")
    B, K, _ = V.shape
    fv = ad.fc(ad.as_tensor(V), P, "qv.img", slope)
    fq = ad.fc(q, P, "qv.q", slope)
    H = fv.shape[-1]
    joint = ad.lrelu(
        ad.matmul(fv, P["qv.att.Wv"]) + ad.reshape(ad.matmul(fq, P["qv.att.Wq"]), (B, 1, H)) + P["qv.att.b"],
        slope,
    )
    scores = ad.reshape(ad.linear(joint, P, "qv.score"), (B, K))
    alpha = ad.softmax(scores, mask)
    n_valid = mask.sum(axis=1, keepdims=True).astype(np.float64)
    Vq = fv * ad.reshape(alpha * n_valid, (B, K, 1))
    return QuestionAttendedFeatures(Vq, ad.sum(Vq, axis=1), alpha)


def _stack_time(hs: list[Tensor]) -> Tensor:
    N, H = hs[0].shape
    return ad.concat([ad.reshape(h, (N, 1, H)) for h in hs], axis=1)


def embed_captions(P, captions: np.ndarray, caption_len: np.ndarray, vbar: Tensor, q: Tensor,
                   gate: str = "vector", slope: float = ad.LRELU_SLOPE) -> CaptionEncoding:
    """Word-gated two-layer GRU caption encoder with max pooling over captions.

    ``captions`` is (B, C, L) in the encoded ``<start> words <end>`` layout;
    only the words are read.
    """
    captions = np.asarray(captions)
    caption_len = np.asarray(caption_len)
    B, C, _ = captions.shape
    n_words = caption_len - 2
    if np.any(n_words < 1):
        raise ValueError("empty caption")
    vocab_size = P["cap.embed"].shape[0]
    if captions.min() < 0 or captions.max() >= vocab_size:
        raise IndexError(f"caption token index out of range for vocab of size {vocab_size}")
    T = int(n_words.max())
    words = captions[:, :, 1: 1 + T].reshape(B * C, T)
    mask = (np.arange(T)[None, :] < n_words.reshape(-1, 1))
    emb = ad.embedding(P["cap.embed"], words)  # (BC, T, E)
    E = emb.shape[-1]
    h0 = ad.constant(np.zeros((B * C, E)))
    h1 = _stack_time(ad.gru_sequence(emb, h0, P, "cap.word_gru", mask)[1:])

    rows = np.repeat(np.arange(B), C)
    if gate == "off":
        gates = None
        gated = emb
    else:
        g = ad.fc(vbar, P, "cap.gate_v", slope) + ad.fc(q, P, "cap.gate_q", slope)  # (B, E)
        g = ad.reshape(ad.take(g, rows, axis=0), (B * C, 1, E))
        pre = h1 * g
        if gate == "scalar":
            pre = ad.sum(pre, axis=-1, keepdims=True)
        elif gate != "vector":
            raise ValueError(f"unknown gate mode {gate!r}")
        gates = ad.sigmoid(pre)
        gated = gates * emb

    Hc = P["cap.caption_gru.Uh"].shape[0]
    h2 = ad.gru_sequence(gated, ad.constant(np.zeros((B * C, Hc))), P, "cap.caption_gru", mask)[-1]
    ci = ad.reshape(ad.fc(h2, P, "cap.out", slope), (B, C, Hc))
    return CaptionEncoding(h1, gates, h2, ci, ad.max_over(ci, axis=1))
