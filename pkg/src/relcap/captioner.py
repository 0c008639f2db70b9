"""Two-layer attention LSTM caption decoder over the question-attended objects.

Layer 1 (attention LSTM) reads ``[previous word; sum_k v^q_k; language h]``
and its state drives an attention over the objects; layer 2 (language LSTM)
reads ``[attended object feature; attention h]`` and emits the word
distribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class GeneratedCaption:
    tokens: list[int]  # without <start>; ends in <end> unless truncated
    step_log_probs: list[float] = field(default_factory=list)

    @property
    def log_prob(self) -> float:
        return float(np.sum(self.step_log_probs))


def init_params(rng: np.random.Generator, cfg, vocab_size: int) -> dict[str, np.ndarray]:
    H, Hd, A, E = cfg.v_hidden, cfg.dec_hidden, cfg.att_hidden, cfg.dec_embed
    p: dict[str, np.ndarray] = {"dec.embed": ad.glorot(rng, vocab_size, E)}
    p.update(ad.init_lstm(rng, "dec.att_lstm", E + H + Hd, Hd))
    p.update(ad.init_fc(rng, "dec.att_v", H, A))
    p.update(ad.init_fc(rng, "dec.att_h", Hd, A))
    p.update(ad.init_fc(rng, "dec.att_w", A, 1))
    p.update(ad.init_lstm(rng, "dec.lang_lstm", H + Hd, Hd))
    p.update(ad.init_fc(rng, "dec.out", Hd, vocab_size))
    return p


class _Decoder:
    """Per-sequence decoder state over a fixed object set."""

    def __init__(self, P, Vq: Tensor, mask: np.ndarray):
        self.P = P
        self.Vq = Vq
        self.mask = np.asarray(mask, dtype=bool)
        B, K, _ = Vq.shape
        Hd = P["dec.att_lstm.U"].shape[0]
        self.B, self.K = B, K
        self.vbar = ad.sum(Vq, axis=1)
        self.proj_v = ad.linear(Vq, P, "dec.att_v")
        zero = ad.constant(np.zeros((B, Hd)))
        self.att_state = (zero, zero)
        self.lang_state = (zero, zero)
        self.attention: list[np.ndarray] = []

    def step(self, words: np.ndarray) -> Tensor:
        """Consume previous tokens (B,), return next-token logits (B, V)."""
        P = self.P
        x = ad.concat([ad.embedding(P["dec.embed"], words), self.vbar, self.lang_state[0]], axis=-1)
        self.att_state = ad.lstm_step(x, self.att_state, P, "dec.att_lstm")
        h_att = self.att_state[0]
        A = self.proj_v.shape[-1]
        e = ad.tanh(self.proj_v + ad.reshape(ad.linear(h_att, P, "dec.att_h"), (self.B, 1, A)))
        beta = ad.softmax(ad.reshape(ad.linear(e, P, "dec.att_w"), (self.B, self.K)), self.mask)
        self.attention.append(beta.value)
        attended = ad.sum(self.Vq * ad.reshape(beta, (self.B, self.K, 1)), axis=1)
        self.lang_state = ad.lstm_step(ad.concat([attended, h_att], axis=-1), self.lang_state, P, "dec.lang_lstm")
        return ad.linear(self.lang_state[0], P, "dec.out")


def caption_nll(P, Vq: Tensor, mask: np.ndarray, tokens: np.ndarray, lengths: np.ndarray,
                return_attention: bool = False):
    """Teacher-forced negative log-likelihood per sequence, shape (B,).

    ``tokens`` is (B, L) starting with ``<start>``; positions ``1..len-1`` are
    predicted from their predecessors.
    """
    tokens = np.asarray(tokens)
    lengths = np.asarray(lengths)
    vocab_size = P["dec.embed"].shape[0]
    if tokens.min() < 0 or tokens.max() >= vocab_size:
        raise IndexError(f"caption token outside the caption vocab (size {vocab_size})")
    if np.any(lengths < 2):
        raise ValueError("caption needs <start> and at least one predicted token")
    B = tokens.shape[0]
    steps = int(lengths.max()) - 1
    dec = _Decoder(P, Vq, mask)
    rows = np.arange(B)
    terms = []
    for t in range(steps):
        logp = ad.log_softmax(dec.step(tokens[:, t]))
        gold = logp[rows, tokens[:, t + 1]]
        live = (t + 1 < lengths)
        terms.append(gold if live.all() else gold * live.astype(np.float64))
    nll = -ad.sum(ad.concat([ad.reshape(g, (B, 1)) for g in terms], axis=1), axis=1)
    if return_attention:
        return nll, dec.attention
    return nll


def generate(P, Vq: Tensor, mask: np.ndarray, start: int, end: int, mode: str = "greedy", count: int = 1,
             max_len: int = 12, temperature: float = 1.0, seed: int | None = None) -> list[list[GeneratedCaption]]:
    """Decode ``count`` captions per example; returns one list per example.

    Recorded log-probabilities are those of the model itself (temperature
    1), so ``-caption_nll`` of a generated caption equals its ``log_prob``.
    """
    if count < 1 or max_len < 1:
        raise ValueError("count and max_len must be >= 1")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown decoding mode {mode!r}")
    P = {k: ad.Tensor(v.value if isinstance(v, Tensor) else v) for k, v in P.items()}
    Vq = ad.Tensor(Vq.value if isinstance(Vq, Tensor) else Vq)
    B = Vq.shape[0]
    rows = np.repeat(np.arange(B), count)
    dec = _Decoder(P, ad.Tensor(Vq.value[rows]), np.asarray(mask)[rows])
    rng = np.random.default_rng(seed)
    n = B * count
    words = np.full(n, start, dtype=np.int64)
    out = [GeneratedCaption([]) for _ in range(n)]
    done = np.zeros(n, dtype=bool)
    for _ in range(max_len):
        logits = dec.step(words).value
        shifted = logits - logits.max(axis=-1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        if mode == "greedy":
            nxt = logits.argmax(axis=-1)
        else:
            z = shifted / temperature
            z = z - z.max(axis=-1, keepdims=True)
            probs = np.exp(z)
            probs /= probs.sum(axis=-1, keepdims=True)
            cdf = np.cumsum(probs, axis=-1)
            u = rng.random(n) * cdf[:, -1]
            nxt = np.minimum((cdf < u[:, None]).sum(axis=-1), logits.shape[-1] - 1)
        for r in np.flatnonzero(~done):
            out[r].tokens.append(int(nxt[r]))
            out[r].step_log_probs.append(float(logp[r, nxt[r]]))
        done |= nxt == end
        if done.all():
            break
        words = nxt
    return [out[b * count: (b + 1) * count] for b in range(B)]
