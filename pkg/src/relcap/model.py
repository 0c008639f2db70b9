"""Joint model wiring: encoders -> caption encoder -> adjusted attention -> answers,
with the caption decoder reading the same question-attended objects."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import captioner, encoders, vqa_head
from .autodiff import Tape, Tensor
from .config import ModelConfig
from .data import Batch


@dataclass
class ForwardTrace:
    tape: Tape | None
    P: dict
    mask: np.ndarray
    q: Tensor
    Vq: Tensor
    vbar_q: Tensor
    alpha_qv: Tensor
    captions: encoders.CaptionEncoding | None
    c: Tensor
    alpha_cv: Tensor | None
    vbar_qc: Tensor
    prediction: vqa_head.AnswerPrediction
    s_pred: Tensor  # (B,) quantity differentiated by the selector
    vqa_loss: Tensor  # (B,)
    Vq_dec: Tensor | None = None  # (B*C, K, H) decoder's copy of V^q
    nll: Tensor | None = None  # (B, C)

    @property
    def logits(self) -> Tensor:
        return self.prediction.logits

    @property
    def pred(self) -> np.ndarray:
        return self.prediction.index


def init_params(cfg: ModelConfig, vocab_size: int, n_answers: int, feature_dim: int, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, 0x1417])
    p = encoders.init_params(rng, cfg, vocab_size, feature_dim)
    p.update(vqa_head.init_params(rng, cfg, n_answers))
    p.update(captioner.init_params(rng, cfg, vocab_size))
    return p


def constants(params) -> dict[str, Tensor]:
    return {k: ad.Tensor(v) for k, v in params.items()}


def encode(P, batch: Batch, cfg: ModelConfig):
    q = encoders.embed_question(P, batch.question, batch.question_len)
    att = encoders.attend_question_visual(P, batch.features, batch.mask, q, cfg.lrelu_slope)
    return q, att


def head(P, batch: Batch, cfg: ModelConfig, q: Tensor, Vq: Tensor, alpha_qv: Tensor | None = None,
         tape: Tape | None = None, with_captioner: bool = True) -> ForwardTrace:
    """Everything downstream of V^q."""
    B, K, H = Vq.shape
    vbar = ad.sum(Vq, axis=1)
    if cfg.ablate_captions:
        cap_enc = None
        c = ad.constant(np.zeros((B, cfg.cap_hidden)))
    else:
        cap_enc = encoders.embed_captions(P, batch.captions, batch.caption_len, vbar, q, cfg.gate, cfg.lrelu_slope)
        c = cap_enc.pooled
    adj = vqa_head.adjust_attention(P, Vq, batch.mask, c, cfg.use_caa, cfg.lrelu_slope)
    pred = vqa_head.predict(P, q, adj.attended, c, cfg.lrelu_slope)
    chosen = pred.logits[np.arange(B), pred.index]
    s_pred = chosen if cfg.pred_target == "logit" else ad.log(ad.sigmoid(chosen))
    trace = ForwardTrace(
        tape, P, np.asarray(batch.mask, dtype=bool), q, Vq, vbar, alpha_qv, cap_enc, c, adj.alpha,
        adj.attended, pred, s_pred, vqa_head.vqa_loss(pred.logits, batch.scores),
    )
    if with_captioner and not cfg.ablate_captions:
        C = batch.captions.shape[1]
        src = ad.detach(Vq) if cfg.caption_stop_grad else Vq
        rows = np.repeat(np.arange(B), C)
        trace.Vq_dec = ad.take(src, rows, axis=0)
        L = batch.captions.shape[2]
        nll = captioner.caption_nll(P, trace.Vq_dec, trace.mask[rows], batch.captions.reshape(B * C, L),
                                    batch.caption_len.reshape(-1))
        trace.nll = ad.reshape(nll, (B, C))
    return trace


def forward(params, batch: Batch, cfg: ModelConfig, tape: Tape | None = None, with_captioner: bool = True) -> ForwardTrace:
    """Full forward pass.  ``params`` may be arrays (watched on ``tape`` if one
    is given, constants otherwise) or an already-watched Tensor mapping."""
    first = next(iter(params.values()))
    if isinstance(first, Tensor):
        P = params
    elif tape is not None:
        P = tape.watch(params)
    else:
        P = constants(params)
    q, att = encode(P, batch, cfg)
    return head(P, batch, cfg, q, att.Vq, att.alpha, tape, with_captioner)
