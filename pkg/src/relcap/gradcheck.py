"""Central finite-difference checks for primitives, blocks and the joint loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import model as mdl
from . import selection
from .config import ModelConfig
from .data import Batch

STEP = 1e-5
TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    rel_error: float
    tol: float = TOL

    @property
    def passed(self) -> bool:
        return bool(self.rel_error < self.tol)


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)`` with a tiny floor."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-10)
    return float(np.linalg.norm(a - n) / denom)


def numeric_grad(f: Callable[[], float], x: np.ndarray, step: float = STEP) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return g


def check_function(name: str, build: Callable[[dict], ad.Tensor], inputs: dict[str, np.ndarray],
                   rng: np.random.Generator) -> list[CheckResult]:
    """Gradcheck ``sum(w * build(inputs))`` for a random projection ``w``."""
    probe = {}

    def loss(tape=None):
        vals = {k: (tape.variable(v, k) if tape is not None else ad.Tensor(v)) for k, v in inputs.items()}
        out = build(vals)
        if "w" not in probe:
            probe["w"] = rng.normal(size=out.shape)
        return ad.sum(out * probe["w"]), vals

    tape = ad.Tape()
    L, vals = loss(tape)
    grads = tape.backward(L)
    return [
        CheckResult(f"{name}[{k}]", rel_error(grads[vals[k]], numeric_grad(lambda: loss()[0].item(), inputs[k])))
        for k in inputs
    ]


def primitive_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    r = lambda *s: rng.normal(size=s)  # noqa: E731
    pos = lambda *s: rng.uniform(0.5, 2.0, size=s)  # noqa: E731
    mask = np.array([[True, True, False, True], [True, False, True, True]])
    idx = np.array([[0, 2], [3, 0]])
    soft = rng.uniform(size=(2, 4))
    cases = [
        ("matmul", lambda v: v["a"] @ v["b"], {"a": r(2, 3, 4), "b": r(4, 5)}),
        ("add", lambda v: v["a"] + v["b"], {"a": r(3, 4), "b": r(4)}),
        ("sub", lambda v: v["a"] - v["b"], {"a": r(3, 1), "b": r(3, 4)}),
        ("mul", lambda v: v["a"] * v["b"], {"a": r(2, 3, 4), "b": r(2, 1, 4)}),
        ("scale", lambda v: ad.scale(v["a"], -2.5), {"a": r(3)}),
        ("concat", lambda v: ad.concat([v["a"], v["b"]], axis=-1), {"a": r(2, 3), "b": r(2, 2)}),
        ("slice", lambda v: v["a"][:, 1:3], {"a": r(3, 4)}),
        ("sum", lambda v: ad.sum(v["a"], axis=1), {"a": r(2, 3, 4)}),
        ("max", lambda v: ad.maximum([v["a"], v["b"], v["c"]]), {"a": r(3, 4), "b": r(3, 4), "c": r(3, 4)}),
        ("max_over", lambda v: ad.max_over(v["a"], axis=1), {"a": r(2, 3, 4)}),
        ("sigmoid", lambda v: ad.sigmoid(v["a"]), {"a": r(3, 4)}),
        ("tanh", lambda v: ad.tanh(v["a"]), {"a": r(3, 4)}),
        ("log", lambda v: ad.log(v["a"]), {"a": pos(3, 4)}),
        ("exp", lambda v: ad.exp(v["a"]), {"a": r(3, 4)}),
        ("softmax", lambda v: ad.softmax(v["a"], mask), {"a": r(2, 4)}),
        ("log_softmax", lambda v: ad.log_softmax(v["a"]), {"a": r(2, 4)}),
        ("lrelu", lambda v: ad.lrelu(v["a"]), {"a": r(3, 4) + np.sign(r(3, 4)) * 0.1}),
        ("embedding", lambda v: ad.embedding(v["W"], idx), {"W": r(5, 3)}),
        ("take", lambda v: ad.take(v["a"], [0, 0, 1, 2, 1], axis=0), {"a": r(3, 2, 2)}),
        ("reshape", lambda v: ad.reshape(v["a"], (4, 3)), {"a": r(3, 4)}),
        ("where", lambda v: ad.where(mask, v["a"], v["b"]), {"a": r(2, 4), "b": r(2, 4)}),
        ("bce", lambda v: ad.bce_with_logits(v["a"], soft), {"a": r(2, 4)}),
    ]
    out = []
    for name, fn, inputs in cases:
        out.extend(check_function(name, fn, inputs, rng))
    return out


def block_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    n_in, H = 3, 4

    def randomize(p):
        return {k: v + 0.1 * rng.normal(size=v.shape) for k, v in p.items()}

    fc_p = randomize(ad.init_fc(rng, "f", n_in, H))
    gru_p = randomize(ad.init_gru(rng, "g", n_in, H))
    lstm_p = randomize(ad.init_lstm(rng, "l", n_in, H))
    x = rng.normal(size=(2, n_in))
    xs = rng.normal(size=(2, 3, n_in))
    h = rng.normal(size=(2, H))
    c = rng.normal(size=(2, H))
    seq_mask = np.array([[True, True, True], [True, True, False]])
    out = []
    out += check_function("fc", lambda v: ad.fc(v["x"], v, "f"), {"x": x, **fc_p}, rng)
    out += check_function("gru_step", lambda v: ad.gru_step(v["x"], v["h"], v, "g"), {"x": x, "h": h, **gru_p}, rng)
    out += check_function(
        "gru_sequence", lambda v: ad.gru_sequence(v["xs"], v["h"], v, "g", seq_mask)[-1], {"xs": xs, "h": h, **gru_p}, rng,
    )

    def lstm(v):
        h2, c2 = ad.lstm_step(v["x"], (v["h"], v["c"]), v, "l")
        return ad.concat([h2, c2], axis=-1)

    out += check_function("lstm_step", lstm, {"x": x, "h": h, "c": c, **lstm_p}, rng)
    return out


# ---------------------------------------------------------------- joint model


def tiny_config() -> ModelConfig:
    d = 5
    return ModelConfig(q_embed=d, q_hidden=d, v_hidden=d, word_embed=d, cap_hidden=d, dec_embed=d,
                       dec_hidden=d, att_hidden=d)


def tiny_batch(seed: int = 0, B: int = 2, K: int = 3, D: int = 4, C: int = 2, T: int = 4, N: int = 3,
               vocab_size: int = 9) -> Batch:
    """Random batch: tokens >= 4 are words, 0..3 are <pad> <unk> <start> <end>."""
    rng = np.random.default_rng(seed)
    mask = np.ones((B, K), dtype=bool)
    mask[-1, -1] = False
    feats = rng.normal(size=(B, K, D)) * mask[..., None]
    q_len = rng.integers(2, 5, size=B)
    q = np.zeros((B, 5), dtype=np.int64)
    for b in range(B):
        q[b, : q_len[b]] = rng.integers(4, vocab_size, size=q_len[b])
    # T counts words plus <end>
    n_words = rng.integers(1, T, size=(B, C))
    caps = np.zeros((B, C, T + 1), dtype=np.int64)
    for b in range(B):
        for i in range(C):
            n = n_words[b, i]
            caps[b, i, 0] = 2
            caps[b, i, 1: 1 + n] = rng.integers(4, vocab_size, size=n)
            caps[b, i, 1 + n] = 3
    return Batch(feats, mask, q, q_len, caps, n_words + 2, rng.uniform(size=(B, N)), np.zeros(B, dtype=np.int64))


def tiny_params(cfg: ModelConfig, batch: Batch, vocab_size: int = 9, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed + 1)
    p = mdl.init_params(cfg, vocab_size, batch.scores.shape[1], batch.features.shape[2], seed)
    # nonzero biases so every parameter has a generic gradient
    return {k: v + 0.1 * rng.normal(size=v.shape) for k, v in p.items()}


def joint_loss_checks(cfg: ModelConfig | None = None, seed: int = 0, selected=(0, 1)) -> list[CheckResult]:
    """Full joint loss against finite differences for every parameter and every v^q_k."""
    cfg = cfg or tiny_config()
    batch = tiny_batch(seed)
    params = tiny_params(cfg, batch, seed=seed)
    sel = np.asarray(selected)

    def loss_value() -> float:
        tr = mdl.forward(params, batch, cfg)
        return selection.joint_loss(tr.vqa_loss, tr.nll, sel).item()

    tape = ad.Tape()
    tr = mdl.forward(params, batch, cfg, tape)
    L = selection.joint_loss(tr.vqa_loss, tr.nll, sel)
    grads = tape.backward(L).for_params(tr.P)
    out = [CheckResult(f"param {k}", rel_error(grads[k], numeric_grad(loss_value, params[k]))) for k in params]

    # V^q as a free input to everything downstream of it
    P = mdl.constants(params)
    q, att = mdl.encode(P, batch, cfg)
    vq = att.Vq.value.copy()

    def head_loss(tape=None):
        Vq = tape.variable(vq) if tape is not None else ad.Tensor(vq)
        t = mdl.head(P, batch, cfg, q, Vq, tape=tape)
        return selection.joint_loss(t.vqa_loss, t.nll, sel), Vq

    tape = ad.Tape()
    L, Vq = head_loss(tape)
    g = tape.backward(L)[Vq]
    num = numeric_grad(lambda: head_loss()[0].item(), vq)
    for k in range(vq.shape[1]):
        out.append(CheckResult(f"v^q_{k}", rel_error(g[:, k], num[:, k])))
    return out


def run_all(seed: int = 0) -> list[CheckResult]:
    return primitive_checks(seed) + block_checks(seed) + joint_loss_checks(seed=seed)
