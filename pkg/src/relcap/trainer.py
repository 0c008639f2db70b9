"""AdaMax training, the two-phase schedule, checkpoints and per-epoch metrics."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import captioner
from . import model as mdl
from . import selection
from .config import RunConfig
from .data import (
    UNK, ExampleRecord, Vocab, collate, decode_caption, encode_example, vocab_hash,
)

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"RCAP"
CKPT_VERSION = 1
CKPT_HEADER = struct.Struct("<4sIQ")
METRIC_FIELDS = ("epoch", "phase", "train_loss", "val_soft_acc", "feasible_rate", "planted_recovery",
                 "mean_inner_product")


class DivergenceError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# ------------------------------------------------------------------ AdaMax


@dataclass
class AdamaxState:
    lr: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    u: dict[str, np.ndarray] = field(default_factory=dict)


def adamax_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamaxState) -> None:
    """In-place update of ``params`` and ``state``:

    m <- b1 m + (1 - b1) g;  u <- max(b2 u, |g|);  p <- p - lr / (1 - b1^t) * m / (u + eps)
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}; step aborted")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    lr_t = state.lr / (1.0 - b1 ** state.step)
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(params[name])
            state.u[name] = np.zeros_like(params[name])
        u = state.u[name]
        m *= b1
        m += (1.0 - b1) * g
        np.maximum(b2 * u, np.abs(g), out=u)
        params[name] -= lr_t * m / (u + state.eps)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float, bool]:
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm <= 0 or norm <= max_norm:
        return grads, norm, False
    s = max_norm / norm
    return {k: g * s for k, g in grads.items()}, norm, True


# -------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    optimizer: AdamaxState
    rng_state: dict
    epoch: int
    cursor: int
    order: list[int] | None
    phase: int
    vocab_hash: str
    config: dict
    extra: dict = field(default_factory=dict)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    arrays: list[tuple[str, np.ndarray]] = [(f"param/{k}", v) for k, v in sorted(ckpt.params.items())]
    arrays += [(f"adamax.m/{k}", v) for k, v in sorted(ckpt.optimizer.m.items())]
    arrays += [(f"adamax.u/{k}", v) for k, v in sorted(ckpt.optimizer.u.items())]
    entries, offset = [], 0
    for name, a in arrays:
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size * 8
    opt = ckpt.optimizer
    manifest = {
        "arrays": entries,
        "payload_bytes": offset,
        "optimizer": {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "step": opt.step},
        "rng_state": ckpt.rng_state,
        "epoch": ckpt.epoch,
        "cursor": ckpt.cursor,
        "order": ckpt.order,
        "phase": ckpt.phase,
        "vocab_hash": ckpt.vocab_hash,
        "config": ckpt.config,
        "extra": ckpt.extra,
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(head)) + head + body)
    tmp.replace(path)


def load_checkpoint(path: str | Path, expected_vocab_hash: str | None = None) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    if len(raw) < CKPT_HEADER.size:
        raise CheckpointError("checkpoint truncated (header)")
    magic, version, n_head = CKPT_HEADER.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {version}, expected {CKPT_VERSION}")
    start = CKPT_HEADER.size + n_head
    if start > len(raw):
        raise CheckpointError("checkpoint truncated (manifest)")
    try:
        manifest = json.loads(raw[CKPT_HEADER.size: start])
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise CheckpointError("checkpoint manifest is corrupt") from None
    body = memoryview(raw)[start:]
    if len(body) != manifest["payload_bytes"]:
        raise CheckpointError(f"checkpoint payload is {len(body)} bytes, expected {manifest['payload_bytes']}")
    if expected_vocab_hash is not None and manifest["vocab_hash"] != expected_vocab_hash:
        raise CheckpointError("vocabulary hash mismatch between checkpoint and dataset")
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adamax.m": {}, "adamax.u": {}}
    for e in manifest["arrays"]:
        shape = tuple(e["shape"])
        n = int(np.prod(shape)) * 8
        a = np.frombuffer(body[e["offset"]: e["offset"] + n], dtype="<f8").astype(np.float64).reshape(shape)
        kind, _, name = e["name"].partition("/")
        groups[kind][name] = a
    o = manifest["optimizer"]
    opt = AdamaxState(o["lr"], o["beta1"], o["beta2"], o["eps"], o["step"], groups["adamax.m"], groups["adamax.u"])
    return Checkpoint(groups["param"], opt, manifest["rng_state"], manifest["epoch"], manifest["cursor"],
                      manifest["order"], manifest["phase"], manifest["vocab_hash"], manifest["config"],
                      manifest.get("extra", {}))


# ------------------------------------------------------------------ metrics


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_metrics(path: str | Path, rows: list[dict]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in METRIC_FIELDS])
    tmp.replace(path)


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({k: (int(v) if k in ("epoch", "phase") else float(v)) for k, v in r.items()})
    return out


# ------------------------------------------------------------------ trainer


@dataclass
class EvalResult:
    soft_acc: float
    by_type: dict[str, float]
    feasible_rate: float
    planted_recovery: float
    mean_inner_product: float
    selected: np.ndarray
    inner_products: np.ndarray | None = None


class Trainer:
    """Holds parameters, optimizer and data-order state for one training phase."""

    def __init__(self, cfg: RunConfig, vocab: Vocab, answers: list[str], train: list[ExampleRecord],
                 val: list[ExampleRecord], params: dict[str, np.ndarray] | None = None,
                 optimizer: AdamaxState | None = None, phase: int = 1,
                 train_captions: list[list[str]] | None = None, val_captions: list[list[str]] | None = None):
        cfg.validate()
        self.cfg = cfg
        self.vocab, self.answers = vocab, answers
        self.train_records, self.val_records = train, val
        mq = cfg.data.max_question_len
        self.train_enc = [encode_example(r, vocab, answers, mq, None if train_captions is None else train_captions[i])
                          for i, r in enumerate(train)]
        self.val_enc = [encode_example(r, vocab, answers, mq, None if val_captions is None else val_captions[i])
                        for i, r in enumerate(val)]
        if train_captions is not None:
            for e in self.train_enc:
                e.relevant = -1
        if val_captions is not None:
            for e in self.val_enc:
                e.relevant = -1
        if params is None:
            params = mdl.init_params(cfg.model, len(vocab), len(answers), train[0].features.shape[1], cfg.seed)
        self.params = params
        t = cfg.train
        self.opt = optimizer or AdamaxState(t.lr, t.beta1, t.beta2, t.eps)
        self.rng = np.random.default_rng([cfg.seed, 0xDA7A])
        self.phase = phase
        self.epoch = 0
        self.cursor = 0
        self.order: np.ndarray | None = None
        self.metrics: list[dict] = []
        self.step_losses: list[float] = []
        self.vocab_hash = vocab_hash(vocab, answers)
        self.selection_log: selection.SelectionLog | None = None
        self._epoch_loss = 0.0
        self._epoch_count = 0

    @property
    def caption_loss_on(self) -> bool:
        m = self.cfg.model
        if m.ablate_captions:
            return False
        return not (self.phase == 2 and self.cfg.phase2.vqa_only)

    # -- state ---------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            self.params, self.opt, self.rng.bit_generator.state, self.epoch, self.cursor,
            None if self.order is None else [int(i) for i in self.order], self.phase, self.vocab_hash,
            self.cfg.to_dict(),
            {"epoch_loss": self._epoch_loss, "epoch_count": self._epoch_count, "metrics": self.metrics},
        )

    def restore(self, ckpt: Checkpoint) -> None:
        if ckpt.vocab_hash != self.vocab_hash:
            raise CheckpointError("vocabulary hash mismatch between checkpoint and dataset")
        missing = set(self.params) ^ set(ckpt.params)
        if missing:
            raise CheckpointError(f"checkpoint parameters do not match the model: {sorted(missing)[:5]}")
        self.params = {k: ckpt.params[k].copy() for k in self.params}
        self.opt = copy.deepcopy(ckpt.optimizer)
        self.rng.bit_generator.state = ckpt.rng_state
        self.epoch, self.cursor, self.phase = ckpt.epoch, ckpt.cursor, ckpt.phase
        self.order = None if ckpt.order is None else np.asarray(ckpt.order, dtype=np.int64)
        self._epoch_loss = ckpt.extra.get("epoch_loss", 0.0)
        self._epoch_count = ckpt.extra.get("epoch_count", 0)
        self.metrics = list(ckpt.extra.get("metrics", []))

    # -- training ------------------------------------------------------

    def _forward_batch(self, enc, tape):
        batch = collate(enc, self.vocab.pad)
        trace = mdl.forward(self.params, batch, self.cfg.model, tape, with_captioner=self.caption_loss_on)
        return batch, trace

    def train_step(self) -> float:
        n = len(self.train_enc)
        if self.order is None or self.cursor >= n:
            self.order = self.rng.permutation(n)
            self.cursor = 0
        bs = self.cfg.train.batch_size
        idx = self.order[self.cursor: self.cursor + bs]
        self.cursor += len(idx)
        tape = ad.Tape()
        _, trace = self._forward_batch([self.train_enc[i] for i in idx], tape)
        if self.caption_loss_on:
            G = selection.grad_inner_products(trace)
            sel = selection.select_batch(G, self.cfg.select.xi)
            if self.selection_log is not None:
                self.selection_log.write(self.opt.step + 1, idx, G, sel, self.cfg.select.xi)
            loss = selection.joint_loss(trace.vqa_loss, trace.nll, sel)
        else:
            loss = ad.scale(ad.sum(trace.vqa_loss), 1.0 / len(idx))
        value = loss.item()
        if not math.isfinite(value) or value > self.cfg.train.divergence_limit:
            raise DivergenceError(
                f"loss {value!r} exceeded {self.cfg.train.divergence_limit} at step {self.opt.step + 1} "
                f"(phase {self.phase}, epoch {self.epoch})"
            )
        P = trace.P
        grads = tape.backward(loss, wrt=list(P.values())).for_params(P)
        grads, norm, clipped = clip_by_global_norm(grads, self.cfg.train.clip_norm)
        if clipped:
            logger.info("step %d: gradient norm %.3g clipped to %g", self.opt.step + 1, norm, self.cfg.train.clip_norm)
        adamax_step(self.params, grads, self.opt)
        self.step_losses.append(value)
        self._epoch_loss += value * len(idx)
        self._epoch_count += len(idx)
        return value

    def train_steps(self, n: int) -> list[float]:
        return [self.train_step() for _ in range(n)]

    def run_epoch(self) -> dict:
        n = len(self.train_enc)
        if self.order is None or self.cursor >= n:
            self.order = None
        while True:
            self.train_step()
            if self.cursor >= n:
                break
        ev = self.evaluate(self.val_enc, self.val_records)
        row = {
            "epoch": self.epoch + 1,
            "phase": self.phase,
            "train_loss": self._epoch_loss / max(self._epoch_count, 1),
            "val_soft_acc": ev.soft_acc,
            "feasible_rate": ev.feasible_rate,
            "planted_recovery": ev.planted_recovery,
            "mean_inner_product": ev.mean_inner_product,
        }
        self.metrics.append(row)
        logger.info("phase %d epoch %d: loss %.4f acc %.4f feasible %.3f recovery %.3f", self.phase, row["epoch"],
                    row["train_loss"], ev.soft_acc, ev.feasible_rate, ev.planted_recovery)
        self.epoch += 1
        self._epoch_loss, self._epoch_count = 0.0, 0
        return row

    def fit(self, epochs: int, on_epoch=None) -> list[dict]:
        for _ in range(epochs):
            row = self.run_epoch()
            if on_epoch is not None:
                on_epoch(self, row)
        return self.metrics

    # -- evaluation ----------------------------------------------------

    def evaluate(self, enc, records, with_selection: bool | None = None, batch_size: int = 64) -> EvalResult:
        if with_selection is None:
            with_selection = not self.cfg.model.ablate_captions
        limit = self.cfg.train.val_limit
        if limit:
            enc, records = enc[:limit], records[:limit]
        acc, sels, gs = [], [], []
        for s in range(0, len(enc), batch_size):
            chunk = enc[s: s + batch_size]
            batch = collate(chunk, self.vocab.pad)
            tape = ad.Tape() if with_selection else None
            trace = mdl.forward(self.params, batch, self.cfg.model, tape, with_captioner=with_selection)
            acc.append(batch.scores[np.arange(len(chunk)), trace.pred])
            if with_selection:
                G = selection.grad_inner_products(trace)
                gs.append(G)
                sels.append(selection.select_batch(G, self.cfg.select.xi))
        acc = np.concatenate(acc)
        by_type: dict[str, list[float]] = {}
        for r, a in zip(records, acc):
            by_type.setdefault(r.question_type or "all", []).append(float(a))
        by_type_mean = {k: float(np.mean(v)) for k, v in sorted(by_type.items())}
        if not with_selection:
            nan = float("nan")
            return EvalResult(float(acc.mean()), by_type_mean, nan, nan, nan, np.full(len(enc), -1))
        sel = np.concatenate(sels)
        G = np.concatenate(gs)
        feasible = sel >= 0
        rel = np.array([e.relevant for e in enc])
        known = feasible & (rel >= 0)
        recovery = float((sel[known] == rel[known]).mean()) if known.any() else float("nan")
        return EvalResult(float(acc.mean()), by_type_mean, float(feasible.mean()), recovery, float(G.mean()), sel, G)


# ------------------------------------------------------------------ phases


def train_phase1(cfg: RunConfig, vocab: Vocab, answers: list[str], train: list[ExampleRecord],
                 val: list[ExampleRecord], out_dir: str | Path | None = None, epochs: int | None = None) -> Trainer:
    if cfg.train.limit:
        train = train[: cfg.train.limit]
    tr = Trainer(cfg, vocab, answers, train, val, phase=1)
    tr.fit(cfg.train.epochs if epochs is None else epochs, on_epoch=_writer(out_dir, "phase1"))
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "phase1.ckpt", tr.checkpoint())
    return tr


def _writer(out_dir, stem):
    if out_dir is None:
        return None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def on_epoch(tr: Trainer, row: dict) -> None:
        write_metrics(out / f"metrics_{stem}.csv", tr.metrics)

    return on_epoch


def generate_captions(params, cfg: RunConfig, vocab: Vocab, answers: list[str], records: list[ExampleRecord],
                      seed: int, batch_size: int = 64) -> list[list[tuple[str, float]]]:
    """Sample ``phase2.num_generated`` captions for each record from its question-attended objects."""
    p2 = cfg.phase2
    P = mdl.constants(params)
    out: list[list[tuple[str, float]]] = []
    for bi, s in enumerate(range(0, len(records), batch_size)):
        chunk = records[s: s + batch_size]
        batch = collate([encode_example(r, vocab, answers, cfg.data.max_question_len) for r in chunk], vocab.pad)
        _, att = mdl.encode(P, batch, cfg.model)
        gen = captioner.generate(P, att.Vq, batch.mask, vocab.start, vocab.end, mode="sample",
                                 count=p2.num_generated, max_len=p2.max_len, temperature=p2.temperature,
                                 seed=int(np.random.SeedSequence([seed, bi]).generate_state(1)[0]))
        for caps in gen:
            row = []
            for g in caps:
                words = decode_caption(g.tokens, vocab)
                # the caption encoder needs at least one word
                row.append((" ".join(words) if words else UNK, g.log_prob))
            out.append(row)
    return out


def write_caption_dump(path: str | Path, records: list[ExampleRecord], generated, split_name: str) -> None:
    lines = []
    for i, (r, caps) in enumerate(zip(records, generated)):
        lines.append(json.dumps({
            "index": i, "split": split_name, "image_id": r.image_id, "question": r.question,
            "captions": [{"text": t, "log_prob": lp} for t, lp in caps],
        }, separators=(",", ":")))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    tmp.replace(path)


def read_caption_dump(path: str | Path, n_records: int) -> list[list[str]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"caption dump missing: {path}")
    rows = [json.loads(x) for x in path.read_text().splitlines() if x.strip()]
    if len(rows) != n_records:
        raise ValueError(f"caption dump {path} has {len(rows)} entries, expected {n_records}")
    return [[c["text"] for c in r["captions"]] for r in sorted(rows, key=lambda r: r["index"])]


def train_phase2(ckpt: Checkpoint, cfg: RunConfig, vocab: Vocab, answers: list[str], train: list[ExampleRecord],
                 val: list[ExampleRecord], train_dump: str | Path, val_dump: str | Path,
                 out_dir: str | Path | None = None, epochs: int | None = None) -> Trainer:
    """Fine-tune on generated captions at ``phase2.lr_scale`` times the phase-1 learning rate."""
    if cfg.train.limit:
        train = train[: cfg.train.limit]
    train_caps = read_caption_dump(train_dump, len(train))
    val_caps = read_caption_dump(val_dump, len(val))
    tr = Trainer(cfg, vocab, answers, train, val, phase=2, train_captions=train_caps, val_captions=val_caps)
    if ckpt.vocab_hash != tr.vocab_hash:
        raise CheckpointError("vocabulary hash mismatch between checkpoint and dataset")
    tr.params = {k: v.copy() for k, v in ckpt.params.items()}
    tr.opt = copy.deepcopy(ckpt.optimizer)
    tr.opt.lr = ckpt.optimizer.lr * cfg.phase2.lr_scale
    tr.rng.bit_generator.state = ckpt.rng_state
    tr.fit(cfg.phase2.epochs if epochs is None else epochs, on_epoch=_writer(out_dir, "phase2"))
    if out_dir is not None:
        c = tr.checkpoint()
        c.extra["phase1_lr"] = ckpt.optimizer.lr
        save_checkpoint(Path(out_dir) / "phase2.ckpt", c)
    return tr
