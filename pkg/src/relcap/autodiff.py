"""Tape-based reverse-mode differentiation over float64 numpy arrays.

A :class:`Tape` records every primitive applied to its tensors.  Tensors that
were created without a tape are constants: operations on constants only are
evaluated eagerly and never recorded, which is how inference (caption
generation, evaluation) runs without paying for the record.

The neural blocks at the bottom of the module (``fc``, ``gru_step``,
``lstm_step``, ``embedding``) are thin compositions of the primitives and take
their weights from a mapping ``name -> Tensor``.
"""

from __future__ import annotations

import os
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64
LRELU_SLOPE = 0.01


class ShapeError(ValueError):
    pass


class Tensor:
    """A float64 array, optionally bound to a :class:`Tape` as node ``id``."""

    __slots__ = ("value", "tape", "id", "name")
    __array_priority__ = 100

    def __init__(self, value, tape: "Tape | None" = None, id: int | None = None, name: str | None = None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.tape = tape
        self.id = id
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = "const" if self.id is None else f"node {self.id}"
        return f"Tensor(shape={self.shape}, {tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(np.array(x, dtype=DTYPE))


class Gradients:
    """Result of :meth:`Tape.backward`: gradient arrays keyed by node id."""

    def __init__(self, tape: "Tape", grads: dict[int, np.ndarray]):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        if t.id is None or t.tape is not self._tape:
            raise KeyError("tensor is not recorded on this tape")
        g = self._grads.get(t.id)
        return np.zeros_like(t.value) if g is None else g

    def get(self, t: Tensor) -> np.ndarray:
        return self[t]

    def by_id(self, node_id: int) -> np.ndarray | None:
        return self._grads.get(node_id)

    def for_params(self, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
        return {k: self[v] for k, v in params.items()}


class Tape:
    """Append-only record of primitive applications.

    Node ids are positions in ``nodes``; a node's inputs always have smaller
    ids, so reverse creation order is a valid topological order.
    """

    def __init__(self, check_finite: bool | None = None):
        self.nodes: list[tuple[str, tuple[Tensor, ...], Callable | None, Tensor]] = []
        if check_finite is None:
            check_finite = os.environ.get("RELCAP_LOG", "").lower() == "debug"
        self.check_finite = check_finite

    def variable(self, value, name: str | None = None) -> Tensor:
        t = Tensor(np.array(value, dtype=DTYPE), self, len(self.nodes), name)
        self.nodes.append(("leaf", (), None, t))
        return t

    def watch(self, params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        return {k: self.variable(v, k) for k, v in params.items()}

    def record(self, tag: str, value: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
        if self.check_finite and not np.all(np.isfinite(value)):
            raise FloatingPointError(f"{tag} produced non-finite values")
        t = Tensor(value, self, len(self.nodes))
        self.nodes.append((tag, inputs, vjp, t))
        return t

    def backward(self, loss: Tensor, wrt: Sequence[Tensor] | None = None, seed: np.ndarray | None = None) -> Gradients:
        """Reverse sweep from ``loss``.

        ``wrt`` only bounds the sweep: nodes created before the earliest
        requested tensor are not visited.  ``seed`` replaces the implicit
        unit cotangent (and lifts the scalar requirement).
        """
        if not self.nodes:
            raise RuntimeError("backward on an empty record")
        if loss.tape is not self or loss.id is None:
            raise RuntimeError("loss is not recorded on this tape")
        if seed is None:
            if loss.size != 1:
                raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
            seed = np.ones_like(loss.value)
        stop = 0
        if wrt:
            stop = min(t.id for t in wrt)
        grads: dict[int, np.ndarray] = {loss.id: np.asarray(seed, dtype=DTYPE)}
        nodes = self.nodes
        for i in range(loss.id, stop - 1, -1):
            g = grads.get(i)
            if g is None:
                continue
            tag, inputs, vjp, _ = nodes[i]
            if vjp is None:
                continue
            need = tuple(p.tape is self and p.id is not None and p.id >= stop for p in inputs)
            if not any(need):
                continue
            for parent, pg, wanted in zip(inputs, vjp(g, need), need):
                if not wanted or pg is None:
                    continue
                prev = grads.get(parent.id)
                grads[parent.id] = pg if prev is None else prev + pg
        return Gradients(self, grads)


def _tape_of(inputs: Iterable[Tensor]) -> Tape | None:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise RuntimeError("tensors from different tapes cannot be combined")
            tape = t.tape
    return tape


def _emit(tag: str, value: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    tape = _tape_of(inputs)
    if tape is None:
        return Tensor(value)
    return tape.record(tag, value, inputs, vjp)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(tag: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{tag}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.value + b.value, (a, b),
                 lambda g, need: (need[0] and _unbroadcast(g, sa), need[1] and _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.value - b.value, (a, b),
                 lambda g, need: (need[0] and _unbroadcast(g, sa), need[1] and _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value
    return _emit(
        "mul", av * bv, (a, b),
        lambda g, need: (need[0] and _unbroadcast(g * bv, av.shape), need[1] and _unbroadcast(g * av, bv.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", a.value * c, (a,), lambda g, need: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., n] @ b[n, m]``."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value

    def vjp(g, need):
        ga = g @ bv.T if need[0] else None
        gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, bv.shape[1]) if need[1] else None
        return ga, gb

    return _emit("matmul", av @ bv, (a, b), vjp)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(x != y for i, (x, y) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _emit(
        "concat", np.concatenate([t.value for t in tensors], axis=ax), tensors,
        lambda g, need: tuple(np.split(g, splits, axis=ax)),
    )


def index(a: Tensor, key) -> Tensor:
    """Basic slicing / integer indexing (no repeated fancy indices)."""
    shape = a.shape
    try:
        out = a.value[key]
    except IndexError as exc:
        raise ShapeError(f"slice: bad key {key!r} for shape {shape}") from exc

    def vjp(g, need):
        full = np.zeros(shape, dtype=DTYPE)
        full[key] = g
        return (full,)

    return _emit("slice", np.array(out, dtype=DTYPE), (a,), vjp)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the backward pass."""
    idx = np.asarray(indices, dtype=np.int64)
    n = a.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"take: index out of range for axis of length {n}")
    shape = a.shape
    ax = axis % a.ndim

    def vjp(g, need):
        full = np.zeros(shape, dtype=DTYPE)
        gm = np.moveaxis(g, list(range(ax, ax + idx.ndim)), list(range(idx.ndim)))
        fm = np.moveaxis(full, ax, 0)
        np.add.at(fm, idx, gm)
        return (full,)

    return _emit("take", np.take(a.value, idx, axis=ax), (a,), vjp)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: token index out of range for vocab of size {table.shape[0]}")
    return take(table, ids, axis=0)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from None
    return _emit("reshape", out, (a,), lambda g, need: (g.reshape(old),))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def vjp(g, need):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", np.asarray(a.value.sum(axis=axis, keepdims=keepdims)), (a,), vjp)


def maximum(tensors: Sequence[Tensor]) -> Tensor:
    """Elementwise max across same-shaped tensors; ties route to the first."""
    tensors = tuple(as_tensor(t) for t in tensors)
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ShapeError(f"max: incompatible shapes {tensors[0].shape} and {t.shape}")
    stacked = np.stack([t.value for t in tensors])
    arg = stacked.argmax(axis=0)

    def vjp(g, need):
        return tuple(np.where(arg == i, g, 0.0) for i in range(len(tensors)))

    return _emit("max", stacked.max(axis=0), tensors, vjp)


def max_over(a: Tensor, axis: int) -> Tensor:
    """Elementwise max over one axis (same semantics as :func:`maximum`)."""
    ax = axis % a.ndim
    arg = a.value.argmax(axis=ax)
    out = np.take_along_axis(a.value, np.expand_dims(arg, ax), ax).squeeze(ax)
    shape = a.shape

    def vjp(g, need):
        full = np.zeros(shape, dtype=DTYPE)
        np.put_along_axis(full, np.expand_dims(arg, ax), np.expand_dims(g, ax), ax)
        return (full,)

    return _emit("max", out, (a,), vjp)


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(
        "where", np.where(cond, a.value, b.value), (a, b),
        lambda g, need: (need[0] and _unbroadcast(np.where(cond, g, 0.0), sa),
                         need[1] and _unbroadcast(np.where(cond, 0.0, g), sb)),
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.value)
    return _emit("sigmoid", y, (a,), lambda g, need: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.value)
    return _emit("tanh", y, (a,), lambda g, need: (g * (1.0 - y * y),))


def log(a: Tensor) -> Tensor:
    x = a.value
    return _emit("log", np.log(x), (a,), lambda g, need: (g / x,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.value)
    return _emit("exp", y, (a,), lambda g, need: (g * y,))


def lrelu(a: Tensor, slope: float = LRELU_SLOPE) -> Tensor:
    x = a.value
    d = np.where(x > 0, 1.0, slope)
    return _emit("lrelu", x * d, (a,), lambda g, need: (g * d,))


def _masked_logits(x: np.ndarray, mask) -> tuple[np.ndarray, np.ndarray | None]:
    if mask is None:
        return x, None
    m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not m.any(axis=-1).all():
        raise ValueError("softmax: every entry along the last axis is masked")
    return np.where(m, x, -np.inf), m


def softmax(a: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis; masked-out entries get exactly zero."""
    x, m = _masked_logits(a.value, mask)
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    y = z / z.sum(axis=-1, keepdims=True)

    def vjp(g, need):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", y, (a,), vjp)


def log_softmax(a: Tensor, mask=None) -> Tensor:
    x, m = _masked_logits(a.value, mask)
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    p = np.exp(y)
    if m is not None:
        y = np.where(m, y, 0.0)

    def vjp(g, need):
        if m is not None:
            g = np.where(m, g, 0.0)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax", y, (a,), vjp)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise ``-(s log σ(x) + (1-s) log(1-σ(x)))`` in the stable logit form."""
    s = np.asarray(targets.value if isinstance(targets, Tensor) else targets, dtype=DTYPE)
    x = logits.value
    if s.shape != x.shape:
        raise ShapeError(f"bce: incompatible shapes {x.shape} and {s.shape}")
    out = np.maximum(x, 0.0) - x * s + np.log1p(np.exp(-np.abs(x)))
    return _emit("bce", out, (logits,), lambda g, need: (g * (_sigmoid(x) - s),))


def detach(a: Tensor) -> Tensor:
    """Copy of ``a`` as a fresh leaf on the same tape (gradients stop here)."""
    if a.tape is None:
        return Tensor(a.value)
    return a.tape.variable(a.value)


# ------------------------------------------------------------------ blocks


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def init_fc(rng: np.random.Generator, name: str, n_in: int, n_out: int) -> dict[str, np.ndarray]:
    return {f"{name}.W": glorot(rng, n_in, n_out), f"{name}.b": np.zeros(n_out)}


def fc(x: Tensor, p: Mapping[str, Tensor], name: str, slope: float = LRELU_SLOPE) -> Tensor:
    """``LReLU(x W + b)``."""
    W = p[f"{name}.W"]
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"fc {name}: input dim {x.shape[-1]} != layer input dim {W.shape[0]}")
    return lrelu(matmul(x, W) + p[f"{name}.b"], slope)


def linear(x: Tensor, p: Mapping[str, Tensor], name: str) -> Tensor:
    W = p[f"{name}.W"]
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear {name}: input dim {x.shape[-1]} != layer input dim {W.shape[0]}")
    return matmul(x, W) + p[f"{name}.b"]


def init_gru(rng: np.random.Generator, name: str, n_in: int, hidden: int) -> dict[str, np.ndarray]:
    # gate order along the last axis: z, r, candidate
    return {
        f"{name}.W": np.concatenate([glorot(rng, n_in, hidden) for _ in range(3)], axis=1),
        f"{name}.U": np.concatenate([glorot(rng, hidden, hidden) for _ in range(2)], axis=1),
        f"{name}.Uh": glorot(rng, hidden, hidden),
        f"{name}.b": np.zeros(3 * hidden),
    }


def gru_input_proj(x: Tensor, p: Mapping[str, Tensor], name: str) -> Tensor:
    """``x W + b`` for all three gates; hoisted out of the recurrence."""
    W = p[f"{name}.W"]
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"gru {name}: input dim {x.shape[-1]} != cell input dim {W.shape[0]}")
    return matmul(x, W) + p[f"{name}.b"]


def gru_cell(xproj: Tensor, h: Tensor, p: Mapping[str, Tensor], name: str) -> Tensor:
    H = h.shape[-1]
    if xproj.shape[-1] != 3 * H:
        raise ShapeError(f"gru {name}: hidden dim {H} does not match cell ({xproj.shape[-1] // 3})")
    zr = sigmoid(xproj[..., : 2 * H] + matmul(h, p[f"{name}.U"]))
    z, r = zr[..., :H], zr[..., H:]
    cand = tanh(xproj[..., 2 * H:] + matmul(r * h, p[f"{name}.Uh"]))
    return h + z * (cand - h)


def gru_step(x: Tensor, h: Tensor, p: Mapping[str, Tensor], name: str) -> Tensor:
    """One GRU update: h' = (1-z)h + z h~."""
    return gru_cell(gru_input_proj(x, p, name), h, p, name)


def gru_sequence(xs: Tensor, h0: Tensor, p: Mapping[str, Tensor], name: str, mask=None) -> list[Tensor]:
    """Fold ``gru_step`` over axis 1 of ``xs`` (batch, time, feat).

    Returns the hidden state after every step (``[h0]`` for an empty
    sequence).  Where ``mask[b, t]`` is false the state is carried over
    unchanged, so padding never enters the recurrence.
    """
    T = xs.shape[1]
    hs = [h0]
    if T == 0:
        return hs
    proj = gru_input_proj(xs, p, name)
    h = h0
    for t in range(T):
        h_new = gru_cell(proj[:, t], h, p, name)
        if mask is not None:
            m = np.asarray(mask)[:, t]
            if not m.all():
                h_new = where(m[:, None], h_new, h)
        h = h_new
        hs.append(h)
    return hs


def init_lstm(rng: np.random.Generator, name: str, n_in: int, hidden: int) -> dict[str, np.ndarray]:
    # gate order: input, forget, cell candidate, output
    return {
        f"{name}.W": np.concatenate([glorot(rng, n_in, hidden) for _ in range(4)], axis=1),
        f"{name}.U": np.concatenate([glorot(rng, hidden, hidden) for _ in range(4)], axis=1),
        f"{name}.b": np.zeros(4 * hidden),
    }


def lstm_step(x: Tensor, state: tuple[Tensor, Tensor], p: Mapping[str, Tensor], name: str) -> tuple[Tensor, Tensor]:
    h, c = state
    W = p[f"{name}.W"]
    H = h.shape[-1]
    if x.shape[-1] != W.shape[0] or W.shape[1] != 4 * H:
        raise ShapeError(f"lstm {name}: input {x.shape} / hidden {h.shape} do not match cell {W.shape}")
    pre = matmul(x, W) + matmul(h, p[f"{name}.U"]) + p[f"{name}.b"]
    ifo = sigmoid(concat([pre[..., : 2 * H], pre[..., 3 * H:]], axis=-1))
    i, f, o = ifo[..., :H], ifo[..., H: 2 * H], ifo[..., 2 * H:]
    g = tanh(pre[..., 2 * H: 3 * H])
    c_new = f * c + i * g
    return o * tanh(c_new), c_new
