"""Gradient-alignment caption selection and the joint loss.

For each example and gold caption i the selector scores

    g_i = sum_k <d s_pred / d v^q_k, d log p(W_i) / d v^q_k>

and picks the highest-scoring caption among those with ``g_i > xi``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class SelectionReport:
    inner_products: np.ndarray  # (C,)
    xi: float
    selected: int | None

    @property
    def feasible(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.inner_products > self.xi)]


def grad_inner_products(trace) -> np.ndarray:
    """(B, C) matrix of g_i for every example of a batch trace.

    Examples in a batch never interact, so the gradient of the batch-summed
    logit with respect to V^q holds each example's own gradient in its rows.
    The decoder reads V^q through a per-caption copy, so one sweep from the
    summed caption losses yields every caption's gradient separately.
    """
    if trace.Vq is None or trace.Vq.id is None or trace.Vq_dec is None:
        raise ValueError("trace lacks recorded V^q nodes; run forward on a tape with the captioner")
    tape = trace.tape
    B, K, H = trace.Vq.shape
    C = trace.nll.shape[1]
    g_ans = tape.backward(ad.sum(trace.s_pred), wrt=[trace.Vq])[trace.Vq]
    g_cap = tape.backward(ad.sum(trace.nll), wrt=[trace.Vq_dec])[trace.Vq_dec].reshape(B, C, K, H)
    mask = trace.mask[:, None, :, None]
    # d log p = -d nll
    return -np.einsum("bkh,bckh->bc", g_ans, g_cap * mask)


def select(g, xi: float = 0.0) -> int | None:
    """Lowest index attaining the max over ``{i : g_i > xi}``; None if infeasible."""
    g = np.asarray(g, dtype=np.float64)
    if g.size == 0:
        raise ValueError("no inner products to select from")
    if xi < 0:
        raise ValueError("xi must be nonnegative")
    feasible = g > xi
    if not feasible.any():
        return None
    return int(np.argmax(np.where(feasible, g, -np.inf)))


def select_batch(G: np.ndarray, xi: float = 0.0) -> np.ndarray:
    """Row-wise :func:`select`, with -1 for infeasible rows."""
    out = np.full(G.shape[0], -1, dtype=np.int64)
    for b, row in enumerate(G):
        i = select(row, xi)
        if i is not None:
            out[b] = i
    return out


def joint_loss(vqa_loss: Tensor, caption_losses: Tensor, selected) -> Tensor:
    """L = L_vqa + L_c[i*], or L_vqa alone when nothing was selected.

    Scalar form: ``caption_losses`` is (C,) and ``selected`` an int or None.
    Batch form: (B,) / (B, C) and an int array with -1 for none; returns the
    batch mean.
    """
    if np.ndim(selected) == 0:
        if selected is None:
            return vqa_loss
        C = caption_losses.shape[-1]
        if not 0 <= int(selected) < C:
            raise IndexError(f"selected caption {selected} out of range for {C} captions")
        return vqa_loss + caption_losses[int(selected)]
    sel = np.asarray(selected)
    B, C = caption_losses.shape
    if np.any(sel >= C) or np.any(sel < -1):
        raise IndexError(f"selected caption index out of range for {C} captions")
    per_example = vqa_loss
    if (sel >= 0).any():
        onehot = np.zeros((B, C))
        rows = np.flatnonzero(sel >= 0)
        onehot[rows, sel[rows]] = 1.0
        per_example = vqa_loss + ad.sum(caption_losses * onehot, axis=1)
    return ad.scale(ad.sum(per_example), 1.0 / B)


class SelectionLog:
    """Optional per-step CSV: step, example id, g_1..g_C, i*, feasible count."""

    def __init__(self, path: str | Path, num_captions: int):
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(["step", "example_id"] + [f"g_{i + 1}" for i in range(num_captions)]
                         + ["selected", "feasible_count"])

    def write(self, step: int, example_ids, G: np.ndarray, selected: np.ndarray, xi: float) -> None:
        for ex, row, s in zip(example_ids, G, selected):
            self._w.writerow([step, int(ex)] + [repr(float(x)) for x in row] + [int(s), int((row > xi).sum())])

    def close(self) -> None:
        self._fh.close()
