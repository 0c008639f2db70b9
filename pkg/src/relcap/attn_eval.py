"""Attention faithfulness: box rasterization onto a 14x14 grid and exact EMD.

The transport problem between two grids is solved with a transportation
simplex (MODI potentials, spanning-tree basis) in floating point, so the
distance is exact up to rounding and behaves as a metric in tests.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

GRID = 14
MASS_EPS = 1e-12


def rasterize(boxes, weights, grid: int = GRID, normalize: bool = True) -> np.ndarray:
    """Spread each weight over its box in proportion to per-cell overlap area.

    Boxes are normalized ``[x, y, w, h]``; the result is indexed ``[row, col]``
    with rows along y.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(boxes) != len(weights):
        raise ValueError(f"{len(boxes)} boxes but {len(weights)} weights")
    if np.any(weights < 0):
        raise ValueError("attention weights must be nonnegative")
    out = np.zeros((grid, grid))
    edges = np.arange(grid, dtype=np.float64)
    for (x, y, w, h), wt in zip(boxes, weights):
        if w <= 0 or h <= 0:
            raise ValueError(f"degenerate box {[x, y, w, h]}")
        if x < -1e-12 or y < -1e-12 or x + w > 1 + 1e-12 or y + h > 1 + 1e-12:
            raise ValueError(f"box {[x, y, w, h]} leaves the unit square")
        if wt == 0:
            continue
        ox = np.clip(np.minimum((x + w) * grid, edges + 1) - np.maximum(x * grid, edges), 0, None)
        oy = np.clip(np.minimum((y + h) * grid, edges + 1) - np.maximum(y * grid, edges), 0, None)
        out += wt * np.outer(oy, ox) / (w * h * grid * grid)
    if normalize:
        total = out.sum()
        if total <= 0:
            raise ValueError("attention grid has zero total mass")
        out = out / total
    return out


def ground_distance(grid: int = GRID) -> np.ndarray:
    """Euclidean distance between cell centers, in cell units."""
    rr, cc = np.divmod(np.arange(grid * grid), grid)
    pts = np.stack([rr, cc], axis=1).astype(np.float64)
    return np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))


def _check_normalized(p: np.ndarray, name: str) -> None:
    if np.any(p < 0):
        raise ValueError(f"{name} has negative mass")
    if abs(p.sum() - 1.0) > 1e-6:
        raise ValueError(f"{name} is not normalized (sum {p.sum():.9f})")


def emd(p, q, cost: np.ndarray | None = None) -> float:
    """Exact earth mover's distance between two normalized grids."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"grid shapes differ: {p.shape} vs {q.shape}")
    _check_normalized(p, "P")
    _check_normalized(q, "Q")
    if cost is None:
        if p.ndim != 2 or p.shape[0] != p.shape[1]:
            raise ValueError("square grid expected when no cost matrix is given")
        cost = _cached_distance(p.shape[0])
    p, q = p.reshape(-1), q.reshape(-1)
    src = np.flatnonzero(p > MASS_EPS)
    dst = np.flatnonzero(q > MASS_EPS)
    a, b = p[src], q[dst]
    # equalize totals after dropping dust so the problem is balanced
    a = a / a.sum()
    b = b / b.sum()
    flow = transport(a, b, cost[np.ix_(src, dst)])
    return float((flow * cost[np.ix_(src, dst)]).sum())


_DIST_CACHE: dict[int, np.ndarray] = {}


def _cached_distance(grid: int) -> np.ndarray:
    if grid not in _DIST_CACHE:
        _DIST_CACHE[grid] = ground_distance(grid)
    return _DIST_CACHE[grid]


def transport(a: np.ndarray, b: np.ndarray, cost: np.ndarray, max_iter: int = 100_000) -> np.ndarray:
    """Optimal flow for the balanced transportation problem (supplies ``a``, demands ``b``)."""
    m, n = len(a), len(b)
    flow = np.zeros((m, n))
    basis = _initial_basis(a.copy(), b.copy(), cost, flow)
    tol = 1e-12 * max(1.0, float(np.abs(cost).max(initial=0.0)))
    for _ in range(max_iter):
        u, v = _potentials(basis, cost, m, n)
        reduced = cost - u[:, None] - v[None, :]
        i, j = np.unravel_index(np.argmin(reduced), reduced.shape)
        if reduced[i, j] >= -tol:
            return flow
        cycle = _cycle(basis, m, i, j)
        minus = cycle[1::2]
        theta_idx = min(range(len(minus)), key=lambda k: (flow[minus[k]], k))
        theta = flow[minus[theta_idx]]
        for k, cell in enumerate(cycle):
            flow[cell] += theta if k % 2 == 0 else -theta
        leaving = minus[theta_idx]
        flow[leaving] = 0.0
        basis.remove(leaving)
        basis.add((i, j))
    raise RuntimeError("transportation simplex did not converge")


def _initial_basis(a, b, cost, flow) -> set[tuple[int, int]]:
    """Least-cost method; closes one line per allocation so the basis is a spanning tree."""
    m, n = len(a), len(b)
    basis: set[tuple[int, int]] = set()
    row_open = np.ones(m, bool)
    col_open = np.ones(n, bool)
    rows_left, cols_left = m, n
    for flat in np.argsort(cost, axis=None, kind="stable"):
        i, j = divmod(int(flat), n)
        if not (row_open[i] and col_open[j]):
            continue
        x = min(a[i], b[j])
        flow[i, j] = x
        a[i] -= x
        b[j] -= x
        basis.add((i, j))
        if rows_left == 1 and cols_left == 1:
            break
        if cols_left == 1 or (a[i] <= b[j] and rows_left > 1):
            row_open[i] = False
            rows_left -= 1
        else:
            col_open[j] = False
            cols_left -= 1
    _complete_tree(basis, m, n, cost)
    return basis


def _complete_tree(basis: set[tuple[int, int]], m: int, n: int, cost) -> None:
    parent = list(range(m + n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, j in sorted(basis):
        parent[find(i)] = find(m + j)
    need = m + n - 1 - len(basis)
    if need <= 0:
        return
    for flat in np.argsort(cost, axis=None, kind="stable"):
        i, j = divmod(int(flat), n)
        ri, rj = find(i), find(m + j)
        if ri != rj:
            parent[ri] = rj
            basis.add((i, j))
            need -= 1
            if need == 0:
                return


def _adjacency(basis, m):
    adj: dict[int, list[int]] = {}
    for i, j in basis:
        adj.setdefault(i, []).append(m + j)
        adj.setdefault(m + j, []).append(i)
    return adj


def _potentials(basis, cost, m, n):
    u = np.zeros(m)
    v = np.zeros(n)
    adj = _adjacency(basis, m)
    seen = {0}
    stack = [0]
    while stack:
        x = stack.pop()
        for y in adj.get(x, ()):
            if y in seen:
                continue
            seen.add(y)
            if x < m:
                v[y - m] = cost[x, y - m] - u[x]
            else:
                u[y] = cost[y, x - m] - v[x - m]
            stack.append(y)
    return u, v


def _cycle(basis, m, i, j) -> list[tuple[int, int]]:
    """Cells of the pivot cycle, starting with the entering cell (i, j)."""
    adj = _adjacency(basis, m)
    start, goal = m + j, i
    prev = {start: None}
    stack = [start]
    while stack:
        x = stack.pop()
        if x == goal:
            break
        for y in adj.get(x, ()):
            if y not in prev:
                prev[y] = x
                stack.append(y)
    path = [goal]
    while prev[path[-1]] is not None:
        path.append(prev[path[-1]])
    # path runs row i -> ... -> column j; consecutive nodes are basic cells
    cells = [(i, j)]
    for x, y in zip(path, path[1:]):
        cells.append((x, y - m) if x < m else (y, x - m))
    return cells


# ------------------------------------------------------------- evaluation


@dataclass
class AttentionReport:
    rows: list[tuple[int, float, bool]]  # (example index, emd, caa flag)
    skipped: int

    @property
    def mean(self) -> float:
        return float(np.mean([r[1] for r in self.rows])) if self.rows else float("nan")

    def summary(self) -> dict:
        return {"mean": self.mean, "count": len(self.rows), "skipped": self.skipped}

    def write(self, csv_path: str | Path, json_path: str | Path | None = None) -> None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["example_id", "emd", "caa_flag"])
            for idx, d, flag in self.rows:
                w.writerow([idx, repr(d), int(flag)])
        if json_path is not None:
            Path(json_path).write_text(json.dumps(self.summary(), sort_keys=True) + "\n")


def object_attention(alpha_qv: np.ndarray, alpha_cv: np.ndarray | None) -> np.ndarray:
    """Top-down weights per object, before (``alpha_cv=None``) or after adjustment.

    Without adjustment each factor is 1.0 and the question attention is what
    remains; with it, the effective weight of object k in the attended
    feature is proportional to ``alpha_qv[k] * alpha_cv[k]``.
    """
    w = np.array(alpha_qv, dtype=np.float64)
    if alpha_cv is not None:
        w = w * alpha_cv
    return w / w.sum(axis=-1, keepdims=True)


def evaluate_attention(params, records, vocab, answers, model_cfg, caa: bool, batch_size: int = 64) -> AttentionReport:
    """Mean EMD between rasterized model attention and the records' attention truth."""
    from . import model as mdl
    from .data import collate, encode_example

    usable = [i for i, r in enumerate(records) if r.attention_truth is not None and r.boxes is not None]
    skipped = len(records) - len(usable)
    if skipped:
        logger.info("skipping %d records without attention truth", skipped)
    rows = []
    for start in range(0, len(usable), batch_size):
        idxs = usable[start: start + batch_size]
        batch = collate([encode_example(records[i], vocab, answers) for i in idxs])
        trace = mdl.forward(params, batch, model_cfg, with_captioner=False)
        a_qv = trace.alpha_qv.value
        a_cv = trace.alpha_cv.value if (caa and trace.alpha_cv is not None) else None
        weights = object_attention(a_qv, a_cv)
        for row, i in enumerate(idxs):
            rec = records[i]
            n = len(rec.boxes)
            grid = rasterize(rec.boxes, weights[row, :n])
            truth = np.asarray(rec.attention_truth, dtype=np.float64).reshape(GRID, GRID)
            rows.append((i, emd(grid, truth), caa))
    return AttentionReport(rows, skipped)
