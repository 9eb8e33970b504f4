"""Bipartite matching and the set-prediction loss summed over auxiliary heads."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor


@dataclass(frozen=True)
class LossWeights:
    w_cls: float = 2.0
    w_l1: float = 5.0
    w_giou: float = 2.0

    def __post_init__(self):
        vals = (self.w_cls, self.w_l1, self.w_giou)
        if min(vals) < 0 or max(vals) == 0:
            raise ValueError(f"loss weights must be nonnegative and not all zero: {vals}")


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]  # (prediction, target), ascending prediction index
    unmatched: list[int] = field(default_factory=list)

    @property
    def pred_indices(self) -> np.ndarray:
        return np.array([p for p, _ in self.pairs], dtype=np.int64)

    @property
    def target_indices(self) -> np.ndarray:
        return np.array([t for _, t in self.pairs], dtype=np.int64)


@dataclass
class DetectionSet:
    """One head's output: boxes in normalized cxcywh and objectness logits.

    Shapes are [Q,4]/[Q] or batched [B,Q,4]/[B,Q].
    """

    boxes: Tensor
    logits: Tensor

    @property
    def objectness(self) -> np.ndarray:
        return nx._sigmoid(self.logits.data)


# ---------------------------------------------------------------- Kuhn-Munkres


def _shortest_augmenting(cost: np.ndarray):
    """Min-cost assignment of every row of an [m, n] matrix (m <= n) to distinct columns.

    Returns (col_owner, u, v): col_owner[j] is the row using column j or -1, and
    (u, v) are dual potentials with u_i + v_j <= c_ij and v <= 0.
    """
    m, n = cost.shape
    u = np.zeros(m + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=np.int64)  # 1-based row per column, 0 = free
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, m + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used
            free[0] = False
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free[1:] & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv, np.inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    return owner[1:] - 1, u[1:], v[1:]


def hungarian(cost) -> Assignment:
    """Minimum-cost injection of targets (columns) into predictions (rows).

    Among all optimal assignments the one whose (prediction, target) pair list,
    sorted ascending, is lexicographically smallest is returned.
    """
    c = np.asarray(cost.data if isinstance(cost, Tensor) else cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"cost must be a matrix, got shape {c.shape}")
    n, m = c.shape
    if n < m:
        raise ValueError(f"more targets ({m}) than predictions ({n})")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix contains non-finite entries")
    if m == 0:
        return Assignment([], list(range(n)))
    owner, u, v = _shortest_augmenting(c.T)
    tol = 1e-9 * max(1.0, float(np.abs(c).max()))
    # square view: columns 0..m-1 are targets, m..n-1 interchangeable dummies
    tight = np.zeros((n, n), dtype=bool)
    tight[:, :m] = c - u[None, :] - v[:, None] <= tol
    tight[:, m:] = (v >= -tol)[:, None]
    match = np.full(n, -1, dtype=np.int64)
    for p, t in enumerate(owner):
        if t >= 0:
            match[p] = t
    dummy = m
    for p in range(n):
        if match[p] < 0:
            match[p] = dummy
            dummy += 1
    col_owner = np.empty(n, dtype=np.int64)
    col_owner[match] = np.arange(n)
    fixed_pred = np.zeros(n, dtype=bool)
    fixed_col = np.zeros(n, dtype=bool)

    def reroute(start: int, goal: int, banned_pred: int, banned_col: int):
        """Alternating path from an unmatched prediction to a freed column."""
        prev = {}
        seen_col = np.zeros(n, dtype=bool)
        queue = deque([start])
        while queue:
            x = queue.popleft()
            for col in np.flatnonzero(tight[x]):
                if fixed_col[col] or col == banned_col or seen_col[col]:
                    continue
                seen_col[col] = True
                prev[col] = x
                if col == goal:
                    path = [col]
                    while prev[path[-1]] != start:
                        path.append(match[prev[path[-1]]])
                    return path
                nxt = col_owner[col]
                if nxt != banned_pred and not fixed_pred[nxt]:
                    queue.append(nxt)
        return None

    for p in range(n):
        for t in np.flatnonzero(tight[p, :m]):
            if fixed_col[t]:
                continue
            if match[p] == t:
                break
            holder, freed = col_owner[t], match[p]
            path = reroute(holder, freed, p, t)
            if path is None:
                continue
            _apply_path(path, holder, match, col_owner, tight, fixed_col, p, t)
            break
        fixed_pred[p] = True
        fixed_col[match[p]] = True
    pairs = [(p, int(match[p])) for p in range(n) if match[p] < m]
    unmatched = [p for p in range(n) if match[p] >= m]
    return Assignment(pairs, unmatched)


def _apply_path(path, holder, match, col_owner, tight, fixed_col, p, t):
    """Flip an alternating path found by ``reroute`` and give column t to prediction p.

    ``path`` lists columns from the freed goal back towards ``holder``; the
    prediction reaching each column takes it.
    """
    # rebuild who reached which column by walking forward from holder
    cols = list(reversed(path))
    x = holder
    for col in cols:
        old = col_owner[col]
        match[x] = col
        col_owner[col] = x
        x = old
    match[p] = t
    col_owner[t] = p


def assignment_cost(cost: np.ndarray, a: Assignment) -> float:
    return float(sum(cost[p, t] for p, t in a.pairs))


# ---------------------------------------------------------------- costs and losses


def cxcywh_to_xyxy_np(b: np.ndarray) -> np.ndarray:
    return np.concatenate([b[..., :2] - b[..., 2:] / 2, b[..., :2] + b[..., 2:] / 2], axis=-1)


def pairwise_giou_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """GIoU matrix between xyxy arrays [n,4] and [m,4]."""
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    ew = np.maximum(a[:, None, 2], b[None, :, 2]) - np.minimum(a[:, None, 0], b[None, :, 0])
    eh = np.maximum(a[:, None, 3], b[None, :, 3]) - np.minimum(a[:, None, 1], b[None, :, 1])
    enclose = ew * eh
    with np.errstate(invalid="ignore", divide="ignore"):
        overlap = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
        out = overlap - (enclose - union) / np.where(enclose > 0, enclose, 1)
    return np.where(enclose > 0, out, 0.0)


def match_cost(boxes: np.ndarray, objectness: np.ndarray, targets: np.ndarray,
               w: LossWeights = LossWeights()) -> np.ndarray:
    """cost[q, t] for one image: boxes [Q,4] cxcywh, objectness [Q], targets [m,4] cxcywh."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    l1 = np.abs(boxes[:, None, :] - targets[None, :, :]).sum(-1)
    g = pairwise_giou_np(cxcywh_to_xyxy_np(boxes), cxcywh_to_xyxy_np(targets))
    obj = np.asarray(objectness, dtype=np.float64).reshape(-1, 1)
    return w.w_cls * -obj + w.w_l1 * l1 + w.w_giou * (1.0 - g)


def giou_tensor(pred: Tensor, target: np.ndarray) -> Tensor:
    """Row-wise GIoU between predicted cxcywh boxes [P,4] (differentiable) and targets."""
    t = cxcywh_to_xyxy_np(np.asarray(target, dtype=np.float64))
    c, half = pred[:, :2], pred[:, 2:] * 0.5
    lo, hi = c - half, c + half
    wh = pred[:, 2:]
    inter_wh = nx.relu(nx.minimum(hi, t[:, 2:]) - nx.maximum(lo, t[:, :2]))
    inter = inter_wh[:, 0] * inter_wh[:, 1]
    area_p = wh[:, 0] * wh[:, 1]
    area_t = (t[:, 2] - t[:, 0]) * (t[:, 3] - t[:, 1])
    union = area_p + area_t - inter
    enc_wh = nx.maximum(hi, t[:, 2:]) - nx.minimum(lo, t[:, :2])
    enclose = enc_wh[:, 0] * enc_wh[:, 1]
    return inter / union - (enclose - union) / enclose


def match_set(ds_boxes: np.ndarray, ds_obj: np.ndarray, targets: Sequence[np.ndarray],
              w: LossWeights) -> list[Assignment]:
    """Hungarian assignment per image for batched predictions [B,Q,4] / [B,Q]."""
    out = []
    for b, tg in enumerate(targets):
        tg = np.asarray(tg, dtype=np.float64).reshape(-1, 4)
        if len(tg) == 0:
            out.append(Assignment([], list(range(ds_boxes.shape[1]))))
            continue
        out.append(hungarian(match_cost(ds_boxes[b], ds_obj[b], tg, w)))
    return out


def single_set_loss(ds: DetectionSet, targets: Sequence[np.ndarray], w: LossWeights,
                    assignments: Sequence[Assignment] | None = None) -> Tensor:
    """Loss of one batched DetectionSet; mean over images of the per-image loss."""
    boxes, logits = ds.boxes, ds.logits
    if boxes.ndim == 2:
        boxes = nx.reshape(boxes, (1,) + boxes.shape)
        logits = nx.reshape(logits, (1,) + logits.shape)
        targets = [targets]
    B, Q = logits.shape
    if len(targets) != B:
        raise ValueError(f"{len(targets)} target lists for a batch of {B}")
    if assignments is None:
        assignments = match_set(boxes.data, nx._sigmoid(logits.data), targets, w)
    labels = np.zeros((B, Q))
    b_ix, q_ix, tgt, norm = [], [], [], []
    for b, (a, tg) in enumerate(zip(assignments, targets)):
        tg = np.asarray(tg, dtype=np.float64).reshape(-1, 4)
        for p, t in a.pairs:
            labels[b, p] = 1.0
            b_ix.append(b)
            q_ix.append(p)
            tgt.append(tg[t])
            norm.append(1.0 / len(tg))
    total = nx.tsum(nx.bce_with_logits(logits, labels)) * (w.w_cls / (B * Q))
    if b_ix:
        matched = boxes[np.array(b_ix), np.array(q_ix)]
        tgt = np.array(tgt)
        scale = np.array(norm) / B
        l1 = nx.tsum(nx.tabs(matched - tgt), axis=1)
        g = giou_tensor(matched, tgt)
        total = total + nx.tsum((l1 * w.w_l1 + (1.0 - g) * w.w_giou) * scale)
    return total


def set_loss(all_outputs: Sequence[DetectionSet], targets: Sequence[np.ndarray],
             w: LossWeights = LossWeights(), include: Sequence[bool] | None = None) -> Tensor:
    """Sum over heads of the matched set loss; each head is matched independently.

    ``include`` optionally masks individual head terms out of the sum.
    """
    total = None
    for f, ds in enumerate(all_outputs):
        if include is not None and not include[f]:
            continue
        term = single_set_loss(ds, targets, w)
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)
