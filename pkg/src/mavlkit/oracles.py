"""Slow reference implementations used to cross-check the fast paths.

Nothing here calls into the vectorized code it is meant to check: loops,
permutations and flood fills only.
"""

from __future__ import annotations

import itertools
import math
from collections import deque

import numpy as np


# ---------------------------------------------------------------- geometry


def iou_loop(a, b) -> float:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    inter = iw * ih if iw > 0 and ih > 0 else 0.0
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def giou_loop(a, b) -> float:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    inter = iw * ih if iw > 0 and ih > 0 else 0.0
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    enc = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    if enc <= 0:
        return 0.0
    return (inter / union if union > 0 else 0.0) - (enc - union) / enc


def nms_bruteforce(boxes, scores, thresh: float) -> list[int]:
    """Reference NMS: repeatedly take the best remaining box and drop its overlaps."""
    remaining = list(range(len(boxes)))
    keep = []
    while remaining:
        best = remaining[0]
        for i in remaining[1:]:
            if scores[i] > scores[best]:
                best = i
        keep.append(best)
        remaining = [i for i in remaining
                     if i != best and iou_loop(boxes[i], boxes[best]) <= thresh]
    return keep


# ---------------------------------------------------------------- matching


def best_assignment_bruteforce(cost) -> tuple[float, list[tuple[int, int]]]:
    """Exhaustive optimum over all injections of targets into predictions.

    Ties resolve to the lexicographically smallest sorted (prediction, target) list.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    best, best_pairs = None, None
    for perm in itertools.permutations(range(n), m):
        total = 0.0
        for t in range(m):
            total += cost[perm[t], t]
        pairs = sorted((perm[t], t) for t in range(m))
        if best is None or total < best or (total == best and pairs < best_pairs):
            best, best_pairs = total, pairs
    return best, best_pairs


def set_loss_bruteforce(boxes, objectness, targets, w_cls=2.0, w_l1=5.0, w_giou=2.0) -> float:
    """Single-image set loss with the matching found by permutation search."""
    boxes = np.asarray(boxes, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    Q, m = len(boxes), len(targets)

    def xyxy(b):
        return (b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2)

    cost = np.zeros((Q, m))
    for q in range(Q):
        for t in range(m):
            l1 = sum(abs(boxes[q][k] - targets[t][k]) for k in range(4))
            cost[q, t] = (-w_cls * objectness[q] + w_l1 * l1
                          + w_giou * (1 - giou_loop(xyxy(boxes[q]), xyxy(targets[t]))))
    _, pairs = best_assignment_bruteforce(cost) if m else (0.0, [])
    matched = {p for p, _ in pairs}
    bce = 0.0
    for q in range(Q):
        p = min(max(objectness[q], 1e-300), 1 - 1e-16)
        bce += -math.log(p) if q in matched else -math.log1p(-objectness[q])
    loss = w_cls * bce / Q
    for p, t in pairs:
        l1 = sum(abs(boxes[p][k] - targets[t][k]) for k in range(4))
        g = giou_loop(xyxy(boxes[p]), xyxy(targets[t]))
        loss += (w_l1 * l1 + w_giou * (1 - g)) / m
    return loss


# ---------------------------------------------------------------- metrics


def ap_by_operating_points(scores, is_tp, n_gt: int) -> float:
    """All-point AP from the (recall, precision) pair of every distinct score threshold.

    ``is_tp`` must already reflect the greedy matching in score order.
    """
    if n_gt == 0:
        return 1.0 if len(scores) == 0 else 0.0
    points = []
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, f in zip(scores, is_tp) if s >= t and f)
        n = sum(1 for s in scores if s >= t)
        points.append((tp / n_gt, tp / n))
    ap, prev_r = 0.0, 0.0
    for k, (r, _) in enumerate(points):
        if r > prev_r:
            ap += (r - prev_r) * max(p for _, p in points[k:])
            prev_r = r
    return ap


def greedy_match_loop(dets, gts, thresh: float):
    """dets: list of (score, box); gts: list of boxes. Returns per-det TP flags and per-GT matched flags."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][0], i))
    gt_used = [False] * len(gts)
    tp = [False] * len(dets)
    for i in order:
        best_j, best_iou = -1, thresh
        for j, g in enumerate(gts):
            if gt_used[j]:
                continue
            o = iou_loop(dets[i][1], g)
            if o > best_iou:
                best_j, best_iou = j, o
        if best_j >= 0:
            gt_used[best_j] = True
            tp[i] = True
    return tp, gt_used


# ---------------------------------------------------------------- masks


def flood_fill_count(mask: np.ndarray, connectivity: int = 8) -> int:
    mask = np.asarray(mask, dtype=bool)
    H, W = mask.shape
    seen = np.zeros_like(mask)
    if connectivity == 4:
        nbrs = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    else:
        nbrs = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if dy or dx]
    count = 0
    for r in range(H):
        for c in range(W):
            if mask[r, c] and not seen[r, c]:
                count += 1
                seen[r, c] = True
                queue = deque([(r, c)])
                while queue:
                    y, x = queue.popleft()
                    for dy, dx in nbrs:
                        yy, xx = y + dy, x + dx
                        if 0 <= yy < H and 0 <= xx < W and mask[yy, xx] and not seen[yy, xx]:
                            seen[yy, xx] = True
                            queue.append((yy, xx))
    return count


# ---------------------------------------------------------------- deformable attention


def bilinear_loop(fmap: np.ndarray, x: float, y: float) -> np.ndarray:
    H, W, C = fmap.shape
    u, v = x - 0.5, y - 0.5
    x0, y0 = math.floor(u), math.floor(v)
    fx, fy = u - x0, v - y0
    out = np.zeros(C)
    for yy, xx, wt in ((y0, x0, (1 - fx) * (1 - fy)), (y0, x0 + 1, fx * (1 - fy)),
                       (y0 + 1, x0, (1 - fx) * fy), (y0 + 1, x0 + 1, fx * fy)):
        if 0 <= yy < H and 0 <= xx < W:
            for c in range(C):
                out[c] += wt * fmap[yy, xx, c]
    return out


def msda_loop(queries, refs, levels, frames, params: dict, prefix: str, n_heads: int,
              n_points: int) -> np.ndarray:
    """Straight-loop deformable attention for a single image.

    queries [Q,d], refs [Q,2] normalized, levels list of [H,W,d] arrays, params
    name -> ndarray.
    """
    P = {k[len(prefix):]: np.asarray(getattr(v, "data", v)) for k, v in params.items()
         if k.startswith(prefix)}
    Q, d = queries.shape
    L = len(levels)
    M, K = n_heads, n_points
    dh = d // M
    values = [lv @ P["value.w"] + P["value.b"] for lv in levels]
    out = np.zeros((Q, d))
    for q in range(Q):
        off = (queries[q] @ P["offset.w"] + P["offset.b"]).reshape(M, L, K, 2)
        logit = (queries[q] @ P["weight.w"] + P["weight.b"]).reshape(M, L * K)
        head_cat = np.zeros(d)
        for m in range(M):
            mx = max(logit[m])
            ex = [math.exp(z - mx) for z in logit[m]]
            tot = sum(ex)
            acc = np.zeros(dh)
            for l in range(L):
                fw, fh = frames[l]
                for k in range(K):
                    a = ex[l * K + k] / tot
                    x = refs[q][0] * fw + off[m, l, k, 0]
                    y = refs[q][1] * fh + off[m, l, k, 1]
                    acc += a * bilinear_loop(values[l][:, :, m * dh:(m + 1) * dh], x, y)
            head_cat[m * dh:(m + 1) * dh] = acc
        out[q] = head_cat @ P["out.w"] + P["out.b"]
    return out
