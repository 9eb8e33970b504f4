"""Class-agnostic evaluation: query pooling, top-N, AP/recall, size buckets, tiling."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Hashable, Mapping, Sequence

import numpy as np

from .geometry import Detection, GroundTruthBox, nms_class_agnostic, pairwise_iou


@dataclass(frozen=True)
class EvalConfig:
    iou_thresh: float = 0.5
    top_n: int = 50
    score_thresh: float | None = None
    nms_thresh: float = 0.5
    interpolation: str = "all-point"
    per_image_recall: bool = False

    def __post_init__(self):
        for name in ("iou_thresh", "nms_thresh"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.score_thresh is not None and not 0.0 <= self.score_thresh <= 1.0:
            raise ValueError(f"score_thresh={self.score_thresh} outside [0, 1]")
        if self.top_n < 1:
            raise ValueError("top_n must be >= 1")
        if self.interpolation not in ("all-point", "11-point"):
            raise ValueError(f"unknown interpolation {self.interpolation!r}")


@dataclass
class PRCurve:
    points: list[tuple[float, float]]  # (recall, precision) after each ranked detection
    ap: float
    tp: int
    fp: int
    n_gt: int


@dataclass(frozen=True)
class SizeBuckets:
    small: float = 0.05
    large: float = 0.20

    def __post_init__(self):
        if not 0.0 < self.small < self.large < 1.0:
            raise ValueError(f"need 0 < small < large < 1, got {self.small}, {self.large}")

    def bucket(self, area_fraction: float) -> str:
        if area_fraction < self.small:
            return "small"
        return "medium" if area_fraction <= self.large else "large"


# ---------------------------------------------------------------- helpers


def _by_image(items) -> dict:
    out: dict = {}
    for it in items:
        out.setdefault(it.image_id, []).append(it)
    return out


def rank(dets: Sequence[Detection]) -> list[Detection]:
    """Score-descending, ties keep input order."""
    order = np.argsort(-np.array([d.score for d in dets], dtype=np.float64), kind="stable")
    return [dets[i] for i in order]


def top_n(dets: Sequence[Detection], n: int) -> list[Detection]:
    """Highest-scoring ``n`` detections of every image, images in first-seen order."""
    out = []
    for ds in _by_image(dets).values():
        out.extend(rank(ds)[:n])
    return out


def apply_score_thresh(dets: Sequence[Detection], cfg: EvalConfig) -> list[Detection]:
    if cfg.score_thresh is None:
        return list(dets)
    return [d for d in dets if d.score > cfg.score_thresh]


def _boxes(items) -> np.ndarray:
    return np.array([it.box.as_tuple() for it in items], dtype=np.float64).reshape(-1, 4)


def greedy_match(dets: Sequence[Detection], gts: Sequence[GroundTruthBox],
                 iou_thresh: float) -> tuple[np.ndarray, np.ndarray]:
    """One-image greedy matching in score order.

    Returns TP flags aligned with ``dets`` and matched flags aligned with ``gts``.
    Each detection takes the unmatched GT of highest IoU, if that IoU exceeds the threshold.
    """
    tp = np.zeros(len(dets), dtype=bool)
    used = np.zeros(len(gts), dtype=bool)
    if not len(dets) or not len(gts):
        return tp, used
    ious = pairwise_iou(_boxes(dets), _boxes(gts))
    order = np.argsort(-np.array([d.score for d in dets]), kind="stable")
    for i in order:
        row = np.where(used, -1.0, ious[i])
        j = int(np.argmax(row))
        if row[j] > iou_thresh:
            used[j] = True
            tp[i] = True
    return tp, used


@dataclass
class _ImageMatch:
    dets: list[Detection]
    tp: np.ndarray
    gts: list[GroundTruthBox]
    matched: np.ndarray
    det_index: list[int]  # positions of ``dets`` in the caller's list


def match_all(dets: Sequence[Detection], gts: Sequence[GroundTruthBox], iou_thresh: float,
              threads: int = 1) -> list[_ImageMatch]:
    """Per-image matching; results come back in a fixed image order regardless of threads."""
    pos_by: dict = {}
    for i, d in enumerate(dets):
        pos_by.setdefault(d.image_id, []).append(i)
    g_by = _by_image(gts)
    ids = list(g_by) + [k for k in pos_by if k not in g_by]

    def one(k):
        pos = pos_by.get(k, [])
        ds, gs = [dets[i] for i in pos], g_by.get(k, [])
        tp, used = greedy_match(ds, gs, iou_thresh)
        return _ImageMatch(ds, tp, gs, used, pos)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(one, ids))
    return [one(k) for k in ids]


def _ap_from_flags(scores: np.ndarray, tp: np.ndarray, n_gt: int, interpolation: str) -> PRCurve:
    if n_gt == 0:
        return PRCurve([], 1.0 if len(scores) == 0 else 0.0, 0, int(len(scores)), 0)
    order = np.argsort(-scores, kind="stable")
    tp = tp[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, 1)
    points = list(zip(recall.tolist(), precision.tolist()))
    if not len(scores):
        return PRCurve(points, 0.0, 0, 0, n_gt)
    if interpolation == "11-point":
        ap = 0.0
        for t in np.linspace(0, 1, 11):
            sel = precision[recall >= t]
            ap += (sel.max() if sel.size else 0.0) / 11.0
    else:
        envelope = np.maximum.accumulate(precision[::-1])[::-1]
        steps = np.diff(np.concatenate([[0.0], recall]))
        ap = float(np.sum(steps * envelope))
    return PRCurve(points, float(ap), int(ctp[-1]), int(cfp[-1]), n_gt)


# ---------------------------------------------------------------- metrics


def average_precision(dets: Sequence[Detection], gts: Sequence[GroundTruthBox],
                      cfg: EvalConfig = EvalConfig(), threads: int = 1) -> PRCurve:
    """AP over all images at ``cfg.iou_thresh``; detections should already be truncated."""
    matches = match_all(dets, gts, cfg.iou_thresh, threads)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    flags = np.zeros(len(dets), dtype=bool)
    for m in matches:
        flags[m.det_index] = m.tp
    n_gt = sum(len(m.gts) for m in matches)
    return _ap_from_flags(scores, flags, n_gt, cfg.interpolation)


def _recall(matches: list[_ImageMatch], per_image: bool) -> float:
    if per_image:
        vals = [m.matched.mean() for m in matches if len(m.gts)]
        return float(np.mean(vals)) if vals else 1.0
    n_gt = sum(len(m.gts) for m in matches)
    if n_gt == 0:
        return 1.0
    return sum(int(m.matched.sum()) for m in matches) / n_gt


def recall_at_n(dets: Sequence[Detection], gts: Sequence[GroundTruthBox],
                cfg: EvalConfig = EvalConfig(), n: int | None = None, threads: int = 1) -> float:
    n = cfg.top_n if n is None else n
    if n < 1:
        raise ValueError("n must be >= 1")
    return _recall(match_all(top_n(dets, n), gts, cfg.iou_thresh, threads), cfg.per_image_recall)


def recall_curve(dets: Sequence[Detection], gts: Sequence[GroundTruthBox], cfg: EvalConfig,
                 ns: Sequence[int]) -> list[tuple[int, float]]:
    if list(ns) != sorted(ns):
        raise ValueError("ns must be sorted ascending")
    return [(int(n), recall_at_n(dets, gts, cfg, n)) for n in ns]


def size_bucket_recall(dets: Sequence[Detection], gts: Sequence[GroundTruthBox],
                       image_sizes: Mapping[Hashable, tuple[int, int]],
                       cfg: EvalConfig = EvalConfig(), buckets: SizeBuckets = SizeBuckets(),
                       n: int | None = None) -> tuple[float, float, float]:
    """Recall of small, medium and large GT under one global matching (NaN for an empty bucket)."""
    counts = bucket_counts(dets, gts, image_sizes, cfg, buckets, n)
    return tuple(hit / tot if tot else math.nan for hit, tot in counts.values())


def bucket_counts(dets, gts, image_sizes, cfg: EvalConfig = EvalConfig(),
                  buckets: SizeBuckets = SizeBuckets(), n: int | None = None) -> dict:
    """{bucket: (matched, total)} using the top-``n`` matching once for all buckets."""
    n = cfg.top_n if n is None else n
    out = {"small": [0, 0], "medium": [0, 0], "large": [0, 0]}
    for m in match_all(top_n(dets, n), gts, cfg.iou_thresh):
        for g, hit in zip(m.gts, m.matched):
            if g.image_id not in image_sizes:
                raise KeyError(f"no image size for image {g.image_id!r}")
            W, H = image_sizes[g.image_id]
            b = buckets.bucket(g.box.area / float(W * H))
            out[b][0] += int(hit)
            out[b][1] += 1
    return {k: tuple(v) for k, v in out.items()}


def recall_by_category(dets: Sequence[Detection], gts: Sequence[GroundTruthBox],
                       cfg: EvalConfig = EvalConfig(), n: int | None = None) -> dict:
    n = cfg.top_n if n is None else n
    hits: dict = {}
    for m in match_all(top_n(dets, n), gts, cfg.iou_thresh):
        for g, hit in zip(m.gts, m.matched):
            h, t = hits.get(g.category_id, (0, 0))
            hits[g.category_id] = (h + int(hit), t + 1)
    return {k: h / t for k, (h, t) in hits.items()}


# ---------------------------------------------------------------- pooling and tiling


def combine_query_detections(per_source: Sequence[Sequence[Detection]],
                             cfg: EvalConfig = EvalConfig()) -> list[Detection]:
    """Pool detections from several text queries of one image, then NMS and keep the top N."""
    pooled = [d for src in per_source for d in src]
    if len({d.image_id for d in pooled}) > 1:
        raise ValueError("combine_query_detections expects detections from a single image")
    kept = nms_class_agnostic(apply_score_thresh(pooled, cfg), cfg.nms_thresh)
    return rank(kept)[: cfg.top_n]


def tile_grid(tiles: int, width: int, height: int) -> tuple[int, int]:
    """(rows, cols) for a square k*k grid or a 2k*k grid laid along the longer side."""
    if tiles < 1:
        raise ValueError("tiles must be >= 1")
    k = math.isqrt(tiles)
    if k * k == tiles:
        return k, k
    k = math.isqrt(tiles // 2)
    if tiles % 2 == 0 and 2 * k * k == tiles:
        return (k, 2 * k) if width >= height else (2 * k, k)
    raise ValueError(f"{tiles} tiles do not form a k x k or k x 2k grid")


def tile_origins(tiles: int, width: int, height: int) -> list[tuple[int, int, int, int]]:
    """Non-overlapping crops (x0, y0, x1, y1) covering the image, row-major."""
    rows, cols = tile_grid(tiles, width, height)
    if cols > width or rows > height:
        raise ValueError(f"image {width}x{height} too small for a {rows}x{cols} grid")
    xs = [round(width * c / cols) for c in range(cols + 1)]
    ys = [round(height * r / rows) for r in range(rows + 1)]
    return [(xs[c], ys[r], xs[c + 1], ys[r + 1]) for r in range(rows) for c in range(cols)]


def tiled_inference(image: np.ndarray, detector: Callable[[np.ndarray], Sequence[Detection]],
                    tiles: int, cfg: EvalConfig = EvalConfig(), image_id=0) -> list[Detection]:
    """Run ``detector`` on each crop, shift boxes back to image coordinates, then NMS and top N."""
    H, W = image.shape[:2]
    pooled = []
    for x0, y0, x1, y1 in tile_origins(tiles, W, H):
        for d in detector(image[y0:y1, x0:x1]):
            pooled.append(Detection(image_id, d.box.translate(x0, y0), d.score, d.source_query))
    kept = nms_class_agnostic(apply_score_thresh(pooled, cfg), cfg.nms_thresh)
    return rank(kept)[: cfg.top_n]


# ---------------------------------------------------------------- reports


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.generic):
        return _clean(v.item())
    return v


def evaluate(dets: Sequence[Detection], gts: Sequence[GroundTruthBox],
             image_sizes: Mapping[Hashable, tuple[int, int]], cfg: EvalConfig = EvalConfig(),
             curve_ns: Sequence[int] = (10, 30, 50), buckets: SizeBuckets = SizeBuckets(),
             threads: int = 1) -> dict:
    """The full report: AP and recall at the protocol's top N, recall curve, buckets, categories."""
    kept = top_n(apply_score_thresh(dets, cfg), cfg.top_n)
    pr = average_precision(kept, gts, cfg, threads)
    small, medium, large = size_bucket_recall(kept, gts, image_sizes, cfg, buckets)
    return {
        "ap50": pr.ap,
        "r50": recall_at_n(kept, gts, cfg, cfg.top_n, threads),
        "curve": [[n, r] for n, r in recall_curve(kept, gts, cfg, curve_ns)],
        "buckets": {"small": small, "medium": medium, "large": large},
        "per_category": {str(k): v for k, v in sorted(
            recall_by_category(kept, gts, cfg).items(), key=lambda kv: str(kv[0]))},
        "counts": {"tp": pr.tp, "fp": pr.fp, "gt": pr.n_gt},
        "config": asdict(cfg),
    }


def report_json(report: dict) -> str:
    return json.dumps(_clean(report), sort_keys=True, indent=1, allow_nan=False) + "\n"


def curve_csv(curve: Sequence[Sequence[float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n", "recall"])
    for n, r in curve:
        w.writerow([n, repr(float(r))])
    return buf.getvalue()
