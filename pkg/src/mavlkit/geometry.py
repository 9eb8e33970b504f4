"""Axis-aligned boxes, overlap measures and class-agnostic NMS."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

BOX_FORMATS = ("xyxy", "cxcywh", "xywh")


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    normalized: bool = False

    def __post_init__(self):
        for name in ("x_min", "y_min", "x_max", "y_max"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.x_min <= self.x_max and self.y_min <= self.y_max):
            raise ValueError(f"inverted box {self.as_tuple()}")
        if self.normalized and not all(0.0 <= v <= 1.0 for v in self.as_tuple()):
            raise ValueError(f"normalized box outside the unit square: {self.as_tuple()}")

    @classmethod
    def from_array(cls, a, normalized: bool = False) -> "Box":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]), normalized)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def translate(self, dx: float, dy: float) -> "Box":
        return Box(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def clamp(self, width: float, height: float) -> "Box":
        cx = lambda v: min(max(v, 0.0), width)  # noqa: E731
        cy = lambda v: min(max(v, 0.0), height)  # noqa: E731
        return Box(cx(self.x_min), cy(self.y_min), cx(self.x_max), cy(self.y_max))


@dataclass(frozen=True)
class Detection:
    image_id: Hashable
    box: Box
    score: float
    source_query: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class GroundTruthBox:
    image_id: Hashable
    box: Box
    category_id: Hashable = 0
    known: bool = True


def iou(a: Box, b: Box) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def giou(a: Box, b: Box) -> float:
    """IoU minus the fraction of the enclosing box not covered by the union."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    enclose = (max(a.x_max, b.x_max) - min(a.x_min, b.x_min)) * (
        max(a.y_max, b.y_max) - min(a.y_min, b.y_min))
    if enclose <= 0:
        return 0.0
    overlap = inter / union if union > 0 else 0.0
    return overlap - (enclose - union) / enclose


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix between xyxy arrays of shape [n,4] and [m,4]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def convert(box, src: str, dst: str) -> np.ndarray:
    """Convert [..., 4] box arrays between xyxy, cxcywh and xywh."""
    if src not in BOX_FORMATS or dst not in BOX_FORMATS:
        raise ValueError(f"unknown box format {src!r} -> {dst!r}")
    b = np.asarray(box.as_tuple() if isinstance(box, Box) else box, dtype=np.float64)
    if b.shape[-1] != 4:
        raise ValueError(f"boxes need 4 coordinates, got shape {b.shape}")
    if src == "xyxy":
        x0, y0, x1, y1 = np.moveaxis(b, -1, 0)
        w, h = x1 - x0, y1 - y0
    elif src == "xywh":
        x0, y0, w, h = np.moveaxis(b, -1, 0)
    else:
        cx, cy, w, h = np.moveaxis(b, -1, 0)
    if np.any(w < 0) or np.any(h < 0):
        raise ValueError("negative box width or height")
    if src == "cxcywh":
        x0, y0 = cx - w / 2, cy - h / 2
    if dst == "xyxy":
        out = (x0, y0, x0 + w, y0 + h) if src != "xyxy" else (x0, y0, x1, y1)
    elif dst == "xywh":
        out = (x0, y0, w, h)
    else:
        out = (cx, cy, w, h) if src == "cxcywh" else (x0 + w / 2, y0 + h / 2, w, h)
    return np.stack(out, axis=-1)


def _sorted_order(scores: Sequence[float]) -> np.ndarray:
    # stable sort on -score: equal scores keep input order
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def nms_indices(boxes: np.ndarray, scores: Sequence[float], iou_thresh: float) -> list[int]:
    """Indices kept by greedy NMS, in kept (score-descending) order."""
    if not 0.0 <= iou_thresh <= 1.0:
        raise ValueError(f"iou_thresh {iou_thresh} outside [0, 1]")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(boxes) == 0:
        return []
    order = _sorted_order(scores)
    ious = pairwise_iou(boxes, boxes)
    suppressed = np.zeros(len(boxes), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= ious[i] > iou_thresh
    return keep


def nms_class_agnostic(dets: Sequence[Detection], iou_thresh: float) -> list[Detection]:
    boxes = np.array([d.box.as_tuple() for d in dets], dtype=np.float64).reshape(-1, 4)
    return [dets[i] for i in nms_indices(boxes, [d.score for d in dets], iou_thresh)]
