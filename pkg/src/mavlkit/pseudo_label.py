"""Unknown-object pseudo-labels: confident proposals that overlap no known object."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Detection, GroundTruthBox, nms_class_agnostic, pairwise_iou

UNKNOWN = "unknown"


@dataclass(frozen=True)
class PseudoLabelConfig:
    min_score: float = 0.7
    max_known_iou: float = 0.5
    nms_thresh: float | None = None  # optional NMS among survivors

    def __post_init__(self):
        for name in ("min_score", "max_known_iou"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.nms_thresh is not None and not 0.0 <= self.nms_thresh <= 1.0:
            raise ValueError(f"nms_thresh={self.nms_thresh} outside [0, 1]")


def max_known_iou(proposals: Sequence[Detection], known_gt: Sequence[GroundTruthBox]) -> np.ndarray:
    if not proposals:
        return np.zeros(0)
    if not known_gt:
        return np.zeros(len(proposals))
    a = np.array([p.box.as_tuple() for p in proposals], dtype=np.float64)
    b = np.array([g.box.as_tuple() for g in known_gt], dtype=np.float64)
    return pairwise_iou(a, b).max(axis=1)


def generate_unknown_pseudo_labels(proposals: Sequence[Detection],
                                   known_gt: Sequence[GroundTruthBox],
                                   cfg: PseudoLabelConfig = PseudoLabelConfig()) -> list[Detection]:
    """Keep proposals scoring at least ``min_score`` whose best known-GT IoU is at most
    ``max_known_iou``; input order is preserved.
    """
    ids = {p.image_id for p in proposals} | {g.image_id for g in known_gt if g.known}
    if len(ids) > 1:
        raise ValueError("proposals and known boxes must come from one image")
    known = [g for g in known_gt if g.known]
    overlap = max_known_iou(proposals, known)
    kept = [p for p, o in zip(proposals, overlap) if p.score >= cfg.min_score and o <= cfg.max_known_iou]
    if cfg.nms_thresh is not None:
        survivors = {id(d) for d in nms_class_agnostic(kept, cfg.nms_thresh)}
        kept = [d for d in kept if id(d) in survivors]
    return kept


def pseudo_label_dataset(proposals: Sequence[Detection], known_gt: Sequence[GroundTruthBox],
                         cfg: PseudoLabelConfig = PseudoLabelConfig()) -> list[Detection]:
    """Per-image application over a multi-image proposal list, images in first-seen order."""
    by_img: dict = {}
    for p in proposals:
        by_img.setdefault(p.image_id, []).append(p)
    gt_by: dict = {}
    for g in known_gt:
        gt_by.setdefault(g.image_id, []).append(g)
    out = []
    for k, props in by_img.items():
        out.extend(generate_unknown_pseudo_labels(props, gt_by.get(k, []), cfg))
    return out
