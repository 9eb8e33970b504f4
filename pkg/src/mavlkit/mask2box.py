"""Binary masks to boxes through two-pass union-find connected-component labelling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Box, Detection

FOREGROUND_THRESHOLD = 128


@dataclass(frozen=True)
class BinaryMask:
    data: np.ndarray  # [H, W] bool, row-major

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise ValueError(f"mask must be a non-empty 2-D grid, got shape {a.shape}")
        object.__setattr__(self, "data", a.astype(bool))

    @classmethod
    def from_gray(cls, img: np.ndarray, threshold: int = FOREGROUND_THRESHOLD) -> "BinaryMask":
        img = np.asarray(img)
        if img.dtype != np.uint8:
            raise ValueError("grayscale masks must be 8-bit")
        return cls(img >= threshold)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class Component:
    label: int
    pixel_count: int
    box: Box


def _find(parent: list[int], x: int) -> int:
    root = x
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        parent[x], x = root, parent[x]
    return root


def _union(parent: list[int], a: int, b: int) -> int:
    ra, rb = _find(parent, a), _find(parent, b)
    if ra == rb:
        return ra
    # smaller provisional label becomes the root
    if ra < rb:
        parent[rb] = ra
        return ra
    parent[ra] = rb
    return rb


def connected_components(mask, connectivity: int = 8) -> tuple[np.ndarray, list[Component]]:
    """Label foreground pixels; labels are dense from 1 in raster order, background is 0."""
    if connectivity not in (4, 8):
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    m = mask.data if isinstance(mask, BinaryMask) else BinaryMask(mask).data
    H, W = m.shape
    labels = np.zeros((H, W), dtype=np.int64)
    parent = [0]
    # already-visited neighbours in raster order
    nbrs = [(-1, 0), (0, -1)] if connectivity == 4 else [(-1, -1), (-1, 0), (-1, 1), (0, -1)]
    rows = m.tolist()
    lab = labels.tolist()
    for r in range(H):
        row, lrow = rows[r], lab[r]
        for c in range(W):
            if not row[c]:
                continue
            found = 0
            for dr, dc in nbrs:
                rr, cc = r + dr, c + dc
                if 0 <= rr and 0 <= cc < W:
                    l = lab[rr][cc]
                    if l:
                        found = l if not found else _union(parent, found, l)
            if not found:
                found = len(parent)
                parent.append(found)
            lrow[c] = found
    # second pass: resolve to roots, then renumber densely by first appearance
    dense: dict[int, int] = {}
    resolved = np.zeros(len(parent), dtype=np.int64)
    for l in range(1, len(parent)):
        root = _find(parent, l)
        if root not in dense:
            dense[root] = len(dense) + 1
        resolved[l] = dense[root]
    labels = resolved[np.asarray(lab, dtype=np.int64)]
    return labels, _components(labels, len(dense))


def _components(labels: np.ndarray, n: int) -> list[Component]:
    if n == 0:
        return []
    ys, xs = np.nonzero(labels)
    ls = labels[ys, xs]
    counts = np.bincount(ls, minlength=n + 1)
    x0 = np.full(n + 1, np.iinfo(np.int64).max)
    y0 = np.full(n + 1, np.iinfo(np.int64).max)
    x1 = np.full(n + 1, -1)
    y1 = np.full(n + 1, -1)
    np.minimum.at(x0, ls, xs)
    np.minimum.at(y0, ls, ys)
    np.maximum.at(x1, ls, xs)
    np.maximum.at(y1, ls, ys)
    return [Component(l, int(counts[l]), Box(float(x0[l]), float(y0[l]),
                                             float(x1[l] + 1), float(y1[l] + 1)))
            for l in range(1, n + 1)]


def components_to_boxes(components: list[Component], min_area: int = 1, labels=None,
                        score_map=None, image_id=0) -> list[Detection]:
    """One detection per component with at least ``min_area`` pixels.

    Score is 1.0, or the mean of ``score_map`` over the component when a map and the
    label grid are supplied.
    """
    if min_area < 0:
        raise ValueError("min_area must be >= 0")
    if score_map is not None and labels is None:
        raise ValueError("a score map needs the label grid")
    out = []
    for comp in components:
        if comp.pixel_count < min_area:
            continue
        score = 1.0
        if score_map is not None:
            score = float(np.clip(np.mean(np.asarray(score_map)[labels == comp.label]), 0.0, 1.0))
        out.append(Detection(image_id, comp.box, score))
    return out


def mask_to_boxes(mask, connectivity: int = 8, min_area: int = 1, score_map=None,
                  image_id=0) -> list[Detection]:
    labels, comps = connected_components(mask, connectivity)
    return components_to_boxes(comps, min_area, labels, score_map, image_id)


@dataclass(frozen=True)
class BlobDetector:
    """A detector with a fixed working resolution, standing in for a learned model.

    The input is block-averaged down so its longer side fits ``input_size``; cells whose
    foreground coverage reaches ``min_coverage`` are candidates. Each candidate region is
    then boxed tightly on the full-resolution foreground. Objects much smaller than one
    block therefore go unseen, which is what tiling is meant to fix.
    """

    input_size: int = 32
    threshold: int = FOREGROUND_THRESHOLD
    min_coverage: float = 0.5

    def factor(self, height: int, width: int) -> int:
        return max(1, math.ceil(max(height, width) / self.input_size))

    def __call__(self, image: np.ndarray, image_id=0) -> list[Detection]:
        fg = np.asarray(image) >= self.threshold
        H, W = fg.shape
        f = self.factor(H, W)
        hp, wp = -(-H // f) * f, -(-W // f) * f
        padded = np.zeros((hp, wp), dtype=np.float64)
        padded[:H, :W] = fg
        cover = padded.reshape(hp // f, f, wp // f, f).mean(axis=(1, 3))
        labels, comps = connected_components(cover >= self.min_coverage, 8)
        dets = []
        for comp in comps:
            b = comp.box
            # grow the candidate by one cell before the full-resolution fit
            ys = slice(max(int(b.y_min) - 1, 0) * f, min(int(b.y_max) + 1, hp // f) * f)
            xs = slice(max(int(b.x_min) - 1, 0) * f, min(int(b.x_max) + 1, wp // f) * f)
            window = fg[ys, xs]
            if not window.any():
                continue
            rr, cc = np.nonzero(window)
            box = Box(xs.start + cc.min(), ys.start + rr.min(),
                      xs.start + cc.max() + 1.0, ys.start + rr.max() + 1.0)
            dets.append(Detection(image_id, box, float(cover[labels == comp.label].max())))
        return dets
