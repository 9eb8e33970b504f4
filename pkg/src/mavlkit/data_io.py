"""Annotation and detection files, synthetic shape scenes, caption-structure ablations."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np

from .geometry import Box, Detection, GroundTruthBox, nms_indices

log = logging.getLogger(__name__)

SMALL_BOUND = 0.05
LARGE_BOUND = 0.20


class SchemaError(ValueError):
    """A file does not follow the expected JSON layout."""


class ValidationError(ValueError):
    """A file parses but its contents are inconsistent."""


@dataclass(frozen=True)
class ImageInfo:
    id: Hashable
    width: int
    height: int
    file_name: str = ""


@dataclass
class Dataset:
    images: list[ImageInfo]
    annotations: list[GroundTruthBox] = field(default_factory=list)
    categories: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [im.id for im in self.images]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate image ids")
        known = set(ids)
        for a in self.annotations:
            if a.image_id not in known:
                raise ValidationError(f"annotation refers to unknown image_id {a.image_id!r}")

    def image(self, image_id) -> ImageInfo:
        for im in self.images:
            if im.id == image_id:
                return im
        raise KeyError(image_id)

    def gt_by_image(self) -> dict:
        out = {im.id: [] for im in self.images}
        for a in self.annotations:
            out[a.image_id].append(a)
        return out


@dataclass(frozen=True)
class CaptionGroup:
    """Boxes that one token query (a caption stand-in) refers to in one image.

    ``boxes`` are xyxy pixels, shape [k, 4]. An empty ``query`` marks a caption-free group.
    """

    image_id: Hashable
    query: tuple[str, ...]
    boxes: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if len(b) == 0:
            raise ValidationError(f"caption group for image {self.image_id!r} has no boxes")
        object.__setattr__(self, "boxes", b)
        object.__setattr__(self, "query", tuple(self.query))


# ---------------------------------------------------------------- JSON files


def _parse_json(path) -> object:
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise SchemaError(f"{path}: not UTF-8 (byte {exc.start})") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise SchemaError(f"{path}: malformed JSON at byte {offset}: {exc.msg}") from exc


def _require(obj: dict, key: str, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaError(f"{where}: missing field {key!r}")
    return obj[key]


def _number(v, where: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise SchemaError(f"{where}: expected a finite number, got {v!r}")
    return float(v)


def _xywh_box(bbox, where: str) -> tuple[float, float, float, float]:
    if not isinstance(bbox, list) or len(bbox) != 4:
        raise SchemaError(f"{where}: bbox must be a list of 4 numbers")
    x, y, w, h = (_number(v, where) for v in bbox)
    if w < 0 or h < 0:
        raise ValidationError(f"{where}: negative bbox width or height")
    return x, y, w, h


def dataset_from_dict(doc, source: str = "<memory>") -> Dataset:
    for key in ("images", "annotations", "categories"):
        if not isinstance(_require(doc, key, source), list):
            raise SchemaError(f"{source}: {key!r} must be a list")
    images = []
    for i, im in enumerate(doc["images"]):
        where = f"{source}: images[{i}]"
        w, h = _require(im, "width", where), _require(im, "height", where)
        if not (isinstance(w, int) and isinstance(h, int)) or w < 1 or h < 1:
            raise ValidationError(f"{where}: width and height must be positive integers")
        images.append(ImageInfo(_require(im, "id", where), w, h, str(im.get("file_name", ""))))
    sizes = {im.id: (im.width, im.height) for im in images}
    if len(sizes) != len(images):
        raise ValidationError(f"{source}: duplicate image ids")
    categories = {}
    for i, c in enumerate(doc["categories"]):
        where = f"{source}: categories[{i}]"
        categories[_require(c, "id", where)] = str(_require(c, "name", where))

    anns, seen, crowd = [], set(), 0
    for i, a in enumerate(doc["annotations"]):
        where = f"{source}: annotations[{i}]"
        aid = _require(a, "id", where)
        if aid in seen:
            raise ValidationError(f"{where}: duplicate annotation id {aid!r}")
        seen.add(aid)
        iid = _require(a, "image_id", where)
        if iid not in sizes:
            raise ValidationError(f"{where}: image_id {iid!r} not in images")
        x, y, w, h = _xywh_box(_require(a, "bbox", where), where)
        if a.get("iscrowd", 0) or a.get("ignore", 0):
            crowd += 1
            continue
        W, H = sizes[iid]
        box = Box(x, y, x + w, y + h).clamp(W, H)
        anns.append(GroundTruthBox(iid, box, a.get("category_id", 0)))
    if crowd:
        log.info("dropped %d crowd/ignore annotations from %s", crowd, source)
    return Dataset(images, anns, categories)


def load_ground_truth(path) -> Dataset:
    return dataset_from_dict(_parse_json(path), str(path))


def dataset_to_dict(ds: Dataset) -> dict:
    anns = []
    for k, a in enumerate(ds.annotations, start=1):
        b = a.box
        anns.append({"id": k, "image_id": a.image_id, "category_id": a.category_id,
                     "bbox": [b.x_min, b.y_min, b.width, b.height]})
    return {
        "images": [{"id": im.id, "width": im.width, "height": im.height,
                    "file_name": im.file_name} for im in ds.images],
        "annotations": anns,
        "categories": [{"id": k, "name": v} for k, v in ds.categories.items()],
    }


def detections_to_list(dets: Sequence[Detection], category: str | None = None) -> list[dict]:
    out = []
    for d in dets:
        b = d.box
        rec = {"image_id": d.image_id, "bbox": [b.x_min, b.y_min, b.width, b.height],
               "xyxy": [b.x_min, b.y_min, b.x_max, b.y_max], "score": d.score}
        if d.source_query is not None:
            rec["query"] = d.source_query
        if category is not None:
            rec["category"] = category
        out.append(rec)
    return out


def detections_from_list(doc, source: str = "<memory>") -> list[Detection]:
    if not isinstance(doc, list):
        raise SchemaError(f"{source}: detections file must hold a JSON array")
    dets = []
    for i, rec in enumerate(doc):
        where = f"{source}: [{i}]"
        iid = _require(rec, "image_id", where)
        x, y, w, h = _xywh_box(_require(rec, "bbox", where), where)
        score = _number(_require(rec, "score", where), where)
        if not 0.0 <= score <= 1.0:
            raise ValidationError(f"{where}: score {score} outside [0, 1]")
        if "xyxy" in rec:
            # exact corners written by save_detections; bbox stays authoritative for other tools
            xyxy = rec["xyxy"]
            if not isinstance(xyxy, list) or len(xyxy) != 4:
                raise SchemaError(f"{where}: xyxy must be a list of 4 numbers")
            x0, y0, x1, y1 = (_number(v, where) for v in xyxy)
            tol = 1e-9 * max(1.0, abs(x1), abs(y1))
            if abs(x0 - x) > tol or abs(y0 - y) > tol or abs(x1 - x - w) > tol or abs(y1 - y - h) > tol:
                raise ValidationError(f"{where}: xyxy disagrees with bbox")
            box = Box(x0, y0, x1, y1)
        else:
            box = Box(x, y, x + w, y + h)
        query = rec.get("query")
        dets.append(Detection(iid, box, score, None if query is None else str(query)))
    return dets


def save_detections(path, dets: Sequence[Detection], category: str | None = None) -> None:
    # repr-based float output keeps every bit of each float64
    Path(path).write_text(json.dumps(detections_to_list(dets, category), indent=1) + "\n",
                          encoding="utf-8")


def load_proposals(path) -> list[Detection]:
    return detections_from_list(_parse_json(path), str(path))


# ---------------------------------------------------------------- PGM


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("PGM output needs a 2-D uint8 array")
    H, W = img.shape
    Path(path).write_bytes(f"P5\n{W} {H}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields_, pos = [], 0
    while len(fields_) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise SchemaError(f"{path}: truncated PGM header")
        fields_.append(data[start:pos])
    if fields_[0] != b"P5":
        raise SchemaError(f"{path}: only binary PGM (P5) is supported")
    W, H, maxval = (int(f) for f in fields_[1:])
    if maxval != 255:
        raise SchemaError(f"{path}: only 8-bit PGM (maxval 255) is supported")
    pos += 1  # single whitespace after maxval
    body = data[pos:pos + W * H]
    if len(body) != W * H:
        raise SchemaError(f"{path}: expected {W * H} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(H, W).copy()


# ---------------------------------------------------------------- synthetic scenes


QUERY_RULES = ("ALL", "SMALL", "LARGE")


def size_class(box: Box, width: int, height: int,
               small: float = SMALL_BOUND, large: float = LARGE_BOUND) -> str:
    frac = box.area / float(width * height)
    if frac < small:
        return "small"
    return "large" if frac > large else "medium"


def rule_matches(rule: str, box: Box, width: int, height: int) -> bool:
    if rule == "ALL":
        return True
    cls = size_class(box, width, height)
    if rule == "SMALL":
        return cls == "small"
    if rule == "LARGE":
        return cls == "large"
    raise ValueError(f"unknown query rule {rule!r}")


@dataclass(frozen=True)
class SyntheticSpec:
    n_images: int = 2000
    image_size: int = 64
    min_shapes: int = 2
    max_shapes: int = 6
    # probability of drawing a small / medium / large shape
    size_mix: tuple[float, float, float] = (0.5, 0.3, 0.2)
    # side-length ranges in pixels for each size class
    small_side: tuple[int, int] = (6, 11)
    medium_side: tuple[int, int] = (15, 26)
    large_side: tuple[int, int] = (30, 40)
    max_large: int = 1
    noise: int = 60
    rules: tuple[str, ...] = QUERY_RULES
    seed: int = 0

    def __post_init__(self):
        if self.n_images < 1:
            raise ValueError("n_images must be >= 1")
        if self.min_shapes < 1 or self.max_shapes < self.min_shapes:
            raise ValueError("shape count range must satisfy 1 <= min_shapes <= max_shapes")
        if min(self.size_mix) < 0 or sum(self.size_mix) <= 0:
            raise ValueError("size_mix must be nonnegative with a positive sum")
        area = float(self.image_size ** 2)
        if self.small_side[1] ** 2 >= SMALL_BOUND * area:
            raise ValueError("small shapes would not fall under the small-area bound")
        if self.large_side[0] ** 2 <= LARGE_BOUND * area and self.size_mix[2] > 0:
            raise ValueError("large shapes would not exceed the large-area bound")
        if self.large_side[1] > self.image_size or self.medium_side[1] > self.image_size:
            raise ValueError("shapes larger than the image")
        for r in self.rules:
            if r not in QUERY_RULES:
                raise ValueError(f"unknown query rule {r!r}")


@dataclass
class SyntheticData:
    dataset: Dataset
    groups: list[CaptionGroup]
    images: np.ndarray  # [N, H, W] uint8
    masks: np.ndarray  # [N, H, W] bool, shape pixels only

    def split(self, n_train: int) -> tuple["SyntheticData", "SyntheticData"]:
        ids = [im.id for im in self.dataset.images]
        return self._subset(ids[:n_train], slice(0, n_train)), self._subset(
            ids[n_train:], slice(n_train, len(ids)))

    def _subset(self, ids, sl) -> "SyntheticData":
        keep = set(ids)
        ds = Dataset([im for im in self.dataset.images if im.id in keep],
                     [a for a in self.dataset.annotations if a.image_id in keep],
                     dict(self.dataset.categories))
        return SyntheticData(ds, [g for g in self.groups if g.image_id in keep],
                             self.images[sl], self.masks[sl])


def _ellipse_mask(w: int, h: int) -> np.ndarray:
    ys = (np.arange(h) + 0.5 - h / 2) / (h / 2)
    xs = (np.arange(w) + 0.5 - w / 2) / (w / 2)
    return ys[:, None] ** 2 + xs[None, :] ** 2 <= 1.0


def _render_scene(rng: np.random.Generator, spec: SyntheticSpec):
    S = spec.image_size
    img = rng.integers(0, spec.noise + 1, size=(S, S)).astype(np.uint8)
    occupied = np.zeros((S, S), dtype=bool)
    shapes_mask = np.zeros((S, S), dtype=bool)
    n = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    mix = np.asarray(spec.size_mix, dtype=np.float64)
    mix = mix / mix.sum()
    ranges = (spec.small_side, spec.medium_side, spec.large_side)
    # distinct gray levels, all well above the noise floor
    levels = rng.permutation(np.arange(spec.noise + 40, 256, 12))[:n]
    classes = rng.choice(3, size=n, p=mix)
    if spec.max_large >= 0:
        large = np.flatnonzero(classes == 2)[spec.max_large:]
        classes[large] = rng.choice(2, size=len(large), p=mix[:2] / mix[:2].sum())
    # big shapes first, so they still find room
    classes = np.sort(classes)[::-1]
    placed = []
    for k, cls in enumerate(classes.tolist()):
        lo, hi = ranges[cls]
        for _ in range(50):
            w, h = (int(v) for v in rng.integers(lo, hi + 1, size=2))
            x0 = int(rng.integers(0, S - w + 1))
            y0 = int(rng.integers(0, S - h + 1))
            # keep a one-pixel gap so shapes never touch, even diagonally
            if occupied[max(y0 - 1, 0):y0 + h + 1, max(x0 - 1, 0):x0 + w + 1].any():
                continue
            ellipse = bool(rng.integers(0, 2))
            local = _ellipse_mask(w, h) if ellipse else np.ones((h, w), dtype=bool)
            ys, xs = np.nonzero(local)
            box = Box(x0 + xs.min(), y0 + ys.min(), x0 + xs.max() + 1, y0 + ys.max() + 1)
            if cls != ("small", "medium", "large").index(size_class(box, S, S)):
                continue
            img[y0:y0 + h, x0:x0 + w][local] = levels[k]
            shapes_mask[y0:y0 + h, x0:x0 + w] |= local
            occupied[y0:y0 + h, x0:x0 + w] = True
            placed.append((box, 2 if ellipse else 1))
            break
    return img, shapes_mask, placed


def gen_synthetic_dataset(spec: SyntheticSpec) -> SyntheticData:
    """Seeded scenes of non-touching rectangles and ellipses on a noise floor.

    Each image yields one caption group per rule whose target set is non-empty.
    """
    rng = np.random.default_rng(spec.seed)
    S = spec.image_size
    images, masks, infos, anns, groups = [], [], [], [], []
    for i in range(spec.n_images):
        img, mask, placed = _render_scene(rng, spec)
        if not placed:
            raise ValueError("could not place any shape; spec is unsatisfiable")
        images.append(img)
        masks.append(mask)
        infos.append(ImageInfo(i, S, S, f"img_{i:05d}.pgm"))
        anns.extend(GroundTruthBox(i, b, c) for b, c in placed)
        for rule in spec.rules:
            boxes = [b.as_tuple() for b, _ in placed if rule_matches(rule, b, S, S)]
            if boxes:
                groups.append(CaptionGroup(i, (rule,), np.array(boxes)))
    ds = Dataset(infos, anns, {1: "rectangle", 2: "ellipse"})
    return SyntheticData(ds, groups, np.stack(images), np.stack(masks))


def write_synthetic(data: SyntheticData, outdir, spec: SyntheticSpec | None = None) -> Path:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    for im, arr in zip(data.dataset.images, data.images):
        write_pgm(out / im.file_name, arr)
    manifest = dataset_to_dict(data.dataset)
    manifest["groups"] = [{"image_id": g.image_id, "query": list(g.query),
                           "boxes": g.boxes.tolist()} for g in data.groups]
    if spec is not None:
        manifest["spec"] = {k: getattr(spec, k) for k in spec.__dataclass_fields__}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return path


def load_synthetic(manifest_path) -> SyntheticData:
    path = Path(manifest_path)
    doc = _parse_json(path)
    ds = dataset_from_dict(doc, str(path))
    groups = [CaptionGroup(g["image_id"], tuple(g["query"]), np.array(g["boxes"]))
              for g in _require(doc, "groups", str(path))]
    images = np.stack([read_pgm(path.parent / im.file_name) for im in ds.images])
    return SyntheticData(ds, groups, images, np.zeros(images.shape, dtype=bool))


# ---------------------------------------------------------------- caption-structure ablations


def ablation_setting1_merge(groups: Sequence[CaptionGroup]) -> dict:
    """Concatenate every group's boxes per image; duplicates are kept."""
    merged: dict = {}
    for g in groups:
        merged.setdefault(g.image_id, []).append(g.boxes)
    return {k: np.concatenate(v, axis=0) for k, v in merged.items()}


def ablation_setting2_nms(merged: dict, thresh: float = 0.9) -> dict:
    """Uniform-score NMS per image, so earlier boxes win ties."""
    out = {}
    for k, boxes in merged.items():
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        keep = sorted(nms_indices(boxes, np.ones(len(boxes)), thresh))
        out[k] = boxes[keep]
    return out


def ablation_setting3_group(boxes_per_image: dict, group_size: int = 6,
                            seed: int = 0) -> list[CaptionGroup]:
    """Random partition of each image's boxes into caption-free groups of ``group_size``."""
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    rng = np.random.default_rng(seed)
    groups = []
    for k, boxes in boxes_per_image.items():
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        order = rng.permutation(len(boxes))
        for s in range(0, len(boxes), group_size):
            groups.append(CaptionGroup(k, (), boxes[order[s:s + group_size]]))
    return groups
