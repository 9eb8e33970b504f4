"""mavlkit command line: evaluation, pooling, inference, pseudo-labels, masks, toy training."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .data_io import (SchemaError, SyntheticSpec, ValidationError, ablation_setting1_merge,
                      ablation_setting2_nms, ablation_setting3_group,
                      gen_synthetic_dataset, load_ground_truth, load_proposals, load_synthetic,
                      read_pgm, save_detections, write_synthetic)
from .eval_protocol import (EvalConfig, combine_query_detections, curve_csv, evaluate, report_json,
                            tiled_inference)
from .geometry import Box, Detection
from .mask2box import BinaryMask, mask_to_boxes
from .model import ModelConfig, load_checkpoint, predict, save_checkpoint
from .pseudo_label import UNKNOWN, PseudoLabelConfig, pseudo_label_dataset

log = logging.getLogger("mavlkit")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise argparse.ArgumentTypeError(f"no such file: {path}")
    return p


def _add_eval_flags(sp):
    sp.add_argument("--iou", type=float, default=0.5, help="IoU threshold for a true positive")
    sp.add_argument("--top-n", type=int, default=50)
    sp.add_argument("--score-thresh", type=float, default=None)
    sp.add_argument("--nms", type=float, default=0.5, help="class-agnostic NMS IoU threshold")
    sp.add_argument("--interpolation", choices=("all-point", "11-point"), default="all-point")
    sp.add_argument("--per-image-recall", action="store_true")


def _eval_cfg(a) -> EvalConfig:
    return EvalConfig(iou_thresh=a.iou, top_n=a.top_n, score_thresh=a.score_thresh, nms_thresh=a.nms,
                      interpolation=a.interpolation, per_image_recall=a.per_image_recall)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="mavlkit", description=__doc__)
    ap.add_argument("--version", action="version", version=f"mavlkit {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--report", type=Path, default=None, help="also write the JSON report here")
        sp.add_argument("--quiet", action="store_true", help="JSON only, no table")
        return sp

    sp = add("eval", "AP, recall, recall curve, size buckets and per-category recall")
    sp.add_argument("--gt", type=_existing, required=True)
    sp.add_argument("--dets", type=_existing, required=True)
    sp.add_argument("--curve", type=_csv_ints, default=[10, 30, 50])
    sp.add_argument("--csv", type=Path, default=None, help="write the recall curve as CSV")
    _add_eval_flags(sp)

    sp = add("combine", "pool detections from several query files, then NMS and top N per image")
    sp.add_argument("--dets", type=_existing, nargs="+", required=True)
    sp.add_argument("--out", type=Path, required=True)
    _add_eval_flags(sp)

    sp = add("infer", "run a checkpoint on PGM images")
    sp.add_argument("--checkpoint", type=_existing, required=True)
    sp.add_argument("--images", type=_existing, nargs="+", required=True)
    sp.add_argument("--query", action="append", default=None,
                    help="token query; repeat to pool several queries (default ALL)")
    sp.add_argument("--tiles", type=int, default=1)
    sp.add_argument("--gt", type=_existing, default=None,
                    help="GT JSON whose file_name entries map images to ids (default: file stem)")
    sp.add_argument("--out", type=Path, required=True)
    _add_eval_flags(sp)

    sp = add("pseudolabel", "unknown-object pseudo-labels from proposals and known boxes")
    sp.add_argument("--proposals", type=_existing, required=True)
    sp.add_argument("--known-gt", type=_existing, required=True)
    sp.add_argument("--min-score", type=float, default=0.7)
    sp.add_argument("--max-known-iou", type=float, default=0.5)
    sp.add_argument("--nms", type=float, default=None, help="optional NMS among survivors")
    sp.add_argument("--out", type=Path, required=True)

    sp = add("mask2box", "boxes from binary PGM masks via connected components")
    sp.add_argument("--masks", type=_existing, nargs="+", required=True)
    sp.add_argument("--connectivity", type=int, choices=(4, 8), default=8)
    sp.add_argument("--min-area", type=int, default=1)
    sp.add_argument("--threshold", type=int, default=128)
    sp.add_argument("--out", type=Path, required=True)

    sp = add("gen-synth", "render a seeded synthetic shapes dataset")
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--n-images", type=int, default=2400)
    sp.add_argument("--image-size", type=int, default=64)
    sp.add_argument("--min-shapes", type=int, default=2)
    sp.add_argument("--max-shapes", type=int, default=6)

    sp = add("ablate", "caption-structure transforms of a synthetic manifest")
    sp.add_argument("--manifest", type=_existing, required=True)
    sp.add_argument("--setting", type=int, choices=(1, 2, 3), required=True)
    sp.add_argument("--nms-thresh", type=float, default=0.9)
    sp.add_argument("--group-size", type=int, default=6)
    sp.add_argument("--out", type=Path, required=True)

    sp = add("train-toy", "generate shapes, train the toy detector, evaluate per query")
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--n-images", type=int, default=2400)
    sp.add_argument("--n-train", type=int, default=2000)
    sp.add_argument("--steps", type=int, default=4000)
    sp.add_argument("--batch-size", type=int, default=16)
    sp.add_argument("--lr", type=float, default=5e-4)
    sp.add_argument("--setting", type=int, choices=(1, 2, 3, 4, 5), default=5)
    sp.add_argument("--queries", type=int, default=24)
    sp.add_argument("--fusion-blocks", type=int, default=6)
    _add_eval_flags(sp)

    sp = add("gradcheck", "finite-difference checks of every differentiable op")
    sp.add_argument("--seeds", type=int, default=10)

    sp = add("oracle", "compare fast paths against brute-force references")
    sp.add_argument("--scale", type=float, default=1.0, help="multiplier on instance counts")
    return ap


# ---------------------------------------------------------------- subcommands


def _pmap(fn, items, threads: int) -> list:
    """Order-preserving map; the thread count never changes the result order."""
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def cmd_eval(a) -> dict:
    cfg = _eval_cfg(a)
    ds = load_ground_truth(a.gt)
    dets = load_proposals(a.dets)
    known = {im.id for im in ds.images}
    stray = sorted({str(d.image_id) for d in dets if d.image_id not in known})
    if stray:
        raise ValidationError(f"detections reference images missing from the GT file: {stray[:5]}")
    sizes = {im.id: (im.width, im.height) for im in ds.images}
    report = evaluate(dets, ds.annotations, sizes, cfg, a.curve, threads=a.threads)
    if a.csv is not None:
        a.csv.write_text(curve_csv(report["curve"]), encoding="utf-8")
    return report


def _group_by_image(dets):
    out: dict = {}
    for d in dets:
        out.setdefault(d.image_id, []).append(d)
    return out


def cmd_combine(a) -> dict:
    cfg = _eval_cfg(a)
    sources = [_group_by_image(load_proposals(p)) for p in a.dets]
    ids = []
    for s in sources:
        ids.extend(k for k in s if k not in ids)
    pooled = _pmap(lambda k: combine_query_detections([s.get(k, []) for s in sources], cfg), ids,
                   a.threads)
    out = [d for ds in pooled for d in ds]
    save_detections(a.out, out)
    return {"images": len(ids), "detections": len(out), "out": str(a.out)}


def _resize_nearest(img: np.ndarray, size: int) -> np.ndarray:
    H, W = img.shape
    rows = np.minimum((np.arange(size) + 0.5) * H / size, H - 1).astype(int)
    cols = np.minimum((np.arange(size) + 0.5) * W / size, W - 1).astype(int)
    return img[rows][:, cols]


def _model_detector(cfg: ModelConfig, params: dict, queries: list[str], ecfg: EvalConfig):
    def detect(crop: np.ndarray) -> list[Detection]:
        H, W = crop.shape
        x = _resize_nearest(crop, cfg.image_size).astype(np.float64) / 255.0
        sx, sy = W / cfg.image_size, H / cfg.image_size
        per_query = []
        for q in queries:
            dets = predict(x, q, params, cfg, source_query=q)
            per_query.append([Detection(0, Box(d.box.x_min * sx, d.box.y_min * sy, d.box.x_max * sx,
                                               d.box.y_max * sy), d.score, q) for d in dets])
        return combine_query_detections(per_query, ecfg)

    return detect


def cmd_infer(a) -> dict:
    ecfg = _eval_cfg(a)
    cfg, params = load_checkpoint(a.checkpoint)
    queries = a.query or ["ALL"]
    detect = _model_detector(cfg, params, queries, ecfg)
    ids = {p: p.stem for p in a.images}
    if a.gt is not None:
        by_name = {im.file_name: im.id for im in load_ground_truth(a.gt).images}
        missing = sorted(p.name for p in a.images if p.name not in by_name)
        if missing:
            raise ValidationError(f"images not listed in {a.gt}: {missing}")
        ids = {p: by_name[p.name] for p in a.images}
    images = [(ids[p], read_pgm(p)) for p in a.images]

    def run(item):
        iid, img = item
        return tiled_inference(img, detect, a.tiles, ecfg, image_id=iid)

    out = [d for ds in _pmap(run, images, a.threads) for d in ds]
    save_detections(a.out, out)
    return {"images": len(images), "detections": len(out), "tiles": a.tiles, "queries": queries,
            "model": asdict(cfg), "out": str(a.out)}


def cmd_pseudolabel(a) -> dict:
    cfg = PseudoLabelConfig(a.min_score, a.max_known_iou, a.nms)
    props = load_proposals(a.proposals)
    known = load_ground_truth(a.known_gt).annotations
    out = pseudo_label_dataset(props, known, cfg)
    save_detections(a.out, out, category=UNKNOWN)
    return {"proposals": len(props), "pseudo_labels": len(out), "config": asdict(cfg),
            "out": str(a.out)}


def cmd_mask2box(a) -> dict:
    out = []
    for p in a.masks:
        mask = BinaryMask.from_gray(read_pgm(p), a.threshold)
        out.extend(mask_to_boxes(mask, a.connectivity, a.min_area, image_id=p.stem))
    save_detections(a.out, out)
    return {"masks": len(a.masks), "boxes": len(out), "connectivity": a.connectivity,
            "out": str(a.out)}


def cmd_gen_synth(a) -> dict:
    spec = SyntheticSpec(n_images=a.n_images, image_size=a.image_size, min_shapes=a.min_shapes,
                         max_shapes=a.max_shapes, seed=a.seed)
    data = gen_synthetic_dataset(spec)
    path = write_synthetic(data, a.out, spec)
    return {"manifest": str(path), "images": len(data.dataset.images),
            "boxes": len(data.dataset.annotations), "groups": len(data.groups)}


def cmd_ablate(a) -> dict:
    data = load_synthetic(a.manifest)
    merged = ablation_setting1_merge(data.groups)
    if a.setting == 1:
        result = {k: v for k, v in merged.items()}
    else:
        result = ablation_setting2_nms(merged, a.nms_thresh)
    if a.setting == 3:
        groups = ablation_setting3_group(result, a.group_size, a.seed)
        doc = [{"image_id": g.image_id, "boxes": g.boxes.tolist()} for g in groups]
        count = len(groups)
    else:
        doc = [{"image_id": k, "boxes": v.tolist()} for k, v in result.items()]
        count = len(doc)
    a.out.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    return {"setting": a.setting, "records": count,
            "boxes": int(sum(len(r["boxes"]) for r in doc)), "out": str(a.out)}


def cmd_train_toy(a) -> dict:
    from .training import TrainConfig, evaluate_query, setting_samples, train

    spec = SyntheticSpec(n_images=a.n_images, seed=a.seed)
    data = gen_synthetic_dataset(spec)
    tr, te = data.split(a.n_train)
    mcfg = ModelConfig(queries=a.queries, fusion_blocks=a.fusion_blocks, seed=a.seed)
    steps = a.steps * (2 if a.setting == 4 else 1)
    tcfg = TrainConfig(steps=steps, batch_size=a.batch_size, lr=a.lr, seed=a.seed)
    res = train(mcfg, tcfg, tr.images, setting_samples(tr, a.setting, a.seed))
    a.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(a.out / "model.bin", mcfg, res.params)
    ecfg = _eval_cfg(a)
    per_query = {}
    for q in ("ALL", "SMALL", "LARGE"):
        r = evaluate_query(res.params, mcfg, te, q, ecfg)
        per_query[q] = {k: r[k] for k in ("ap50", "r50", "buckets")}
    return {"setting": a.setting, "steps": steps, "train_images": len(tr.dataset.images),
            "test_images": len(te.dataset.images), "model": asdict(mcfg),
            "final_loss": res.history[-1]["loss"], "per_query": per_query,
            "checkpoint": str(a.out / "model.bin")}


def cmd_gradcheck(a) -> dict:
    from .checks import gradient_suite

    res = gradient_suite(range(a.seed, a.seed + a.seeds))
    if not all(r["ok"] for r in res.values()):
        raise ValidationError("gradient check above tolerance: " + json.dumps(res, sort_keys=True))
    return res


def cmd_oracle(a) -> dict:
    from .checks import oracle_suite

    s = a.scale
    res = oracle_suite(a.seed, int(200 * s), int(500 * s), int(100 * s), int(200 * s),
                       int(20 * s), int(100 * s))
    if any(r["mismatches"] for r in res.values()):
        raise ValidationError("oracle mismatch: " + json.dumps(res, sort_keys=True))
    return res


COMMANDS = {
    "eval": cmd_eval, "combine": cmd_combine, "infer": cmd_infer, "pseudolabel": cmd_pseudolabel,
    "mask2box": cmd_mask2box, "gen-synth": cmd_gen_synth, "ablate": cmd_ablate,
    "train-toy": cmd_train_toy, "gradcheck": cmd_gradcheck, "oracle": cmd_oracle,
}


def _table(result: dict, prefix: str = "") -> list[str]:
    lines = []
    for k in sorted(result):
        v = result[k]
        if isinstance(v, dict):
            lines.extend(_table(v, f"{prefix}{k}."))
        elif isinstance(v, float):
            lines.append(f"{prefix + k:<32} {v:.4f}")
        elif not isinstance(v, list):
            lines.append(f"{prefix + k:<32} {v}")
    return lines


def main(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
        if a.threads < 1:
            raise UsageError("--threads must be >= 1")
        result = COMMANDS[a.command](a)
    except (UsageError, SchemaError, ValidationError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"mavlkit: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"mavlkit: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    args = {k: (str(v) if isinstance(v, Path) else [str(x) for x in v] if isinstance(v, list)
                and v and isinstance(v[0], Path) else v)
            for k, v in sorted(vars(a).items()) if k not in ("command", "report", "quiet", "threads")}
    report = {"tool": "mavlkit", "version": __version__, "command": a.command, "seed": a.seed,
              "config": args, "result": result}
    text = report_json(report)
    if a.report is not None:
        a.report.write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    if not a.quiet:
        sys.stdout.write("\n" + "\n".join(_table(result)) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
