"""Acceptance suite: one PASS/FAIL line per criterion, each at its stated tolerance."""

import json
import time

import numpy as np
import pytest

from mavlkit.checks import END_TO_END_TOL, OP_TOL, gradient_suite, oracle_suite
from mavlkit.cli import main
from mavlkit.data_io import SyntheticSpec, gen_synthetic_dataset, save_detections, write_pgm
from mavlkit.eval_protocol import (EvalConfig, SizeBuckets, average_precision, evaluate, recall_at_n,
                                   tiled_inference)
from mavlkit.geometry import Box, Detection, GroundTruthBox, giou, iou, nms_indices
from mavlkit.mask2box import BlobDetector
from mavlkit.matching_losses import set_loss
from mavlkit.model import ModelConfig, init_params, model_forward
from mavlkit.pseudo_label import PseudoLabelConfig, generate_unknown_pseudo_labels
from mavlkit.training import TrainConfig, detect_split, setting_samples, train

# toy training run for criterion 4
TOY_SPEC = SyntheticSpec(n_images=2400, image_size=64, seed=0)
TOY_TRAIN = 2000
TOY_STEPS = 4000
CPU_BUDGET_S = 30 * 60
RECALL_N = 10

# identical budget for every run of criterion 6
ABLATION_STEPS = 600
ABLATION_SEEDS = (0, 1, 2)


def test_criterion_1_gradients(acceptance):
    t0 = time.perf_counter()
    res = gradient_suite(range(10))
    elapsed = time.perf_counter() - t0
    ok = all(r["ok"] for r in res.values()) and elapsed < 120
    worst_op = max((r["max_rel_err"] for k, r in res.items() if k != "set_loss"))
    detail = (f"max per-op rel err {worst_op:.2e} (tol {OP_TOL:g}), end-to-end "
              f"{res['set_loss']['max_rel_err']:.2e} (tol {END_TO_END_TOL:g}), 10 seeds, {elapsed:.0f}s (< 120s)")
    assert acceptance(1, "finite-difference gradients", ok, detail), json.dumps(res)


def test_criterion_2_oracles(acceptance):
    res = oracle_suite(seed=0)
    ok = all(r["mismatches"] == 0 for r in res.values())
    ok &= res["hungarian"]["instances"] >= 200 and res["nms"]["instances"] >= 500
    ok &= res["average_precision"]["instances"] >= 100 and res["connected_components"]["instances"] >= 200
    detail = ", ".join(f"{k} {r['instances'] - r['mismatches']}/{r['instances']}" for k, r in res.items())
    detail += (f"; AP max diff {res['average_precision']['max_abs_diff']:.1e}, "
               f"MSDA max diff {res['msda']['max_abs_diff']:.1e}")
    assert acceptance(2, "oracle equivalence", ok, detail), json.dumps(res)


def test_criterion_3_fixtures(acceptance):
    checks = {}
    checks["iou 1/7"] = iou(Box(0, 0, 2, 2), Box(1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-15)
    checks["giou -0.5"] = giou(Box(0, 0, 1, 1), Box(1, 1, 2, 2)) == -0.5
    gts = [GroundTruthBox(0, Box(0, 0, 10, 10)), GroundTruthBox(0, Box(20, 20, 30, 30))]
    dets = [Detection(0, Box(0, 0, 10, 10), 0.9), Detection(0, Box(50, 50, 60, 60), 0.8),
            Detection(0, Box(20, 20, 30, 30), 0.7)]
    ap = average_precision(dets, gts).ap
    checks["ap 0.8333"] = abs(ap - (0.5 + 0.5 * 2 / 3)) <= 1e-12 and round(ap, 4) == 0.8333
    keep = nms_indices(np.array([[0, 0, 10, 10], [1, 1, 11, 11], [20, 20, 30, 30.0]]), [0.9, 0.8, 0.7], 0.5)
    checks["nms keep {1,3}"] = [k + 1 for k in keep] == [1, 3]
    b = SizeBuckets()
    checks["buckets 4/10/25%"] = [b.bucket(a / 10_000) for a in (400, 1000, 2500)] == ["small", "medium", "large"]
    ok = all(checks.values())
    assert acceptance(3, "protocol fixtures", ok, ", ".join(f"{k}: {v}" for k, v in checks.items()))


def _small_recall(dets, te, n):
    sizes = {im.id: (im.width, im.height) for im in te.dataset.images}
    return evaluate(dets, te.dataset.annotations, sizes, EvalConfig(top_n=n))["buckets"]["small"]


def test_criterion_4_toy_training(acceptance):
    t0 = time.process_time()
    data = gen_synthetic_dataset(TOY_SPEC)
    tr, te = data.split(TOY_TRAIN)
    mcfg = ModelConfig()
    assert (mcfg.queries, mcfg.fusion_blocks, mcfg.image_size) == (24, 6, 64)
    res = train(mcfg, TrainConfig(steps=TOY_STEPS), tr.images, setting_samples(tr, 5))
    det_all = detect_split(res.params, mcfg, te, "ALL")
    det_small = detect_split(res.params, mcfg, te, "SMALL")
    sizes = {im.id: (im.width, im.height) for im in te.dataset.images}
    rep = evaluate(det_all, te.dataset.annotations, sizes, EvalConfig())
    cpu = time.process_time() - t0
    gap = _small_recall(det_small, te, RECALL_N) - _small_recall(det_all, te, RECALL_N)
    gap50 = _small_recall(det_small, te, 50) - _small_recall(det_all, te, 50)
    ok_ap = rep["ap50"] >= 0.80 and cpu <= CPU_BUDGET_S
    ok_gap = gap >= 0.05
    acceptance(4, "toy training AP50 (query ALL)", ok_ap,
               f"AP50 {rep['ap50']:.4f} (>= 0.80), R50 {rep['r50']:.4f}, {len(tr.images)} train / "
               f"{len(te.images)} held-out images, {TOY_STEPS} steps, {cpu:.0f} CPU-s (<= {CPU_BUDGET_S})")
    acceptance(4, "query conditioning on small GT", ok_gap,
               f"small recall@{RECALL_N} SMALL - ALL = {gap:+.4f} (>= 0.05); at N=50 {gap50:+.4f}")
    assert ok_ap and ok_gap


def test_criterion_5_aux_losses(acceptance):
    cfg = ModelConfig()
    assert cfg.fusion_blocks == 6
    p = init_params(cfg)
    rng = np.random.default_rng(0)
    imgs = rng.uniform(size=(2, 64, 64, 1))
    targets = [np.array([[0.3, 0.3, 0.1, 0.1], [0.6, 0.7, 0.3, 0.2]]), np.array([[0.5, 0.5, 0.5, 0.5]])]
    outs = model_forward(imgs, [[1], [4]], p, cfg)
    total = set_loss(outs, targets).item()
    deltas = []
    for k in range(6):
        mask = [j != k for j in range(6)]
        deltas.append(abs(total - set_loss(outs, targets, include=mask).item()))
    one = set_loss(outs[:1], targets).item()
    same = set_loss([outs[0]] * 6, targets).item()
    err = abs(same - 6 * one)
    ok = min(deltas) > 0 and err <= 1e-12
    assert acceptance(5, "auxiliary loss structure", ok,
                      f"min change from dropping one head {min(deltas):.3e} (> 0), "
                      f"|F x single - total| {err:.1e} (<= 1e-12)")


def test_criterion_6_structure_ablation(acceptance):
    data = gen_synthetic_dataset(TOY_SPEC)
    tr, te = data.split(TOY_TRAIN)
    sizes = {im.id: (im.width, im.height) for im in te.dataset.images}
    rows = []
    for seed in ABLATION_SEEDS:
        mcfg = ModelConfig(seed=seed)
        tcfg = TrainConfig(steps=ABLATION_STEPS, seed=seed)
        aps = {}
        for setting in (1, 5):
            res = train(mcfg, tcfg, tr.images, setting_samples(tr, setting, seed))
            dets = detect_split(res.params, mcfg, te, "ALL")
            aps[setting] = evaluate(dets, te.dataset.annotations, sizes, EvalConfig())["ap50"]
        rows.append((seed, aps[1], aps[5]))
    ok = all(a1 < a5 for _, a1, a5 in rows)
    detail = "; ".join(f"seed {s}: S1 {a1:.4f} vs S5 {a5:.4f}" for s, a1, a5 in rows)
    assert acceptance(6, "setting-1 AP50 < setting-5 AP50", ok, f"{detail} ({ABLATION_STEPS} steps each)")


def test_criterion_7_pseudo_labels(acceptance):
    rng = np.random.default_rng(0)
    bad = 0
    cfg = PseudoLabelConfig()
    for _ in range(500):
        props = []
        for _ in range(int(rng.integers(0, 20))):
            x, y = rng.uniform(0, 50, 2)
            w, h = rng.uniform(2, 25, 2)
            props.append(Detection(0, Box(x, y, x + w, y + h), float(rng.uniform())))
        known = []
        for _ in range(int(rng.integers(0, 6))):
            x, y = rng.uniform(0, 50, 2)
            w, h = rng.uniform(4, 25, 2)
            known.append(GroundTruthBox(0, Box(x, y, x + w, y + h)))
        out = generate_unknown_pseudo_labels(props, known, cfg)
        bad += sum(d.score < 0.7 or any(iou(d.box, g.box) > 0.5 for g in known) for d in out)
        bad += generate_unknown_pseudo_labels(out, known, cfg) != out
        s, o = sorted(rng.uniform(size=2)), sorted(rng.uniform(size=2))
        loose = {id(d) for d in generate_unknown_pseudo_labels(props, known, PseudoLabelConfig(s[0], o[1]))}
        strict = {id(d) for d in generate_unknown_pseudo_labels(props, known, PseudoLabelConfig(s[1], o[0]))}
        bad += not strict <= loose
    assert acceptance(7, "pseudo-label predicates", bad == 0,
                      f"{bad} violations over 500 random instances (predicates, idempotence, monotonicity)")


def _tiny_object_image(seed=0):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 61, (256, 256)).astype(np.uint8)
    gts = []
    for r in range(2):
        for c in range(4):
            # one 6x6 object strictly inside each 64x128 tile
            x = 64 * c + int(rng.integers(4, 64 - 10))
            y = 128 * r + int(rng.integers(4, 128 - 10))
            img[y:y + 6, x:x + 6] = 200
            gts.append(GroundTruthBox(0, Box(x, y, x + 6, y + 6)))
    return img, gts


def test_criterion_8_tiled_inference(acceptance):
    det = BlobDetector(input_size=32)
    img, gts = _tiny_object_image()
    cfg = EvalConfig()
    tiled = recall_at_n(tiled_inference(img, det, 8, cfg), gts, cfg, 50)
    untiled = recall_at_n(tiled_inference(img, det, 1, cfg), gts, cfg, 50)
    ok = tiled == 1.0 and tiled >= untiled
    assert acceptance(8, "tiled inference", ok, f"tiled recall@50 {tiled:.3f} (= 1.0), untiled {untiled:.3f}")


def _cli(argv, capsys):
    code = main(argv)
    return code, capsys.readouterr().out


def test_criterion_9_cli_determinism(acceptance, capsys, tmp_path):
    rng = np.random.default_rng(0)
    gt = {"images": [{"id": k, "width": 64, "height": 64} for k in range(5)],
          "annotations": [], "categories": [{"id": 1, "name": "shape"}]}
    dets, props = [], []
    for k in range(5):
        for j in range(4):
            x, y = (float(v) for v in rng.uniform(0, 40, 2))
            gt["annotations"].append({"id": 4 * k + j, "image_id": k, "bbox": [x, y, 12.0, 12.0], "category_id": 1})
            dets.append(Detection(k, Box(x + rng.normal(), y + rng.normal(), x + 12, y + 12), float(rng.uniform())))
            props.append(Detection(k, Box(x + 3, y, x + 15, y + 12), float(rng.uniform())))
    (tmp_path / "gt.json").write_text(json.dumps(gt))
    save_detections(tmp_path / "d.json", dets)
    save_detections(tmp_path / "p.json", props)
    write_pgm(tmp_path / "m.pgm", (rng.random((64, 64)) < 0.3).astype(np.uint8) * 255)
    write_pgm(tmp_path / "im.pgm", rng.integers(0, 256, (64, 128)).astype(np.uint8))
    w = str(tmp_path)
    commands = {
        "eval": ["eval", "--gt", f"{w}/gt.json", "--dets", f"{w}/d.json", "--csv", f"{w}/out.csv"],
        "combine": ["combine", "--dets", f"{w}/d.json", f"{w}/p.json", "--out", f"{w}/out.json"],
        "pseudolabel": ["pseudolabel", "--proposals", f"{w}/p.json", "--known-gt", f"{w}/gt.json",
                        "--out", f"{w}/out.json"],
        "mask2box": ["mask2box", "--masks", f"{w}/m.pgm", "--out", f"{w}/out.json"],
        "gen-synth": ["gen-synth", "--n-images", "8", "--out", f"{w}/synth"],
        "ablate": ["ablate", "--manifest", f"{w}/synth/manifest.json", "--setting", "3", "--out", f"{w}/out.json"],
        "train-toy": ["train-toy", "--n-images", "24", "--n-train", "20", "--steps", "2", "--batch-size", "4",
                      "--out", f"{w}/run"],
        "infer": ["infer", "--checkpoint", f"{w}/run/model.bin", "--images", f"{w}/im.pgm", "--tiles", "8",
                  "--query", "ALL", "--query", "SMALL", "--out", f"{w}/out.json"],
        "gradcheck": ["gradcheck", "--seeds", "1"],
        "oracle": ["oracle", "--scale", "0.05"],
    }
    artifacts = {"eval": "out.csv", "combine": "out.json", "pseudolabel": "out.json", "mask2box": "out.json",
                 "gen-synth": "synth/manifest.json", "ablate": "out.json", "train-toy": "run/model.bin",
                 "infer": "out.json"}
    failures = []
    for name, argv in commands.items():
        outputs = []
        for threads in ("1", "1", "3"):
            code, out = _cli(argv + ["--seed", "3", "--threads", threads], capsys)
            art = (tmp_path / artifacts[name]).read_bytes() if name in artifacts else b""
            outputs.append((code, out, art))
        if outputs[0][0] != 0 or len({o[1:] for o in outputs}) != 1:
            failures.append(name)
    ok = not failures
    assert acceptance(9, "CLI determinism", ok,
                      f"{len(commands) - len(failures)}/{len(commands)} subcommands byte-identical over "
                      f"2 repeats and threads 1 vs 3" + (f"; differing: {failures}" if failures else ""))
