"""Gradient and oracle suites shared by the command line and the tests."""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from . import oracles
from .eval_protocol import EvalConfig, average_precision
from .geometry import Box, Detection, GroundTruthBox, nms_indices
from .mask2box import connected_components
from .matching_losses import DetectionSet, LossWeights, assignment_cost, hungarian, set_loss
from .model import ModelConfig, init_params, model_forward
from .msda import FeaturePyramid, bilinear_sample, msda_forward, msda_params

OP_TOL = 1e-4
END_TO_END_TOL = 1e-3

TINY_MODEL = ModelConfig(image_size=16, strides=(4, 8), d=16, enc_layers=1, dec_layers=1, queries=4,
                         fusion_blocks=2, max_tokens=3, msda_heads=2, msda_points=2, attn_heads=2,
                         ffn_hidden=16)


def _off_kink(rng, lo, hi, size):
    # bilinear reads have kinks on the pixel-centre lines x = k + 0.5; stay clear of them
    x = rng.uniform(lo, hi, size=size)
    frac = (x - 0.5) % 1.0
    return np.where(np.minimum(frac, 1 - frac) < 1e-3, x + 0.01, x)


def _rand_msda_case(rng, B=2, Q=3, d=8, M=2, K=2, shapes=((4, 5), (2, 3))):
    levels = [rng.standard_normal((B, h, w, d)) for h, w in shapes]
    p = msda_params(rng, d, M, len(shapes), K)
    for k in p:
        p[k] = p[k] + 0.3 * rng.standard_normal(p[k].shape)
    queries = rng.standard_normal((B, Q, d))
    refs = rng.uniform(0.05, 0.95, size=(B, Q, 2))
    return levels, p, queries, refs


def gradient_case(name: str, seed: int) -> float:
    """Max relative finite-difference error of one named op for one seed."""
    rng = np.random.default_rng(seed)
    if name == "linear":
        return nx.grad_check(nx.linear, [rng.standard_normal((3, 5)), rng.standard_normal((5, 4)),
                                         rng.standard_normal(4)], seed)
    if name == "softmax":
        return nx.grad_check(lambda v: nx.softmax(v, -1), [rng.standard_normal((4, 6))], seed)
    if name == "layer_norm":
        return nx.grad_check(nx.layer_norm, [rng.standard_normal((3, 8)), rng.standard_normal(8),
                                             rng.standard_normal(8)], seed)
    if name == "sa_block":
        p = nx.block_params(rng, 8, 12)
        names = sorted(p)

        def op(x, *vals):
            return nx.self_attention_block(x, dict(zip(names, vals)), heads=2)

        return nx.grad_check(op, [rng.standard_normal((2, 5, 8))] + [p[k] for k in names], seed)
    if name == "bilinear_sample":
        fmap = rng.standard_normal((5, 6, 3))
        pt = np.array([_off_kink(rng, -0.8, 6.8, None), _off_kink(rng, -0.8, 5.8, None)])
        return nx.grad_check(bilinear_sample, [fmap, pt], seed)
    if name == "msda_forward":
        levels, p, queries, refs = _rand_msda_case(rng)
        names = sorted(p)

        def op(q, r, l0, l1, *vals):
            return msda_forward(q, r, FeaturePyramid([l0, l1]), dict(zip(names, vals)), n_heads=2,
                                n_points=2)

        return nx.grad_check(op, [queries, refs] + levels + [p[k] for k in names], seed)
    if name == "set_loss":
        cfg = TINY_MODEL
        p = init_params(ModelConfig(**{**cfg.__dict__, "seed": seed}))
        for k, t in p.items():
            t.data += 0.05 * rng.standard_normal(t.shape)
        imgs = rng.uniform(size=(2, 16, 16, 1))
        targets = [np.array([[0.3, 0.4, 0.2, 0.3], [0.7, 0.6, 0.3, 0.2]]),
                   np.array([[0.5, 0.5, 0.4, 0.4]])]
        queries = [[1, 4], [6]]
        return nx.grad_check_params(lambda: set_loss(model_forward(imgs, queries, p, cfg), targets),
                                    p, n_coords=48, seed=seed)
    raise KeyError(name)


GRADIENT_OPS = ("linear", "softmax", "layer_norm", "sa_block", "bilinear_sample", "msda_forward",
                "set_loss")


def gradient_suite(seeds=range(10), ops=GRADIENT_OPS) -> dict:
    """{op: {"max_rel_err", "tol", "ok"}} over all seeds."""
    out = {}
    for op in ops:
        worst = max(gradient_case(op, s) for s in seeds)
        tol = END_TO_END_TOL if op == "set_loss" else OP_TOL
        out[op] = {"max_rel_err": worst, "tol": tol, "ok": bool(worst <= tol)}
    return out


# ---------------------------------------------------------------- oracle comparisons


def hungarian_case(rng) -> bool:
    n = int(rng.integers(1, 8))
    m = int(rng.integers(0, n + 1))
    if rng.random() < 0.5:
        cost = rng.integers(0, 4, size=(n, m)).astype(np.float64)  # heavy ties
    else:
        cost = rng.standard_normal((n, m))
    a = hungarian(cost)
    if m == 0:
        return a.pairs == [] and sorted(a.unmatched) == list(range(n))
    best, pairs = oracles.best_assignment_bruteforce(cost)
    return sorted(a.pairs) == pairs and abs(assignment_cost(cost, a) - best) <= 1e-12


def random_boxes(rng, n: int, size: float = 50.0) -> np.ndarray:
    xy = rng.uniform(0, size, size=(n, 2))
    wh = rng.uniform(1, size / 2, size=(n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


def nms_case(rng) -> bool:
    n = int(rng.integers(0, 30))
    boxes = random_boxes(rng, n)
    # duplicated scores exercise the tie rule
    scores = rng.integers(0, 10, size=n) / 10.0 if rng.random() < 0.5 else rng.random(n)
    thresh = float(rng.uniform(0.1, 0.9))
    return nms_indices(boxes, scores, thresh) == oracles.nms_bruteforce(
        boxes.tolist(), scores.tolist(), thresh)


def ap_case(rng) -> float:
    """|fast AP - operating-point AP| on a random multi-image instance with distinct scores."""
    n_img = int(rng.integers(1, 4))
    dets, gts = [], []
    for i in range(n_img):
        g = random_boxes(rng, int(rng.integers(0, 6)))
        gts.extend(GroundTruthBox(i, Box.from_array(b)) for b in g)
        cand = [b for b in g if rng.random() < 0.7]
        jitter = [b + rng.normal(0, 3, 4) for b in cand]
        noise = list(random_boxes(rng, int(rng.integers(0, 6))))
        for b in jitter + noise:
            b = np.array([min(b[0], b[2]), min(b[1], b[3]), max(b[0], b[2]), max(b[1], b[3])])
            dets.append(Detection(i, Box.from_array(b), float(rng.random())))
    fast = average_precision(dets, gts, EvalConfig()).ap
    flags = [False] * len(dets)
    for i in range(n_img):
        idx = [k for k, d in enumerate(dets) if d.image_id == i]
        tp, _ = oracles.greedy_match_loop([(dets[k].score, dets[k].box.as_tuple()) for k in idx],
                                          [g.box.as_tuple() for g in gts if g.image_id == i], 0.5)
        for k, f in zip(idx, tp):
            flags[k] = f
    slow = oracles.ap_by_operating_points([d.score for d in dets], flags, len(gts))
    return abs(fast - slow)


def cc_case(rng) -> bool:
    H, W = (int(v) for v in rng.integers(1, 65, size=2))
    mask = rng.random((H, W)) < rng.uniform(0.1, 0.7)
    ok = True
    for conn in (4, 8):
        labels, comps = connected_components(mask, conn)
        ok &= len(comps) == oracles.flood_fill_count(mask, conn) and labels.max(initial=0) == len(comps)
    return bool(ok)


def msda_case(rng) -> float:
    levels, p, queries, refs = _rand_msda_case(rng, B=1)
    # push some references outside the map to exercise zero padding
    refs[0, 0] = [-0.1, 1.05]
    fast = msda_forward(nx.Tensor(queries[0]), refs[0],
                        FeaturePyramid([nx.Tensor(l) for l in levels]),
                        {k: nx.Tensor(v) for k, v in p.items()}, n_heads=2, n_points=2).data
    frames = [(float(l.shape[2]), float(l.shape[1])) for l in levels]
    slow = oracles.msda_loop(queries[0], refs[0], [l[0] for l in levels], frames, p, "", 2, 2)
    return float(np.abs(fast - slow).max())


def loss_case(rng) -> float:
    Q = int(rng.integers(2, 7))
    m = int(rng.integers(0, min(Q, 5) + 1))
    boxes = np.concatenate([rng.uniform(0.2, 0.8, (Q, 2)), rng.uniform(0.05, 0.4, (Q, 2))], 1)
    logits = rng.standard_normal(Q)
    tg = np.concatenate([rng.uniform(0.2, 0.8, (m, 2)), rng.uniform(0.05, 0.4, (m, 2))], 1)
    w = LossWeights()
    fast = set_loss([DetectionSet(nx.Tensor(boxes), nx.Tensor(logits))], [tg], w).item()
    slow = oracles.set_loss_bruteforce(boxes, 1 / (1 + np.exp(-logits)), tg)
    return abs(fast - slow)


def oracle_suite(seed: int = 0, hungarian_n: int = 200, nms_n: int = 500, ap_n: int = 100,
                 cc_n: int = 200, msda_n: int = 20, loss_n: int = 100) -> dict:
    rng = np.random.default_rng(seed)
    out = {}
    res = [hungarian_case(rng) for _ in range(hungarian_n)]
    out["hungarian"] = {"instances": hungarian_n, "mismatches": res.count(False)}
    res = [nms_case(rng) for _ in range(nms_n)]
    out["nms"] = {"instances": nms_n, "mismatches": res.count(False)}
    diffs = [ap_case(rng) for _ in range(ap_n)]
    out["average_precision"] = {"instances": ap_n, "max_abs_diff": max(diffs, default=0.0),
                                "mismatches": sum(bool(d > 1e-12) for d in diffs)}
    res = [cc_case(rng) for _ in range(cc_n)]
    out["connected_components"] = {"instances": cc_n, "mismatches": res.count(False)}
    diffs = [msda_case(rng) for _ in range(msda_n)]
    out["msda"] = {"instances": msda_n, "max_abs_diff": max(diffs, default=0.0),
                   "mismatches": sum(bool(d > 1e-12) for d in diffs)}
    diffs = [loss_case(rng) for _ in range(loss_n)]
    out["set_loss"] = {"instances": loss_n, "max_abs_diff": max(diffs, default=0.0),
                       "mismatches": sum(bool(d > 1e-12) for d in diffs)}
    return out
