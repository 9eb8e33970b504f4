"""Adam training of the toy detector on token-labelled box groups, plus evaluation helpers."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data_io import (CaptionGroup, SyntheticData, ablation_setting1_merge, ablation_setting2_nms,
                      ablation_setting3_group)
from .eval_protocol import EvalConfig, evaluate
from .matching_losses import LossWeights, set_loss
from .model import ModelConfig, init_params, model_forward, predict_batch, tokenize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 4000
    batch_size: int = 16
    lr: float = 5e-4
    warmup: int = 100
    decay_at: float = 0.8  # fraction of steps after which lr drops 10x
    grad_clip: float = 1.0
    weight_decay: float = 1e-4
    hflip: bool = True
    seed: int = 0
    weights: LossWeights = LossWeights()
    log_every: int = 100

    def lr_at(self, step: int) -> float:
        lr = self.lr * min(1.0, (step + 1) / max(self.warmup, 1))
        return lr * (0.1 if step >= self.decay_at * self.steps else 1.0)


@dataclass
class Sample:
    image_index: int
    tokens: tuple[int, ...]
    targets: np.ndarray  # normalized cxcywh, [k, 4]


class Adam:
    """Adam with decoupled weight decay on matrices only."""

    def __init__(self, params: dict, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.b1, self.b2, self.eps, self.wd = beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.t = 0

    def step(self, lr: float, clip: float | None = None) -> float:
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for k, p in self.params.items()}
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
        if not np.isfinite(norm):
            raise nx.NonFiniteError("non-finite gradient norm")
        scale = min(1.0, clip / (norm + 1e-12)) if clip else 1.0
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k] * scale
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            if self.wd and p.data.ndim >= 2:
                p.data *= 1 - lr * self.wd
            p.data -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return norm


def xyxy_to_unit_cxcywh(boxes: np.ndarray, width: int, height: int) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.stack([(b[:, 0] + b[:, 2]) / (2 * width), (b[:, 1] + b[:, 3]) / (2 * height),
                     (b[:, 2] - b[:, 0]) / width, (b[:, 3] - b[:, 1]) / height], axis=-1)


def samples_from_groups(data: SyntheticData, groups: Sequence[CaptionGroup],
                        default_query: str = "ALL") -> list[Sample]:
    """One sample per group; caption-free groups use ``default_query``."""
    index = {im.id: i for i, im in enumerate(data.dataset.images)}
    out = []
    for g in groups:
        im = data.dataset.images[index[g.image_id]]
        toks = tokenize(list(g.query) if g.query else default_query)
        out.append(Sample(index[g.image_id], tuple(toks),
                          xyxy_to_unit_cxcywh(g.boxes, im.width, im.height)))
    return out


def samples_from_merged(data: SyntheticData, merged: dict, query: str = "ALL") -> list[Sample]:
    index = {im.id: i for i, im in enumerate(data.dataset.images)}
    toks = tuple(tokenize(query))
    out = []
    for k, boxes in merged.items():
        im = data.dataset.images[index[k]]
        out.append(Sample(index[k], toks, xyxy_to_unit_cxcywh(boxes, im.width, im.height)))
    return out


def setting_samples(data: SyntheticData, setting: int, seed: int = 0) -> list[Sample]:
    """Training samples for caption-structure settings 1, 2, 3, 4 and 5.

    Setting 5 keeps the token-labelled groups; settings 1-4 merge them per image first.
    """
    if setting == 5:
        return samples_from_groups(data, data.groups)
    merged = ablation_setting1_merge(data.groups)
    if setting == 1:
        return samples_from_merged(data, merged)
    deduped = ablation_setting2_nms(merged, 0.9)
    if setting == 2:
        return samples_from_merged(data, deduped)
    if setting in (3, 4):
        return samples_from_groups(data, ablation_setting3_group(deduped, 6, seed))
    raise ValueError(f"unknown setting {setting}")


def images_as_float(images: np.ndarray) -> np.ndarray:
    return np.asarray(images, dtype=np.float64)[..., None] / 255.0


@dataclass
class TrainResult:
    params: dict
    history: list[dict] = field(default_factory=list)
    cpu_seconds: float = 0.0


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, images: np.ndarray,
          samples: Sequence[Sample], params: dict | None = None) -> TrainResult:
    """Minibatch training; deterministic for fixed seeds (no timing-dependent control flow)."""
    if not samples:
        raise ValueError("no training samples")
    p = init_params(model_cfg) if params is None else params
    opt = Adam(p, weight_decay=train_cfg.weight_decay)
    rng = np.random.default_rng(train_cfg.seed)
    imgs = images_as_float(images)
    order = rng.permutation(len(samples))
    cursor = 0
    history = []
    start = time.process_time()
    running = 0.0
    for step in range(train_cfg.steps):
        if cursor + train_cfg.batch_size > len(order):
            order = rng.permutation(len(samples))
            cursor = 0
        batch = [samples[i] for i in order[cursor:cursor + train_cfg.batch_size]]
        cursor += train_cfg.batch_size
        x = imgs[[s.image_index for s in batch]]
        targets = [s.targets.copy() for s in batch]
        if train_cfg.hflip:
            flip = rng.random(len(batch)) < 0.5
            x = np.where(flip[:, None, None, None], x[:, :, ::-1], x)
            for t, f in zip(targets, flip):
                if f:
                    t[:, 0] = 1.0 - t[:, 0]
        with nx.GradTape() as tape:
            outs = model_forward(x, [list(s.tokens) for s in batch], p, model_cfg)
            loss = set_loss(outs, targets, train_cfg.weights)
        tape.backward(loss)
        norm = opt.step(train_cfg.lr_at(step), train_cfg.grad_clip)
        running = loss.item() if step == 0 else 0.98 * running + 0.02 * loss.item()
        if (step + 1) % train_cfg.log_every == 0 or step + 1 == train_cfg.steps:
            rec = {"step": step + 1, "loss": running, "grad_norm": norm,
                   "cpu_s": time.process_time() - start}
            history.append(rec)
            log.info("step %(step)d loss %(loss).4f |g| %(grad_norm).3f cpu %(cpu_s).0fs", rec)
    return TrainResult(p, history, time.process_time() - start)


def detect_split(params: dict, model_cfg: ModelConfig, data: SyntheticData, query: str,
                 batch_size: int = 64) -> list:
    ids = [im.id for im in data.dataset.images]
    by_id = predict_batch(images_as_float(data.images), query, params, model_cfg, ids,
                          source_query=query, batch_size=batch_size)
    return [d for k in ids for d in by_id[k]]


def evaluate_query(params: dict, model_cfg: ModelConfig, data: SyntheticData, query: str,
                   eval_cfg: EvalConfig = EvalConfig(), gts=None) -> dict:
    """Report for one query on a split; ``gts`` defaults to every annotated box."""
    dets = detect_split(params, model_cfg, data, query)
    gts = data.dataset.annotations if gts is None else gts
    sizes = {im.id: (im.width, im.height) for im in data.dataset.images}
    return evaluate(dets, gts, sizes, eval_cfg)
