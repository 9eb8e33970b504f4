"""Toy MAVL detector: patch pyramid, deformable encoder/decoder, late text fusion."""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .geometry import Box, Detection
from .matching_losses import DetectionSet
from .msda import FeaturePyramid, msda_forward, msda_params
from .numerics import ConfigError, Tensor

VOCAB = (
    "<pad>", "ALL", "OBJECTS", "ENTITIES", "SMALL", "LITTLE", "LARGE", "BIG",
    "VISIBLE", "OBSCURE", "AND", "THE", "SHAPES", "THINGS", "EVERY", "ITEMS",
)
PAD = 0
MAGIC = b"MAVLKIT1"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    in_channels: int = 1
    strides: tuple[int, ...] = (8, 16, 32)
    d: int = 64
    enc_layers: int = 2
    dec_layers: int = 2
    queries: int = 24
    fusion_blocks: int = 6
    vocab_size: int = len(VOCAB)
    max_tokens: int = 4
    msda_heads: int = 4
    msda_points: int = 4
    attn_heads: int = 4
    ffn_hidden: int = 128
    decoder_aux_loss: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if self.fusion_blocks < 1 or self.queries < 1:
            raise ConfigError("fusion_blocks and queries must be >= 1")
        if any(self.image_size % s for s in self.strides):
            raise ConfigError(f"strides {self.strides} must divide image size {self.image_size}")
        if list(self.strides) != sorted(set(self.strides)):
            raise ConfigError("strides must strictly increase")
        for heads in (self.msda_heads, self.attn_heads):
            if self.d % heads:
                raise ConfigError(f"width {self.d} is not divisible by {heads} heads")
        if self.d % 4:
            raise ConfigError("width must be divisible by 4 for 2-D sine positions")

    @property
    def levels(self) -> int:
        return len(self.strides)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def tokenize(text: str | Sequence[str]) -> list[int]:
    words = text.split() if isinstance(text, str) else list(text)
    try:
        return [VOCAB.index(w.upper()) for w in words]
    except ValueError as exc:
        raise ValueError(f"query {text!r} uses a word outside the toy vocabulary") from exc


# ---------------------------------------------------------------- parameters


def init_params(cfg: ModelConfig) -> dict[str, Tensor]:
    rng = np.random.default_rng(cfg.seed)
    d = cfg.d
    p: dict[str, np.ndarray] = {}
    for l, s in enumerate(cfg.strides):
        p[f"patch.{l}.w"] = nx.xavier(rng, s * s * cfg.in_channels, d)
        p[f"patch.{l}.b"] = np.zeros(d)
    p["level_embed"] = rng.normal(0, 0.02, size=(cfg.levels, d))
    for e in range(cfg.enc_layers):
        pre = f"enc.{e}."
        p[pre + "ln1.g"], p[pre + "ln1.b"] = np.ones(d), np.zeros(d)
        p.update(msda_params(rng, d, cfg.msda_heads, cfg.levels, cfg.msda_points, pre + "msda."))
        p[pre + "ln2.g"], p[pre + "ln2.b"] = np.ones(d), np.zeros(d)
        p.update(_mlp(rng, d, cfg.ffn_hidden, pre + "mlp."))
    p["query.embed"] = rng.normal(0, 1.0, size=(cfg.queries, d))
    p["query.pos"] = rng.normal(0, 1.0, size=(cfg.queries, d))
    p["ref.w"] = nx.xavier(rng, d, 2)
    p["ref.b"] = np.zeros(2)
    for i in range(cfg.dec_layers):
        pre = f"dec.{i}."
        p[pre + "ln1.g"], p[pre + "ln1.b"] = np.ones(d), np.zeros(d)
        p.update(nx.attention_params(rng, d, pre + "attn."))
        p[pre + "ln_ca.g"], p[pre + "ln_ca.b"] = np.ones(d), np.zeros(d)
        p.update(msda_params(rng, d, cfg.msda_heads, cfg.levels, cfg.msda_points, pre + "msda."))
        p[pre + "ln2.g"], p[pre + "ln2.b"] = np.ones(d), np.zeros(d)
        p.update(_mlp(rng, d, cfg.ffn_hidden, pre + "mlp."))
    p["dec.norm.g"], p["dec.norm.b"] = np.ones(d), np.zeros(d)
    p["tok.embed"] = rng.normal(0, 1.0, size=(cfg.vocab_size, d))
    p["tok.pos"] = rng.normal(0, 0.02, size=(cfg.max_tokens, d))
    p["fuse.pos"] = rng.normal(0, 0.02, size=(cfg.queries + cfg.max_tokens, d))
    for f in range(cfg.fusion_blocks):
        p.update(nx.block_params(rng, d, cfg.ffn_hidden, f"fuse.{f}."))
    p["head.norm.g"], p["head.norm.b"] = np.ones(d), np.zeros(d)
    p["head.box.w1"], p["head.box.b1"] = nx.xavier(rng, d, d), np.zeros(d)
    p["head.box.w2"], p["head.box.b2"] = nx.xavier(rng, d, d), np.zeros(d)
    p["head.box.w3"] = np.zeros((d, 4))
    p["head.box.b3"] = np.array([0.0, 0.0, -1.5, -1.5])
    p["head.obj.w"] = nx.xavier(rng, d, 1)
    p["head.obj.b"] = np.array([-2.0])
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


def _mlp(rng, d, hidden, prefix):
    return {prefix + "w1": nx.xavier(rng, d, hidden), prefix + "b1": np.zeros(hidden),
            prefix + "w2": nx.xavier(rng, hidden, d), prefix + "b2": np.zeros(d)}


def sine_positions(points: np.ndarray, d: int) -> np.ndarray:
    """Fixed 2-D sinusoidal embedding of normalized (x, y) points, shape [N, d]."""
    nf = d // 4
    freqs = (2.0 ** np.arange(nf)) * math.pi
    x = points[:, :1] * freqs
    y = points[:, 1:2] * freqs
    return np.concatenate([np.sin(x), np.cos(x), np.sin(y), np.cos(y)], axis=1)


def patchify(images: np.ndarray, stride: int) -> np.ndarray:
    B, H, W, C = images.shape
    x = images.reshape(B, H // stride, stride, W // stride, stride, C)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(B, H // stride, W // stride, stride * stride * C)


def _as_batch(images) -> np.ndarray:
    a = np.asarray(images, dtype=np.float64)
    if a.ndim == 2:
        a = a[None, :, :, None]
    elif a.ndim == 3:
        a = a[None]
    return a


# ---------------------------------------------------------------- forward


def encode_image(images, p: dict, cfg: ModelConfig) -> FeaturePyramid:
    """Patch embeddings at every stride refined by MSDA self-attention layers."""
    imgs = _as_batch(images)
    B, H, W, C = imgs.shape
    if H != cfg.image_size or W != cfg.image_size or C != cfg.in_channels:
        raise ConfigError(f"image of shape {(H, W, C)} does not match config "
                          f"{(cfg.image_size, cfg.image_size, cfg.in_channels)}")
    d = cfg.d
    levels, frames = [], []
    for l, s in enumerate(cfg.strides):
        tok = nx.linear(Tensor(patchify(imgs, s)), p[f"patch.{l}.w"], p[f"patch.{l}.b"])
        tok = tok + p["level_embed"][l]
        levels.append(tok)
        frames.append((float(W // s), float(H // s)))
    pyr = FeaturePyramid(levels, frames)
    centers = pyr.cell_centers()
    pos = sine_positions(centers, d)
    x = nx.concat([nx.reshape(t, (B, -1, d)) for t in levels], axis=1) + pos
    if cfg.enc_layers == 0:
        return _pyramid_from_flat(x, pyr)
    refs = Tensor(np.broadcast_to(centers, (B,) + centers.shape).copy())
    for e in range(cfg.enc_layers):
        pre = f"enc.{e}."
        h = nx.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        x = x + msda_forward(h + pos, refs, pyr, p, pre + "msda.", cfg.msda_heads,
                             cfg.msda_points, value=h)
        x = x + nx.feed_forward(nx.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"]), p, pre + "mlp.")
    return _pyramid_from_flat(x, pyr)


def _pyramid_from_flat(x: Tensor, like: FeaturePyramid) -> FeaturePyramid:
    B, _, d = x.shape
    levels, start = [], 0
    for h, w in like.shapes:
        levels.append(nx.reshape(x[:, start:start + h * w], (B, h, w, d)))
        start += h * w
    pyr = FeaturePyramid(levels, list(like.frames))
    pyr.flat = x
    return pyr


def reference_logits(p: dict) -> Tensor:
    """Per-query reference point logits [Q, 2]; sigmoid gives points in (0,1)^2."""
    return nx.linear(p["query.pos"], p["ref.w"], p["ref.b"])


def decode_queries(pyramid: FeaturePyramid, p: dict, cfg: ModelConfig,
                   ref_logits: Tensor | None = None, return_all: bool = False):
    """Object queries refined by self-attention and MSDA cross-attention into the pyramid."""
    flat = getattr(pyramid, "flat", None)
    if flat is None:
        flat = pyramid.flatten()
        pyramid.flat = flat
    B = flat.shape[0]
    Q, d = cfg.queries, cfg.d
    if ref_logits is None:
        ref_logits = reference_logits(p)
    refs = nx.sigmoid(ref_logits)
    refs_b = nx.add(refs, np.zeros((B, Q, 2)))
    qpos = p["query.pos"]
    tgt = nx.add(p["query.embed"], np.zeros((B, Q, d)))
    outs = []
    for i in range(cfg.dec_layers):
        pre = f"dec.{i}."
        h = nx.layer_norm(tgt, p[pre + "ln1.g"], p[pre + "ln1.b"])
        qk = h + qpos
        tgt = tgt + nx.multi_head_attention(qk, qk, h, p, pre + "attn.", cfg.attn_heads)
        h = nx.layer_norm(tgt, p[pre + "ln_ca.g"], p[pre + "ln_ca.b"])
        tgt = tgt + msda_forward(h + qpos, refs_b, pyramid, p, pre + "msda.", cfg.msda_heads,
                                 cfg.msda_points, value=flat)
        tgt = tgt + nx.feed_forward(nx.layer_norm(tgt, p[pre + "ln2.g"], p[pre + "ln2.b"]),
                                    p, pre + "mlp.")
        if return_all:
            outs.append(nx.layer_norm(tgt, p["dec.norm.g"], p["dec.norm.b"]))
    if return_all:
        return outs
    return nx.layer_norm(tgt, p["dec.norm.g"], p["dec.norm.b"])


def embed_tokens(token_ids, p: dict, cfg: ModelConfig) -> Tensor:
    """Learned word + position embeddings; accepts [T'] or padded [B, T'] ids."""
    ids = np.asarray(token_ids, dtype=np.int64)
    squeeze = ids.ndim == 1
    ids = ids.reshape(1, -1) if squeeze else ids
    if ids.shape[1] < 1 or ids.shape[1] > cfg.max_tokens:
        raise ValueError(f"token query length {ids.shape[1]} outside [1, {cfg.max_tokens}]")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError(f"token id outside vocabulary of size {cfg.vocab_size}")
    out = p["tok.embed"][ids] + p["tok.pos"][: ids.shape[1]]
    return nx.reshape(out, out.shape[1:]) if squeeze else out


def detection_head(x: Tensor, ref_logits: Tensor, p: dict) -> DetectionSet:
    h = nx.layer_norm(x, p["head.norm.g"], p["head.norm.b"])
    logits = nx.linear(h, p["head.obj.w"], p["head.obj.b"])[..., 0]
    z = nx.gelu(nx.linear(h, p["head.box.w1"], p["head.box.b1"]))
    z = nx.gelu(nx.linear(z, p["head.box.w2"], p["head.box.b2"]))
    delta = nx.linear(z, p["head.box.w3"], p["head.box.b3"])
    center = nx.sigmoid(delta[..., :2] + ref_logits)
    size = nx.sigmoid(delta[..., 2:])
    return DetectionSet(nx.concat([center, size], axis=-1), logits)


def late_fusion_forward(query_reprs: Tensor, text_embs: Tensor, p: dict, cfg: ModelConfig,
                        ref_logits: Tensor | None = None,
                        text_mask: np.ndarray | None = None) -> list[DetectionSet]:
    """Concatenate queries and text, run the SA stack, decode the query slots after every block.

    ``text_mask`` ([B, T'] bool) marks padded text positions, which no token attends to.
    """
    squeeze = query_reprs.ndim == 2
    if squeeze:
        query_reprs = nx.reshape(query_reprs, (1,) + query_reprs.shape)
        text_embs = nx.reshape(text_embs, (1,) + text_embs.shape)
    B, Q, d = query_reprs.shape
    T = text_embs.shape[1]
    if text_embs.shape[0] != B or text_embs.shape[2] != d:
        raise ConfigError(f"text embeddings {text_embs.shape} do not fit queries {query_reprs.shape}")
    if ref_logits is None:
        ref_logits = reference_logits(p)
    x = nx.concat([query_reprs, text_embs], axis=1) + p["fuse.pos"][: Q + T]
    key_mask = None
    if text_mask is not None and np.any(text_mask):
        key_mask = np.concatenate([np.zeros((B, Q), dtype=bool), np.asarray(text_mask, bool)], axis=1)
    outputs = []
    for f in range(cfg.fusion_blocks):
        x = nx.self_attention_block(x, p, f"fuse.{f}.", cfg.attn_heads, key_mask=key_mask)
        ds = detection_head(x[:, :Q], ref_logits, p)
        if squeeze:
            ds = DetectionSet(nx.reshape(ds.boxes, (Q, 4)), nx.reshape(ds.logits, (Q,)))
        outputs.append(ds)
    return outputs


def pad_queries(queries: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad token id lists into [B, T'] ids plus a padding mask."""
    T = max(len(q) for q in queries)
    ids = np.full((len(queries), T), PAD, dtype=np.int64)
    for i, q in enumerate(queries):
        ids[i, : len(q)] = q
    return ids, ids == PAD


def model_forward(images, queries, p: dict, cfg: ModelConfig) -> list[DetectionSet]:
    """Full forward pass.

    ``images`` is [H,W], [H,W,C] or [B,H,W,C]; ``queries`` is one token list
    (shared by the batch) or one list per image.
    """
    imgs = _as_batch(images)
    B = imgs.shape[0]
    if queries and isinstance(queries[0], (int, np.integer)):
        queries = [list(queries)] * B
    if len(queries) != B:
        raise ValueError(f"{len(queries)} token queries for {B} images")
    ids, mask = pad_queries(queries)
    ref = reference_logits(p)
    pyr = encode_image(imgs, p, cfg)
    hs = decode_queries(pyr, p, cfg, ref)
    text = embed_tokens(ids, p, cfg)
    return late_fusion_forward(hs, text, p, cfg, ref, text_mask=mask)


def detections_from_set(ds: DetectionSet, index: int, image_id, image_size: tuple[int, int],
                        source_query: str | None = None) -> list[Detection]:
    """Corner-pixel detections for one batch element, sorted by descending score."""
    boxes = ds.boxes.data.reshape(-1, ds.boxes.shape[-2], 4)[index]
    scores = ds.objectness.reshape(-1, ds.logits.shape[-1])[index]
    W, H = image_size
    out = []
    for q in np.argsort(-scores, kind="stable"):
        cx, cy, w, h = boxes[q]
        x0 = min(max((cx - w / 2) * W, 0.0), W)
        y0 = min(max((cy - h / 2) * H, 0.0), H)
        x1 = min(max((cx + w / 2) * W, 0.0), W)
        y1 = min(max((cy + h / 2) * H, 0.0), H)
        out.append(Detection(image_id, Box(x0, y0, x1, y1), float(scores[q]), source_query))
    return out


def predict(image, query, p: dict, cfg: ModelConfig, eval_cfg=None, image_id=0,
            source_query: str | None = None) -> list[Detection]:
    """Detections from the last fusion head, highest score first (no thresholding)."""
    ids = tokenize(query) if isinstance(query, str) else list(query)
    outs = model_forward(image, ids, p, cfg)
    size = (cfg.image_size, cfg.image_size)
    dets = detections_from_set(outs[-1], 0, image_id, size, source_query)
    if eval_cfg is not None and eval_cfg.score_thresh is not None:
        dets = [d for d in dets if d.score > eval_cfg.score_thresh]
    return dets


def predict_batch(images: np.ndarray, query, p: dict, cfg: ModelConfig, image_ids: Sequence,
                  source_query: str | None = None, batch_size: int = 32) -> dict:
    """Run one query over many images; returns image_id -> detections."""
    ids = tokenize(query) if isinstance(query, str) else list(query)
    out = {}
    size = (cfg.image_size, cfg.image_size)
    for s in range(0, len(images), batch_size):
        chunk = _as_batch(images[s:s + batch_size]) if np.ndim(images) == 4 else np.stack(
            [_as_batch(im)[0] for im in images[s:s + batch_size]])
        ds = model_forward(chunk, ids, p, cfg)[-1]
        for k in range(chunk.shape[0]):
            iid = image_ids[s + k]
            out[iid] = detections_from_set(ds, k, iid, size, source_query)
    return out


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, cfg: ModelConfig, p: dict) -> None:
    Path(path).write_bytes(checkpoint_bytes(cfg, p))


def checkpoint_bytes(cfg: ModelConfig, p: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    header = json.dumps({"format_version": FORMAT_VERSION, "config": asdict(cfg)},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    for name, t in p.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, Tensor]]:
    return parse_checkpoint(Path(path).read_bytes())


def parse_checkpoint(data: bytes) -> tuple[ModelConfig, dict[str, Tensor]]:
    if data[:8] != MAGIC:
        raise ValueError("not a MAVLKIT1 checkpoint (bad magic)")
    pos = 8

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise ValueError(f"truncated checkpoint at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (hlen,) = struct.unpack("<I", take(4))
    header = json.loads(take(hlen).decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
    cfg = ModelConfig.from_dict(header["config"])
    params: dict[str, Tensor] = {}
    while pos < len(data):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(dims)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return cfg, params
