"""Multi-scale deformable attention over a feature pyramid.

Sampling coordinates are continuous pixel coordinates in which pixel (row i,
col j) covers [j, j+1] x [i, i+1] and its value sits at the center
(j + 0.5, i + 0.5). Samples that fall outside a map read zeros.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .numerics import ConfigError, Tensor, _record, linear, mul, reshape, softmax, xavier


@dataclass
class SampleCounter:
    """Counts sampled keys so complexity claims can be asserted without timing."""

    samples: int = 0
    pixel_reads: int = 0

    def reset(self) -> None:
        self.samples = 0
        self.pixel_reads = 0


COUNTER = SampleCounter()


@dataclass
class FeaturePyramid:
    """Batched value maps ``levels[l]`` of shape [B, H_l, W_l, C].

    ``frames[l]`` is the (width, height) extent, in level pixels, that the
    normalized [0,1] coordinate frame maps onto; it defaults to the full map and
    stays fixed when a map is zero-padded.
    """

    levels: list[Tensor]
    frames: list[tuple[float, float]] = field(default_factory=list)
    flat: Tensor | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.levels:
            raise ConfigError("a feature pyramid needs at least one level")
        chans = {lv.shape[-1] for lv in self.levels}
        if len(chans) != 1:
            raise ConfigError(f"pyramid levels disagree on channel count: {sorted(chans)}")
        if not self.frames:
            self.frames = [(float(lv.shape[2]), float(lv.shape[1])) for lv in self.levels]

    @property
    def channels(self) -> int:
        return self.levels[0].shape[-1]

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [(lv.shape[1], lv.shape[2]) for lv in self.levels]

    def flatten(self) -> Tensor:
        from .numerics import concat

        if self.flat is not None:
            return self.flat
        b, c = self.levels[0].shape[0], self.channels
        return concat([reshape(lv, (b, -1, c)) for lv in self.levels], axis=1)

    def cell_centers(self) -> np.ndarray:
        """Normalized centre of every flattened position, shape [N, 2]."""
        pts = []
        for (h, w), (fw, fh) in zip(self.shapes, self.frames):
            ys, xs = np.meshgrid((np.arange(h) + 0.5) / fh, (np.arange(w) + 0.5) / fw, indexing="ij")
            pts.append(np.stack([xs.ravel(), ys.ravel()], axis=-1))
        return np.concatenate(pts, axis=0)


def _corner_terms(loc: np.ndarray, shapes: Sequence[tuple[int, int]]):
    """Flat indices, validity and bilinear fractions for the four neighbours of each sample.

    loc: [..., L, K, 2] pixel coordinates. Returns idx/valid of shape [..., L, K, 4]
    (corner order 00, 01, 10, 11 as (dy, dx)) and fx, fy of shape [..., L, K].
    """
    hs = np.array([h for h, _ in shapes], dtype=np.int64)[:, None]
    ws = np.array([w for _, w in shapes], dtype=np.int64)[:, None]
    starts = np.concatenate([[0], np.cumsum(hs[:, 0] * ws[:, 0])[:-1]])[:, None]
    u = loc[..., 0] - 0.5
    v = loc[..., 1] - 0.5
    x0 = np.floor(u)
    y0 = np.floor(v)
    fx = u - x0
    fy = v - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    idx, valid = [], []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xi, yi = x0 + dx, y0 + dy
        ok = (xi >= 0) & (xi < ws) & (yi >= 0) & (yi < hs)
        idx.append(np.where(ok, starts + np.clip(yi, 0, hs - 1) * ws + np.clip(xi, 0, ws - 1), 0))
        valid.append(ok)
    return np.stack(idx, -1), np.stack(valid, -1), fx, fy


def deformable_sample(value: Tensor, shapes: Sequence[tuple[int, int]], loc: Tensor,
                      attn: Tensor) -> Tensor:
    """Attention-weighted bilinear reads from a flattened multi-level value map.

    value: [B, N, M, Dh] with N = sum_l H_l W_l; loc: [B, Q, M, L, K, 2] pixel
    coordinates per level; attn: [B, Q, M, L, K]. Returns [B, Q, M, Dh].
    """
    B, N, M, Dh = value.shape
    Q = loc.shape[1]
    L, K = loc.shape[3], loc.shape[4]
    if len(shapes) != L or sum(h * w for h, w in shapes) != N:
        raise ConfigError(f"value map of {N} positions does not match level shapes {list(shapes)}")
    if attn.shape != (B, Q, M, L, K):
        raise ConfigError(f"attention weights {attn.shape} do not match locations {loc.shape}")
    COUNTER.samples += B * Q * M * L * K
    COUNTER.pixel_reads += 4 * B * Q * M * L * K

    idx, valid, fx, fy = _corner_terms(loc.data, shapes)
    gx, gy = 1.0 - fx, 1.0 - fy
    bil = np.stack([gx * gy, fx * gy, gx * fy, fx * fy], axis=-1) * valid
    # sampling operator A: [B*Q*M, B*N*M] so that out = A @ value rows
    b_ix = np.arange(B).reshape(B, 1, 1, 1, 1, 1)
    m_ix = np.arange(M).reshape(1, 1, M, 1, 1, 1)
    rows = ((b_ix * N + idx) * M + m_ix).reshape(B, Q, M, -1)
    w = (attn.data[..., None] * bil).reshape(B, Q, M, -1)
    S = rows.shape[-1]
    indptr = np.arange(0, B * Q * M * S + 1, S)
    A = sp.csr_matrix((w.ravel(), rows.ravel(), indptr), shape=(B * Q * M, B * N * M))
    vflat = value.data.reshape(B * N * M, Dh)
    out = np.asarray(A @ vflat).reshape(B, Q, M, Dh)

    def backward(g):
        g_value = np.asarray(A.T @ g.reshape(B * Q * M, Dh)).reshape(B, N, M, Dh)
        dots = np.einsum("bqmsd,bqmd->bqms", vflat[rows], g, optimize=False).reshape(
            B, Q, M, L, K, 4) * valid
        s00, s01, s10, s11 = (dots[..., c] for c in range(4))
        g_attn = (dots * bil).sum(-1)
        a = attn.data
        g_u = a * (gy * (s01 - s00) + fy * (s11 - s10))
        g_v = a * (gx * (s10 - s00) + fx * (s11 - s01))
        return g_value, np.stack([g_u, g_v], axis=-1), g_attn

    return _record("deformable_sample", out, (value, loc, attn), backward)


def bilinear_sample(fmap: Tensor, point) -> Tensor:
    """Bilinear read of an [H, W, C] map at continuous pixel coordinates (x, y)."""
    H, W, C = fmap.shape
    pt = point if isinstance(point, Tensor) else Tensor(np.asarray(point, dtype=np.float64))
    value = reshape(fmap, (1, H * W, 1, C))
    loc = reshape(pt, (1, 1, 1, 1, 1, 2))
    out = deformable_sample(value, [(H, W)], loc, Tensor(np.ones((1, 1, 1, 1, 1))))
    return reshape(out, (C,))


# ---------------------------------------------------------------- parameters


def star_offsets(n_heads: int, n_levels: int, n_points: int, radius: float = 1.0) -> np.ndarray:
    """Initial offset bias: K directions per head, rotated per head, shape [M*L*K*2]."""
    m = np.arange(n_heads)[:, None]
    k = np.arange(n_points)[None, :]
    theta = 2 * math.pi * (k / n_points + m / (n_heads * n_points))
    pts = radius * np.stack([np.cos(theta), np.sin(theta)], axis=-1)  # [M,K,2]
    return np.broadcast_to(pts[:, None], (n_heads, n_levels, n_points, 2)).reshape(-1).copy()


def msda_params(rng: np.random.Generator, d: int, n_heads: int, n_levels: int, n_points: int,
                prefix: str = "") -> dict[str, np.ndarray]:
    if d % n_heads:
        raise ConfigError(f"width {d} is not divisible by {n_heads} heads")
    slots = n_heads * n_levels * n_points
    return {
        prefix + "value.w": xavier(rng, d, d),
        prefix + "value.b": np.zeros(d),
        prefix + "offset.w": np.zeros((d, 2 * slots)),
        prefix + "offset.b": star_offsets(n_heads, n_levels, n_points),
        prefix + "weight.w": np.zeros((d, slots)),
        prefix + "weight.b": np.zeros(slots),
        prefix + "out.w": xavier(rng, d, d),
        prefix + "out.b": np.zeros(d),
    }


# ---------------------------------------------------------------- forward


def sampling_locations(refs: Tensor, offsets: Tensor, frames: Sequence[tuple[float, float]]) -> Tensor:
    """refs [B,Q,2] normalized + offsets [B,Q,M,L,K,2] level pixels -> pixel coords."""
    B, Q = refs.shape[:2]
    scale = np.array(frames, dtype=np.float64).reshape(len(frames), 1, 2)
    ref_px = mul(reshape(refs, (B, Q, 1, 1, 1, 2)), scale)
    return offsets + ref_px


def msda_forward(queries: Tensor, refs, pyramid: FeaturePyramid, p: dict, prefix: str = "",
                 n_heads: int = 4, n_points: int = 4, value: Tensor | None = None) -> Tensor:
    """queries [B,Q,d] (or [Q,d]) attend to the pyramid around normalized refs [B,Q,2].

    ``value`` may carry a precomputed flattened pyramid [B,N,d] to avoid re-flattening.
    """
    squeeze = queries.ndim == 2
    refs = refs if isinstance(refs, Tensor) else Tensor(np.asarray(refs, dtype=np.float64))
    if squeeze:
        queries = reshape(queries, (1,) + queries.shape)
        refs = reshape(refs, (1,) + refs.shape)
    B, Q, d = queries.shape
    L = len(pyramid.levels)
    if d != pyramid.channels:
        raise ConfigError(f"query width {d} differs from pyramid channels {pyramid.channels}")
    if d % n_heads:
        raise ConfigError(f"width {d} is not divisible by {n_heads} heads")
    if refs.shape != (B, Q, 2):
        raise ConfigError(f"reference points have shape {refs.shape}, expected {(B, Q, 2)}")
    if p[prefix + "offset.w"].shape[1] != n_heads * L * n_points * 2:
        raise ConfigError("offset projection size does not equal 2*M*L*K")
    dh = d // n_heads
    flat = pyramid.flatten() if value is None else value
    N = flat.shape[1]
    v = reshape(linear(flat, p[prefix + "value.w"], p[prefix + "value.b"]), (B, N, n_heads, dh))
    off = reshape(linear(queries, p[prefix + "offset.w"], p[prefix + "offset.b"]),
                  (B, Q, n_heads, L, n_points, 2))
    logits = reshape(linear(queries, p[prefix + "weight.w"], p[prefix + "weight.b"]),
                     (B, Q, n_heads, L * n_points))
    attn = reshape(softmax(logits, axis=-1), (B, Q, n_heads, L, n_points))
    loc = sampling_locations(refs, off, pyramid.frames)
    heads = deformable_sample(v, pyramid.shapes, loc, attn)
    out = linear(reshape(heads, (B, Q, d)), p[prefix + "out.w"], p[prefix + "out.b"])
    return reshape(out, (Q, d)) if squeeze else out


def attention_weights(queries: np.ndarray, p: dict, prefix: str, n_heads: int, n_levels: int,
                      n_points: int) -> np.ndarray:
    """Normalized per-head attention weights [..., M, L, K] (forward only)."""
    logits = queries @ p[prefix + "weight.w"].data + p[prefix + "weight.b"].data
    logits = logits.reshape(queries.shape[:-1] + (n_heads, n_levels * n_points))
    z = np.exp(logits - logits.max(-1, keepdims=True))
    return (z / z.sum(-1, keepdims=True)).reshape(queries.shape[:-1] + (n_heads, n_levels, n_points))
