"""Stateless building blocks: text hashing, sinusoids, rotary tables, attention."""
from __future__ import annotations

import math
import zlib

import numpy as np

from mmflow.errors import ShapeError
import mmflow.numerics.autodiff as T
from mmflow.numerics.autodiff import Tensor

NEG_INF = -1e9


def tokenize(prompt: str, vocab: int) -> list[int]:
    """Whitespace tokens hashed into ``[0, vocab)`` with CRC32 (process-stable)."""
    return [zlib.crc32(tok.encode("utf-8")) % vocab for tok in prompt.lower().split()]


def timestep_sinusoid(t: np.ndarray, dim: int, dtype=np.float32, max_period: float = 10000.0) -> np.ndarray:
    """``[cos(t f_i), sin(t f_i)]`` with geometric frequencies; t has shape [B]."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros_like(emb[:, :1])], axis=1)
    return emb.astype(dtype)


def patch_positions(patch_grid: tuple[int, int, int]) -> np.ndarray:
    """Integer (t, h, w) coordinates of every patch in t-major raster order."""
    tt, hh, ww = np.meshgrid(*(np.arange(n) for n in patch_grid), indexing="ij")
    return np.stack([tt.ravel(), hh.ravel(), ww.ravel()], axis=1).astype(np.int64)


def rope_tables(positions: np.ndarray, bands: tuple[int, int, int], width_offset: int = 0,
                base: float = 10000.0, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Per-token cos/sin tables of shape [N, d_head / 2].

    Channels are split into contiguous (t, h, w) sub-bands; inside each band
    pair ``j`` of ``n`` rotates with frequency ``base ** (-2 j / width)``.
    ``width_offset`` is added to the w coordinate.
    """
    pos = np.asarray(positions, dtype=np.float64).copy()
    if pos.ndim != 2 or pos.shape[1] != 3:
        raise ShapeError(f"positions must be [N, 3], got {pos.shape}")
    pos[:, 2] += width_offset
    angles = []
    for axis, width in enumerate(bands):
        if width % 2:
            raise ShapeError(f"rotary sub-band width {width} is odd")
        freqs = base ** (-np.arange(0, width, 2) / width)
        angles.append(pos[:, axis:axis + 1] * freqs[None])
    ang = np.concatenate(angles, axis=1)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope3d(x: Tensor, positions: np.ndarray, bands: tuple[int, int, int], width_offset: int = 0) -> Tensor:
    """Rotate a ``[..., N, n_heads, d_head]`` query/key tensor by 3D positions."""
    if sum(bands) != x.shape[-1]:
        raise ShapeError(f"rotary bands {bands} do not cover head width {x.shape[-1]}")
    cos, sin = rope_tables(positions, bands, width_offset, dtype=x.dtype)
    return T.rotary_rotate_pairs(x, cos[:, None, :], sin[:, None, :])


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = T.matmul(x, w)
    return y if b is None else T.add(y, b)


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    """``LN(x) * (1 + scale) + shift``; shift/scale broadcast over tokens."""
    one = Tensor(np.ones((), dtype=x.dtype))
    return T.add(T.mul(T.layer_norm(x, 1e-6), T.add(scale, one)), shift)


def attention(q: Tensor, k: Tensor, v: Tensor, mask_bias: np.ndarray | None = None,
              capture: list | None = None) -> Tensor:
    """Scaled dot-product attention on ``[B, H, N, d]`` tensors.

    ``mask_bias`` is an additive constant broadcast against the logits.
    """
    scale = 1.0 / math.sqrt(q.shape[-1])
    logits = T.scalar_mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), scale)
    if mask_bias is not None:
        logits = T.add(logits, Tensor(np.asarray(mask_bias, dtype=q.dtype)))
    probs = T.softmax(logits)
    if capture is not None:
        capture.append(probs.data.copy())
    return T.matmul(probs, v)
