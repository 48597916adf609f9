"""Unified two-stream diffusion transformer.

RGB tokens and auxiliary-modality tokens are kept stacked along the batch
axis as ``X[S * B, N, d]`` (``S = 2`` streams, or ``S = 1`` for RGB-only
models). Self-attention regroups them per sample into ``[B, S * N, d]`` so
both streams attend jointly, while cross-attention, the MLP and the AdaLN
modulation act row-wise and therefore per stream.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from mmflow.errors import ContractError, ShapeError
from mmflow.modality import Modality
from mmflow.model.config import ModelConfig
from mmflow.model.layers import (
    NEG_INF,
    attention,
    linear,
    modulate,
    patch_positions,
    rope_tables,
    timestep_sinusoid,
    tokenize,
)
import mmflow.numerics.autodiff as T
from mmflow.numerics.rng import Rng
from mmflow.numerics.autodiff import Tensor

N_MODALITIES = len(Modality)
# Order of the nine per-block modulation vectors.
MOD_CHUNKS = ("shift_sa", "scale_sa", "gate_sa", "shift_ca", "scale_ca", "gate_ca",
              "shift_mlp", "scale_mlp", "gate_mlp")


def _xavier(rng: Rng, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    shape = shape or (fan_in, fan_out)
    return (rng.uniform(shape) * 2 - 1) * limit


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    rng = Rng(seed).derive(0x1417)
    d, P, dt = cfg.d_model, cfg.patch_dim, cfg.text_dim
    hid = cfg.mlp_ratio * d
    raw: dict[str, np.ndarray] = {
        "shared_in.w": _xavier(rng, P, d),
        "shared_in.b": np.zeros(d),
        "t_mlp.w1": rng.normal((d, d), np.float64) * 0.02,
        "t_mlp.b1": np.zeros(d),
        "t_mlp.w2": rng.normal((d, d), np.float64) * 0.02,
        "t_mlp.b2": np.zeros(d),
        "modality_table": rng.normal((N_MODALITIES, d), np.float64) * 0.02,
        "text.table": rng.normal((cfg.vocab, dt), np.float64) * 0.02,
        "text.null": rng.normal((1, dt), np.float64) * 0.02,
    }
    for i in range(cfg.n_blocks):
        p = f"blocks.{i}."
        raw.update({
            p + "mod.w": np.zeros((d, 9 * d)),
            p + "mod.b": np.zeros(9 * d),
            p + "attn.qkv.w": _xavier(rng, d, 3 * d),
            p + "attn.qkv.b": np.zeros(3 * d),
            p + "attn.out.w": _xavier(rng, d, d),
            p + "attn.out.b": np.zeros(d),
            p + "xattn.q.w": _xavier(rng, d, d),
            p + "xattn.q.b": np.zeros(d),
            p + "xattn.kv.w": _xavier(rng, dt, 2 * d),
            p + "xattn.kv.b": np.zeros(2 * d),
            p + "xattn.out.w": _xavier(rng, d, d),
            p + "xattn.out.b": np.zeros(d),
            p + "mlp.w1": _xavier(rng, d, hid),
            p + "mlp.b1": np.zeros(hid),
            p + "mlp.w2": _xavier(rng, hid, d),
            p + "mlp.b2": np.zeros(d),
        })
    raw["final.mod.w"] = np.zeros((d, 2 * d))
    raw["final.mod.b"] = np.zeros(2 * d)
    # One independently initialised un-embedding per modality, flattened for row gathers.
    raw["heads.w"] = np.stack([_xavier(rng, d, P).reshape(-1) for _ in range(N_MODALITIES)])
    raw["heads.b"] = np.zeros((N_MODALITIES, P))
    return {k: Tensor(v.astype(dtype), requires_grad=True) for k, v in raw.items()}


class UnifiedDiT:
    """Velocity predictor ``u([r_t, m_t], captions, t_r, t_m)``."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32,
                 params: dict[str, Tensor] | None = None):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params = params if params is not None else init_params(config, seed, dtype)
        pos = patch_positions(config.patch_grid)
        self.positions = pos
        cos_r, sin_r = rope_tables(pos, config.rope_bands, 0, dtype=self.dtype)
        cos_m, sin_m = rope_tables(pos, config.rope_bands, config.patch_grid[2], dtype=self.dtype)
        self._rope = {1: (cos_r, sin_r),
                      2: (np.concatenate([cos_r, cos_m]), np.concatenate([sin_r, sin_m]))}

    # ------------------------------------------------------------ bookkeeping
    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype) -> "UnifiedDiT":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()}
        return UnifiedDiT(self.config, dtype=dtype, params=params)

    # ------------------------------------------------------------ embeddings
    def text_embed(self, prompt: str | None, drop: bool = False) -> Tensor:
        """Caption embedding rows; the learned null row when dropped or empty."""
        ids = [] if (drop or prompt is None) else tokenize(prompt, self.config.vocab)
        if not ids:
            return T.embedding_lookup(self.params["text.null"], np.zeros(1, dtype=np.int64))
        return T.embedding_lookup(self.params["text.table"], np.asarray(ids, dtype=np.int64))

    def _context(self, prompts: Sequence[str | None]) -> tuple[Tensor, np.ndarray]:
        """Padded caption batch ``[B, L, text_dim]`` plus additive key mask ``[B, 1, 1, L]``.

        ``None`` (or an empty prompt) selects the null embedding.
        """
        vocab = self.config.vocab
        rows = [tokenize(p, vocab) if p else [] for p in prompts]
        rows = [r if r else [vocab] for r in rows]
        length = max(len(r) for r in rows)
        idx = np.full((len(rows), length), vocab, dtype=np.int64)
        bias = np.full((len(rows), 1, 1, length), NEG_INF, dtype=self.dtype)
        for i, r in enumerate(rows):
            idx[i, :len(r)] = r
            bias[i, ..., :len(r)] = 0
        table = T.concat([self.params["text.table"], self.params["text.null"]], axis=0)
        return T.embedding_lookup(table, idx), bias

    def time_embed(self, t) -> Tensor:
        cfg = self.config
        freq = Tensor(timestep_sinusoid(np.asarray(t) * cfg.time_scale, cfg.d_model, self.dtype))
        p = self.params
        h = T.silu(linear(freq, p["t_mlp.w1"], p["t_mlp.b1"]))
        return linear(h, p["t_mlp.w2"], p["t_mlp.b2"])

    def conditioning(self, t_r, t_m, modality: np.ndarray | None) -> Tensor:
        """Stacked AdaLN inputs ``[S * B, d]``: RGB rows then modality rows."""
        p = self.params
        cond_r = self.time_embed(t_r)
        if self.config.rgb_table_row:
            rgb_ids = np.zeros(len(cond_r.data), dtype=np.int64)
            cond_r = T.add(cond_r, T.embedding_lookup(p["modality_table"], rgb_ids))
        if modality is None:
            return cond_r
        cond_m = T.add(T.embedding_lookup(p["modality_table"], modality), self.time_embed(t_m))
        return T.concat([cond_r, cond_m], axis=0)

    def modulation(self, block: int, cond: Tensor) -> Tensor:
        """Nine modulation vectors per conditioning row: ``[rows, 9, d]`` (see ``MOD_CHUNKS``)."""
        p = self.params
        pre = f"blocks.{block}."
        out = linear(T.silu(cond), p[pre + "mod.w"], p[pre + "mod.b"])
        return T.reshape(out, (cond.shape[0], 9, self.config.d_model))

    # ------------------------------------------------------------ tokens
    def patchify(self, grids) -> Tensor:
        """``[B, T, H, W, C]`` grids to ``[B, N, d]`` tokens via the shared input layer."""
        cfg = self.config
        g = grids if isinstance(grids, Tensor) else Tensor(np.asarray(grids, dtype=self.dtype))
        if g.ndim == 4:
            g = T.reshape(g, (1,) + g.shape)
        B, Tt, H, W, C = g.shape
        if (Tt, H, W) != cfg.grid or C != cfg.c_in:
            raise ShapeError(f"grid shape {(Tt, H, W, C)} does not match config {cfg.grid + (cfg.c_in,)}")
        pt, ph, pw = cfg.patch
        tp, hp, wp = cfg.patch_grid
        x = T.reshape(g, (B, tp, pt, hp, ph, wp, pw, C))
        x = T.transpose(x, (0, 1, 3, 5, 2, 4, 6, 7))
        x = T.reshape(x, (B, tp * hp * wp, cfg.patch_dim))
        return linear(x, self.params["shared_in.w"], self.params["shared_in.b"])

    def unpatchify(self, patches: Tensor) -> Tensor:
        cfg = self.config
        B = patches.shape[0]
        pt, ph, pw = cfg.patch
        tp, hp, wp = cfg.patch_grid
        x = T.reshape(patches, (B, tp, hp, wp, pt, ph, pw, cfg.c_in))
        x = T.transpose(x, (0, 1, 4, 2, 5, 3, 6, 7))
        return T.reshape(x, (B,) + cfg.grid + (cfg.c_in,))

    def _heads(self, x: Tensor, head_ids: np.ndarray) -> Tensor:
        cfg = self.config
        w = T.reshape(T.embedding_lookup(self.params["heads.w"], head_ids),
                      (len(head_ids), cfg.d_model, cfg.patch_dim))
        b = T.reshape(T.embedding_lookup(self.params["heads.b"], head_ids), (len(head_ids), 1, cfg.patch_dim))
        return T.add(T.matmul(x, w), b)

    # ------------------------------------------------------------ blocks
    def _self_attention(self, block: int, h: Tensor, streams: int, capture) -> Tensor:
        cfg = self.config
        p = self.params
        pre = f"blocks.{block}.attn."
        SB, N, d = h.shape
        B = SB // streams
        H, dh = cfg.n_heads, cfg.d_head
        if streams == 2:
            h = T.reshape(T.transpose(T.reshape(h, (2, B, N, d)), (1, 0, 2, 3)), (B, 2 * N, d))
        L = streams * N
        qkv = T.reshape(linear(h, p[pre + "qkv.w"], p[pre + "qkv.b"]), (B, L, 3, H, dh))
        qkv = T.transpose(qkv, (2, 0, 3, 1, 4))
        cos, sin = self._rope[streams]
        q = T.rotary_rotate_pairs(T.reshape(T.slice(qkv, 0, 0, 1), (B, H, L, dh)), cos, sin)
        k = T.rotary_rotate_pairs(T.reshape(T.slice(qkv, 0, 1, 2), (B, H, L, dh)), cos, sin)
        v = T.reshape(T.slice(qkv, 0, 2, 3), (B, H, L, dh))
        o = attention(q, k, v, capture=capture)
        o = T.reshape(T.transpose(o, (0, 2, 1, 3)), (B, L, d))
        o = linear(o, p[pre + "out.w"], p[pre + "out.b"])
        if streams == 2:
            o = T.reshape(T.transpose(T.reshape(o, (B, 2, N, d)), (1, 0, 2, 3)), (SB, N, d))
        return o

    def _cross_attention(self, block: int, h: Tensor, ctx: Tensor, ctx_bias: np.ndarray) -> Tensor:
        cfg = self.config
        p = self.params
        pre = f"blocks.{block}.xattn."
        SB, N, d = h.shape
        H, dh = cfg.n_heads, cfg.d_head
        Lc = ctx.shape[1]
        q = T.transpose(T.reshape(linear(h, p[pre + "q.w"], p[pre + "q.b"]), (SB, N, H, dh)), (0, 2, 1, 3))
        kv = T.reshape(linear(ctx, p[pre + "kv.w"], p[pre + "kv.b"]), (SB, Lc, 2, H, dh))
        kv = T.transpose(kv, (2, 0, 3, 1, 4))
        k = T.reshape(T.slice(kv, 0, 0, 1), (SB, H, Lc, dh))
        v = T.reshape(T.slice(kv, 0, 1, 2), (SB, H, Lc, dh))
        o = attention(q, k, v, mask_bias=ctx_bias)
        o = T.reshape(T.transpose(o, (0, 2, 1, 3)), (SB, N, d))
        return linear(o, p[pre + "out.w"], p[pre + "out.b"])

    def _mlp(self, block: int, h: Tensor) -> Tensor:
        p = self.params
        pre = f"blocks.{block}.mlp."
        return linear(T.silu(linear(h, p[pre + "w1"], p[pre + "b1"])), p[pre + "w2"], p[pre + "b2"])

    def block_forward(self, block: int, x: Tensor, mod: Tensor, ctx: Tensor, ctx_bias: np.ndarray,
                      streams: int, capture: list | None = None) -> Tensor:
        """One block on stacked streams: self-attn, dual cross-attn, MLP; all gated residuals."""
        chunk = {name: T.slice(mod, 1, i, i + 1) for i, name in enumerate(MOD_CHUNKS)}
        h = modulate(x, chunk["shift_sa"], chunk["scale_sa"])
        x = T.add(x, T.mul(chunk["gate_sa"], self._self_attention(block, h, streams, capture)))
        h = modulate(x, chunk["shift_ca"], chunk["scale_ca"])
        x = T.add(x, T.mul(chunk["gate_ca"], self._cross_attention(block, h, ctx, ctx_bias)))
        h = modulate(x, chunk["shift_mlp"], chunk["scale_mlp"])
        return T.add(x, T.mul(chunk["gate_mlp"], self._mlp(block, h)))

    # ------------------------------------------------------------ full model
    def forward(self, r_t, m_t, modality, prompts_r: Sequence[str | None],
                prompts_m: Sequence[str | None] | None, t_r, t_m=None,
                capture: list | None = None, skip_blocks: bool = False) -> tuple[Tensor, Tensor | None]:
        """Predict velocities for a batch.

        ``r_t``/``m_t`` are ``[B, T, H, W, C]`` (``m_t=None`` for an RGB-only
        forward). ``modality`` holds one auxiliary id per sample. Prompts set
        to ``None`` use the null caption. Returns ``(v_r, v_m)`` tensors.
        """
        r_t = np.asarray(r_t, dtype=self.dtype)
        if r_t.ndim == 4:
            r_t = r_t[None]
        B = r_t.shape[0]
        t_r = np.broadcast_to(np.asarray(t_r, dtype=np.float64), (B,))
        streams = 1 if m_t is None else 2
        mod_ids = None
        if streams == 2:
            m_t = np.asarray(m_t, dtype=self.dtype)
            if m_t.ndim == 4:
                m_t = m_t[None]
            if m_t.shape != r_t.shape:
                raise ShapeError(f"stream shapes differ: {r_t.shape} vs {m_t.shape}")
            mod_ids = np.broadcast_to(np.asarray(modality, dtype=np.int64), (B,)).copy()
            if mod_ids.min() < 0 or mod_ids.max() >= N_MODALITIES:
                raise ContractError(f"unknown modality id in {mod_ids.tolist()}")
            t_m = np.broadcast_to(np.asarray(t_m, dtype=np.float64), (B,))
            grids = np.concatenate([r_t, m_t], axis=0)
            prompts = list(prompts_r) + list(prompts_m)
            head_ids = np.concatenate([np.zeros(B, dtype=np.int64), mod_ids])
        else:
            grids = r_t
            prompts = list(prompts_r)
            head_ids = np.zeros(B, dtype=np.int64)
        if len(prompts) != streams * B:
            raise ShapeError(f"expected {streams * B} prompts, got {len(prompts)}")

        x = self.patchify(grids)
        cond = self.conditioning(t_r, t_m, mod_ids)
        if not skip_blocks and self.config.n_blocks:
            ctx, ctx_bias = self._context(prompts)
            for i in range(self.config.n_blocks):
                x = self.block_forward(i, x, self.modulation(i, cond), ctx, ctx_bias, streams, capture)
        fm = linear(T.silu(cond), self.params["final.mod.w"], self.params["final.mod.b"])
        fm = T.reshape(fm, (cond.shape[0], 2, self.config.d_model))
        x = modulate(x, T.slice(fm, 1, 0, 1), T.slice(fm, 1, 1, 2))
        out = self.unpatchify(self._heads(x, head_ids))
        if streams == 1:
            return out, None
        return T.slice(out, 0, 0, B), T.slice(out, 0, B, 2 * B)

    def predict(self, *args, **kwargs) -> tuple[np.ndarray, np.ndarray | None]:
        """``forward`` outside any tape, returning plain arrays."""
        if T.active_tape() is not None:
            raise ContractError("predict must run outside a tape")
        v_r, v_m = self.forward(*args, **kwargs)
        return v_r.data, (None if v_m is None else v_m.data)
