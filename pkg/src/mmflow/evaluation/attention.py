"""Self-attention mass split into the RGB / modality quadrants."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mmflow.errors import ContractError
from mmflow.modality import MODALITY_PROMPTS, Modality

REGIONS = ("rr", "mm", "rm", "mr")


@dataclass(frozen=True)
class AttnQuadrantStats:
    """Per block: share of total attention mass in each region (query -> key).

    ``rr``: RGB queries on RGB keys, ``rm``: RGB queries on modality keys, and
    so on. ``row_family`` holds the same masses normalised per query family so
    ``rr + rm == 1`` and ``mm + mr == 1``.
    """

    blocks: list
    row_family: list
    cross_ratio: list

    @property
    def mean_cross_ratio(self) -> float:
        return float(np.mean(self.cross_ratio))

    def to_dict(self) -> dict:
        return {"blocks": self.blocks, "row_family": self.row_family,
                "cross_ratio": self.cross_ratio, "mean_cross_ratio": self.mean_cross_ratio}


def quadrant_masses(probs: np.ndarray, n_r: int) -> tuple[dict, dict]:
    """Split ``[B, H, L, L]`` softmax rows at ``n_r``; average over batch, heads and rows."""
    p = np.asarray(probs, dtype=np.float64)
    L = p.shape[-1]
    if not 0 < n_r < L:
        raise ContractError("no modality stream in the captured attention")
    r_rows, m_rows = p[..., :n_r, :], p[..., n_r:, :]
    fam = {
        "rr": float(r_rows[..., :n_r].sum(-1).mean()),
        "rm": float(r_rows[..., n_r:].sum(-1).mean()),
        "mm": float(m_rows[..., n_r:].sum(-1).mean()),
        "mr": float(m_rows[..., :n_r].sum(-1).mean()),
    }
    share_r, share_m = n_r / L, (L - n_r) / L
    tot = {k: fam[k] * (share_r if k[0] == "r" else share_m) for k in REGIONS}
    return tot, fam


def attn_quadrants(model, rgb, aux, modality, t_r: float, t_m: float, prompt: str = "") -> AttnQuadrantStats:
    """Capture every block's self-attention on one (batch of) sample(s) and split it."""
    if modality is None or aux is None:
        raise ContractError("attention quadrants need a model run with a modality stream (no modality stream given)")
    rgb = np.asarray(rgb)
    aux = np.asarray(aux)
    if rgb.ndim == 4:
        rgb, aux = rgb[None], aux[None]
    B = rgb.shape[0]
    mod = Modality.parse(modality)
    capture: list = []
    prompts = list(prompt) if isinstance(prompt, (list, tuple)) else [prompt] * B
    model.predict(rgb, aux, np.full(B, int(mod)), prompts, [MODALITY_PROMPTS[mod]] * B,
                  np.full(B, t_r), np.full(B, t_m), capture=capture)
    if not capture:
        raise ContractError("model has no attention blocks to inspect")
    n_r = capture[0].shape[-1] // 2
    blocks, fams, cross = [], [], []
    for probs in capture:
        tot, fam = quadrant_masses(probs, n_r)
        blocks.append(tot)
        fams.append(fam)
        cross.append((tot["rm"] + tot["mr"]) / sum(tot.values()))
    return AttnQuadrantStats(blocks, fams, cross)
