from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from mmflow.errors import ContractError


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_blocks: int = 4
    n_heads: int = 4
    patch: tuple[int, int, int] = (1, 4, 4)
    grid: tuple[int, int, int] = (8, 32, 32)
    c_in: int = 3
    text_dim: int = 128
    vocab: int = 256
    cfg_drop_prob: float = 0.1
    mlp_ratio: int = 4
    # Adds the RGB row of the modality table to the RGB stream's conditioning.
    rgb_table_row: bool = False
    # Scale applied to t in [0, 1] before the sinusoidal embedding.
    time_scale: float = 1000.0

    def __post_init__(self):
        object.__setattr__(self, "patch", tuple(int(v) for v in self.patch))
        object.__setattr__(self, "grid", tuple(int(v) for v in self.grid))
        self.validate()

    def validate(self) -> None:
        for axis, g, p in zip("THW", self.grid, self.patch):
            if p <= 0 or g % p:
                raise ContractError(f"grid extent {axis}={g} not divisible by patch {p}")
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_head % 2:
            raise ContractError(f"head width {self.d_head} must be even for rotary pairs")
        if self.d_head // 2 < 3:
            raise ContractError(f"head width {self.d_head} too small for three rotary sub-bands")
        if not 0.0 <= self.cfg_drop_prob <= 1.0:
            raise ContractError("cfg_drop_prob must lie in [0, 1]")
        if self.c_in <= 0 or self.vocab <= 0 or self.text_dim <= 0 or self.n_blocks < 0:
            raise ContractError("c_in, vocab, text_dim must be positive and n_blocks >= 0")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def rope_bands(self) -> tuple[int, int, int]:
        """Channel widths of the (t, h, w) rotary sub-bands; each is even."""
        pairs = self.d_head // 2
        base, rem = divmod(pairs, 3)
        bands = [base, base, base]
        for i in range(rem):
            bands[2 - i] += 1
        return tuple(2 * b for b in bands)

    @property
    def patch_grid(self) -> tuple[int, int, int]:
        return tuple(g // p for g, p in zip(self.grid, self.patch))

    @property
    def n_tokens(self) -> int:
        t, h, w = self.patch_grid
        return t * h * w

    @property
    def patch_dim(self) -> int:
        pt, ph, pw = self.patch
        return pt * ph * pw * self.c_in

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["patch"] = list(self.patch)
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def toy_config(**overrides) -> ModelConfig:
    """Reduced config used by the scripted experiments on a single CPU core.

    Width and head size match the default; only depth and the grid shrink.
    """
    base = dict(d_model=128, n_blocks=2, n_heads=4, patch=(1, 4, 4), grid=(2, 16, 16),
                text_dim=64, vocab=256, cfg_drop_prob=0.1)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_config(**overrides) -> ModelConfig:
    """Smallest useful config; used for finite-difference checks."""
    base = dict(d_model=12, n_blocks=2, n_heads=2, patch=(1, 4, 4), grid=(4, 8, 8),
                text_dim=8, vocab=32, cfg_drop_prob=0.0, mlp_ratio=2)
    base.update(overrides)
    return ModelConfig(**base)
