"""Modality identities shared by the model, the toy world and the trainer."""
from __future__ import annotations

import enum

from mmflow.errors import ContractError


class Modality(enum.IntEnum):
    RGB = 0
    DEPTH = 1
    FLOW = 2
    SEGMENTATION = 3
    KEYPOINTS = 4
    PARTS = 5

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value: "str | int | Modality") -> "Modality":
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            try:
                return cls[value.strip().upper()]
            except KeyError:
                pass
            if value.strip().isdigit():
                value = int(value)
            else:
                raise ContractError(f"unknown modality {value!r}")
        try:
            return cls(int(value))
        except ValueError:
            raise ContractError(f"unknown modality id {value!r}") from None


class Alignment(enum.Enum):
    PIXEL_ALIGNED = "pixel_aligned"
    PIXEL_UNALIGNED = "pixel_unaligned"


AUXILIARY = (Modality.DEPTH, Modality.FLOW, Modality.SEGMENTATION, Modality.KEYPOINTS, Modality.PARTS)

_ALIGNMENT = {
    Modality.RGB: Alignment.PIXEL_ALIGNED,
    Modality.DEPTH: Alignment.PIXEL_ALIGNED,
    Modality.FLOW: Alignment.PIXEL_ALIGNED,
    Modality.PARTS: Alignment.PIXEL_ALIGNED,
    Modality.SEGMENTATION: Alignment.PIXEL_UNALIGNED,
    Modality.KEYPOINTS: Alignment.PIXEL_UNALIGNED,
}

# Type descriptions fed to the modality branch of the cross-attention.
MODALITY_PROMPTS = {
    Modality.DEPTH: "depth map",
    Modality.FLOW: "optical flow",
    Modality.SEGMENTATION: "segmentation mask",
    Modality.KEYPOINTS: "keypoint skeleton",
    Modality.PARTS: "part map",
}


def alignment_of(modality: "Modality | int | str") -> Alignment:
    return _ALIGNMENT[Modality.parse(modality)]


def pixel_aligned(modalities) -> list[Modality]:
    return [m for m in map(Modality.parse, modalities) if alignment_of(m) is Alignment.PIXEL_ALIGNED]
