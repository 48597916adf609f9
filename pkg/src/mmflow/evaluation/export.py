"""Binary PPM (P6) frame export."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from mmflow.errors import DataIOError, ShapeError


def to_bytes8(frame) -> np.ndarray:
    f = np.clip(np.asarray(frame, dtype=np.float64), 0.0, 1.0)
    return np.round(255.0 * f).astype(np.uint8)


def encode_ppm(frame) -> bytes:
    f = np.asarray(frame)
    if f.ndim != 3 or f.shape[-1] != 3:
        raise ShapeError(f"PPM frames must be [H, W, 3], got {f.shape}")
    h, w = f.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + to_bytes8(f).tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6" or int(parts[3]) != 255:
        raise DataIOError("not an 8-bit binary PPM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)


def export_frames(grids: dict, out_dir: str | Path) -> list[Path]:
    """One ``<name>_<frame>.ppm`` per frame of each ``[T, H, W, 3]`` grid."""
    out = Path(out_dir)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name in sorted(grids):
            g = np.asarray(grids[name])
            if g.ndim == 5 and g.shape[0] == 1:
                g = g[0]
            if g.ndim != 4:
                raise ShapeError(f"grid {name!r} must be [T, H, W, 3], got {g.shape}")
            for f in range(g.shape[0]):
                path = out / f"{name}_{f:03d}.ppm"
                path.write_bytes(encode_ppm(g[f]))
                written.append(path)
    except OSError as exc:
        raise DataIOError(f"cannot write frames to {out}: {exc}") from exc
    return written
