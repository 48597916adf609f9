"""Analytic moving-shape scenes rendered into six consistent modality grids.

Pixel ``(i, j)`` is covered by an object centred at ``(ch, cw)`` with
half-size ``s`` when ``(i - ch)^2 + (j - cw)^2 <= s^2`` (disk) or
``|i - ch| <= s and |j - cw| <= s`` (rectangle). Centres move linearly,
``c(f) = p0 + f * vel``. The object with the smallest ``z`` owns a pixel.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from mmflow.errors import ContractError, DataIOError
from mmflow.modality import Modality, alignment_of  # noqa: F401  (re-export)
from mmflow.numerics import blob
from mmflow.numerics.rng import Rng

V_MAX = 2.0
BACKGROUND_RGB = 0.1
BACKGROUND_DEPTH = 1.0
MAX_OBJECTS = 4
N_CLASSES = 8
MAX_RETRIES = 1000
DATASET_VERSION = 1

# Segmentation/keypoint palette: the seven non-black RGB cube corners plus mid grey.
PALETTE = np.array([
    [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 1.0, 1.0], [0.5, 0.5, 0.5],
])
# Appearance of each class in the RGB stream before depth shading.
CLASS_COLORS = np.array([
    [0.95, 0.35, 0.30], [0.35, 0.90, 0.40], [0.35, 0.45, 0.95], [0.95, 0.85, 0.30],
    [0.85, 0.40, 0.90], [0.35, 0.90, 0.90], [0.95, 0.95, 0.95], [0.95, 0.60, 0.25],
])
# Quadrant colours for the part map: top-left, top-right, bottom-left, bottom-right.
PART_COLORS = np.array([
    [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0],
])
COUNT_WORDS = ("one", "two", "three", "four")
SHAPES = ("disk", "rectangle")


@dataclass(frozen=True)
class SceneObject:
    shape: str
    half_size: float
    z: float
    color: tuple[float, float, float]
    p0: tuple[float, float]
    vel: tuple[float, float]
    class_id: int

    def center(self, frame: int) -> tuple[float, float]:
        return (self.p0[0] + frame * self.vel[0], self.p0[1] + frame * self.vel[1])


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[SceneObject, ...]
    extent: tuple[int, int, int]
    background_depth: float = BACKGROUND_DEPTH

    def __post_init__(self):
        n = len(self.objects)
        if not 1 <= n <= MAX_OBJECTS:
            raise ContractError(f"scene needs 1..{MAX_OBJECTS} objects, got {n}")
        zs = [o.z for o in self.objects]
        if len(set(zs)) != n:
            raise ContractError(f"object depths must be distinct, got {zs}")
        T, H, W = self.extent
        for o in self.objects:
            for f in range(T):
                ch, cw = o.center(f)
                if not (0 <= ch < H and 0 <= cw < W):
                    raise ContractError(f"object centre leaves the frame at frame {f}: {(ch, cw)}")

    def to_dict(self) -> dict:
        return {"extent": list(self.extent), "background_depth": self.background_depth,
                "objects": [dict(asdict(o), color=list(o.color), p0=list(o.p0), vel=list(o.vel))
                            for o in self.objects]}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        objs = tuple(SceneObject(shape=o["shape"], half_size=float(o["half_size"]), z=float(o["z"]),
                                 color=tuple(o["color"]), p0=tuple(o["p0"]), vel=tuple(o["vel"]),
                                 class_id=int(o["class_id"])) for o in d["objects"])
        return cls(objects=objs, extent=tuple(d["extent"]),
                   background_depth=float(d.get("background_depth", BACKGROUND_DEPTH)))


# ------------------------------------------------------------------ generation

def _shade(class_id: int, z: float) -> tuple[float, float, float]:
    # Nearer objects render brighter; gives the RGB stream a depth cue.
    c = CLASS_COLORS[class_id] * (1.0 - 0.5 * z)
    return tuple(float(v) for v in np.round(c, 6))


def generate_scene(rng: Rng, difficulty: str = "standard",
                   extent: tuple[int, int, int] = (8, 32, 32)) -> SceneSpec:
    """Random scene; ``easy`` has exactly one object, ``standard`` one to four."""
    if difficulty not in ("easy", "standard"):
        raise ContractError(f"unknown difficulty {difficulty!r}")
    T, H, W = extent
    n = 1 if difficulty == "easy" else int(rng.integers(1, MAX_OBJECTS + 1))
    classes = rng.choice(N_CLASSES, n)
    z_vals = np.sort(rng.choice(16, n))[::-1]
    zs = [round(0.15 + 0.05 * int(k), 4) for k in z_vals]
    objects = []
    for k in range(n):
        half = float(np.round(H / 10 + rng.uniform() * H / 8, 2))
        shape = SHAPES[int(rng.integers(0, 2))]
        for _ in range(MAX_RETRIES):
            vel = tuple(float(v) for v in np.round((rng.uniform(2) * 2 - 1) * 0.75 * V_MAX, 3))
            p0 = (float(np.round(rng.uniform() * H, 3)), float(np.round(rng.uniform() * W, 3)))
            end = (p0[0] + (T - 1) * vel[0], p0[1] + (T - 1) * vel[1])
            if 0 <= end[0] < H and 0 <= end[1] < W and p0[0] < H and p0[1] < W:
                break
        else:
            raise ContractError(f"scene rejection sampling exceeded {MAX_RETRIES} tries for {rng!r}")
        cid = int(classes[k])
        objects.append(SceneObject(shape=shape, half_size=half, z=zs[k], color=_shade(cid, zs[k]),
                                   p0=p0, vel=vel, class_id=cid))
    return SceneSpec(objects=tuple(objects), extent=(T, H, W))


def caption(scene: SceneSpec) -> str:
    """``"<count> object(s) moving [slowly] <direction>"`` from the mean velocity."""
    n = len(scene.objects)
    v = np.mean([o.vel for o in scene.objects], axis=0)
    if abs(v[1]) >= abs(v[0]):
        direction = "right" if v[1] >= 0 else "left"
    else:
        direction = "down" if v[0] >= 0 else "up"
    noun = "object" if n == 1 else "objects"
    slow = " slowly" if float(np.hypot(*v)) < 0.5 else ""
    return f"{COUNT_WORDS[n - 1]} {noun} moving{slow} {direction}"


# ------------------------------------------------------------------ rendering

def object_masks(scene: SceneSpec) -> np.ndarray:
    """Boolean coverage ``[n_objects, T, H, W]``."""
    T, H, W = scene.extent
    ii, jj = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    out = np.zeros((len(scene.objects), T, H, W), dtype=bool)
    for k, o in enumerate(scene.objects):
        for f in range(T):
            ch, cw = o.center(f)
            if o.shape == "disk":
                out[k, f] = (ii - ch) ** 2 + (jj - cw) ** 2 <= o.half_size ** 2
            else:
                out[k, f] = (np.abs(ii - ch) <= o.half_size) & (np.abs(jj - cw) <= o.half_size)
    return out


def owner_map(scene: SceneSpec) -> np.ndarray:
    """Index of the visible object per pixel ``[T, H, W]``; -1 for background."""
    masks = object_masks(scene)
    owner = np.full(masks.shape[1:], -1, dtype=np.int64)
    # Paint far to near so the smallest z ends on top.
    for k in np.argsort([-o.z for o in scene.objects], kind="stable"):
        owner[masks[k]] = k
    return owner


def _paint(owner: np.ndarray, values: np.ndarray, background) -> np.ndarray:
    """Per-pixel lookup of ``values[owner]`` with a background triple."""
    table = np.vstack([np.asarray(values, dtype=np.float64).reshape(-1, 3),
                       np.asarray(background, dtype=np.float64).reshape(1, 3)])
    return table[np.where(owner < 0, len(table) - 1, owner)]


def encode_flow(vel) -> np.ndarray:
    v = np.asarray(vel, dtype=np.float64)
    return (v + V_MAX) / (2 * V_MAX)


def decode_flow(encoded) -> np.ndarray:
    return np.asarray(encoded, dtype=np.float64) * (2 * V_MAX) - V_MAX


def render(scene: SceneSpec, modality: Modality | int | str) -> np.ndarray:
    """Grid ``[T, H, W, 3]`` (float32, values in [0, 1]) for one modality."""
    mod = Modality.parse(modality)
    objs = scene.objects
    T, H, W = scene.extent
    if mod is Modality.KEYPOINTS:
        grid = np.zeros((T, H, W, 3))
        order = np.argsort([-o.z for o in objs], kind="stable")
        for f in range(T):
            for k in order:
                o = objs[k]
                ch, cw = (int(np.floor(c + 0.5)) for c in o.center(f))
                for di, dj in ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)):
                    i, j = ch + di, cw + dj
                    if 0 <= i < H and 0 <= j < W:
                        grid[f, i, j] = PALETTE[o.class_id]
        return grid.astype(np.float32)

    owner = owner_map(scene)
    if mod is Modality.RGB:
        grid = _paint(owner, [o.color for o in objs], [BACKGROUND_RGB] * 3)
    elif mod is Modality.DEPTH:
        grid = _paint(owner, [[o.z] * 3 for o in objs], [scene.background_depth] * 3)
    elif mod is Modality.FLOW:
        grid = _paint(owner, [list(encode_flow(o.vel)) + [0.5] for o in objs], [0.5, 0.5, 0.5])
    elif mod is Modality.SEGMENTATION:
        grid = _paint(owner, [PALETTE[o.class_id] for o in objs], [0.0, 0.0, 0.0])
    else:  # parts
        grid = np.zeros((T, H, W, 3))
        ii, jj = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
        for f in range(T):
            quad = np.full((H, W), -1, dtype=np.int64)
            for k, o in enumerate(objs):
                ch, cw = o.center(f)
                q = 2 * (ii >= ch) + (jj >= cw)
                quad = np.where(owner[f] == k, q, quad)
            grid[f] = _paint(quad, PART_COLORS, [0.0, 0.0, 0.0])
    return grid.astype(np.float32)


def render_all(scene: SceneSpec) -> np.ndarray:
    """All six grids stacked by modality id: ``[6, T, H, W, 3]``."""
    return np.stack([render(scene, m) for m in Modality])


# ------------------------------------------------------------------ dataset

@dataclass
class RenderedSample:
    grids: np.ndarray  # [6, T, H, W, 3]
    caption: str
    group: int
    scene: SceneSpec

    def grid(self, modality) -> np.ndarray:
        return self.grids[int(Modality.parse(modality))]


@dataclass
class Dataset:
    """In-memory dataset: grids ``[n, 6, T, H, W, 3]`` plus per-sample metadata."""

    grids: np.ndarray
    captions: list[str]
    groups: np.ndarray
    scenes: list[SceneSpec]
    extent: tuple[int, int, int]
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.captions)

    def sample(self, i: int) -> RenderedSample:
        return RenderedSample(self.grids[i], self.captions[i], int(self.groups[i]), self.scenes[i])

    def group_indices(self, group: int) -> np.ndarray:
        return np.flatnonzero(self.groups == group)


def build_dataset(rng: Rng, n_samples: int, difficulty: str = "standard",
                  extent: tuple[int, int, int] = (8, 32, 32)) -> Dataset:
    """Render ``n_samples`` scenes; sample ``i`` uses the child stream ``rng.derive(i)``."""
    if n_samples < 1:
        raise ContractError("n_samples must be >= 1")
    scenes = [generate_scene(rng.derive(i), difficulty, extent) for i in range(n_samples)]
    grids = np.stack([render_all(s) for s in scenes])
    return Dataset(grids=grids, captions=[caption(s) for s in scenes],
                   groups=np.arange(n_samples) % 4, scenes=scenes, extent=tuple(extent))


def write_dataset(ds: Dataset, out_path: str | Path, samples_per_file: int = 256) -> dict:
    """Write ``manifest.json`` plus packed ``UFT1`` blob files; returns the manifest."""
    out = Path(out_path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        entries = []
        for start in range(0, len(ds), samples_per_file):
            name = f"blobs_{start // samples_per_file:04d}.bin"
            offset = 0
            with open(out / name, "wb") as fh:
                for i in range(start, min(start + samples_per_file, len(ds))):
                    entries.append({"id": i, "group": int(ds.groups[i]), "caption": ds.captions[i],
                                    "scene": ds.scenes[i].to_dict(), "blob_file": name,
                                    "blob_offset": offset})
                    for m in Modality:
                        data = blob.encode(ds.grids[i, int(m)])
                        fh.write(data)
                        offset += len(data)
        manifest = {"version": DATASET_VERSION, "extent": list(ds.extent),
                    "modalities": [m.label for m in Modality], "samples": entries}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise DataIOError(f"cannot write dataset to {out}: {exc}") from exc
    ds.manifest = manifest
    return manifest


def read_dataset(path: str | Path) -> Dataset:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataIOError(f"cannot read manifest in {root}: {exc}") from exc
    if manifest.get("version") != DATASET_VERSION:
        raise DataIOError(f"unsupported dataset version {manifest.get('version')!r} in {root}")
    extent = tuple(manifest["extent"])
    samples = manifest["samples"]
    grids = np.empty((len(samples), len(Modality)) + extent + (3,), dtype=np.float32)
    buffers: dict[str, bytes] = {}
    for k, s in enumerate(samples):
        fname = s["blob_file"]
        if fname not in buffers:
            try:
                buffers[fname] = (root / fname).read_bytes()
            except OSError as exc:
                raise DataIOError(f"cannot read {root / fname}: {exc}") from exc
        off = s["blob_offset"]
        for m in range(len(Modality)):
            arr, off = blob.decode(buffers[fname], off)
            grids[k, m] = arr
    return Dataset(grids=grids, captions=[s["caption"] for s in samples],
                   groups=np.array([s["group"] for s in samples], dtype=np.int64),
                   scenes=[SceneSpec.from_dict(s["scene"]) for s in samples],
                   extent=extent, manifest=manifest)


def make_dataset(rng: Rng, n_samples: int, difficulty: str, out_path: str | Path,
                 extent: tuple[int, int, int] = (8, 32, 32)) -> dict:
    ds = build_dataset(rng, n_samples, difficulty, extent)
    return write_dataset(ds, out_path)
