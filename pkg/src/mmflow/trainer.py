"""Optimizer, two-stage curriculum, balanced batches, checkpoints and the arm comparison."""
from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

import mmflow.numerics.autodiff as T
from mmflow.errors import ContractError, DataIOError, NumericError
from mmflow.flowmatch import (
    NoiseAssignment,
    RoutingConfig,
    TaskMode,
    assign_noise,
    batch_loss,
    interpolate,
    sample_task,
    velocity_target,
)
from mmflow.modality import AUXILIARY, MODALITY_PROMPTS, Modality, pixel_aligned
from mmflow.model import ModelConfig, UnifiedDiT, toy_config
from mmflow.numerics import blob
from mmflow.numerics.gradcheck import grad_check_params
from mmflow.numerics.rng import Rng
from mmflow.toyworld import Dataset, build_dataset, read_dataset

LOSS_COLUMNS = ("step", "mode", "modality", "loss", "rgb_mse", "mod_mse", "ms")
BATCH_COLUMNS = ("step", "stage", "groups", "modalities")
CONVERGENCE_COLUMNS = ("step", "arm", "seed", "rgb_eval_mse")
EVAL_TIMESTEPS = tuple(round(0.1 * k, 1) for k in range(1, 10))
N_GROUPS = 4

# Child-stream tags so batch, noise and dropout draws never share a generator.
_BATCH, _NOISE, _DROP, _EVAL = 1, 2, 3, 4


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    total_steps: int = 3000
    stage1_steps: int = 1000
    modalities_enabled: tuple[int, ...] = tuple(int(m) for m in AUXILIARY)
    routing: RoutingConfig = field(default_factory=RoutingConfig)
    seed: int = 0
    model: ModelConfig = field(default_factory=toy_config)
    shared_t: bool = False
    checkpoint_every: int = 0
    log_wall_time: bool = False

    def __post_init__(self):
        if self.batch_size < N_GROUPS or self.batch_size % N_GROUPS:
            raise ContractError(f"batch_size must be a positive multiple of {N_GROUPS}, got {self.batch_size}")
        if not 0 <= self.stage1_steps <= self.total_steps:
            raise ContractError(f"need 0 <= stage1_steps <= total_steps, got {self.stage1_steps}/{self.total_steps}")
        mods = tuple(sorted({int(Modality.parse(m)) for m in self.modalities_enabled}))
        if Modality.RGB in mods:
            raise ContractError("rgb is not an auxiliary modality")
        object.__setattr__(self, "modalities_enabled", mods)
        if self.lr <= 0:
            raise ContractError(f"lr must be positive, got {self.lr}")

    @property
    def rgb_only(self) -> bool:
        return not self.modalities_enabled

    def to_dict(self) -> dict:
        d = asdict(self)
        d["routing"] = asdict(self.routing)
        d["model"] = self.model.to_dict()
        d["modalities_enabled"] = [Modality(m).label for m in self.modalities_enabled]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "routing" in d:
            d["routing"] = RoutingConfig(**d["routing"])
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "modalities_enabled" in d:
            d["modalities_enabled"] = tuple(int(Modality.parse(m)) for m in d["modalities_enabled"])
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ContractError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataIOError(f"cannot read train config {path}: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    def digest(self) -> str:
        """Hash of everything that shapes the trajectory (logging flags excluded)."""
        d = self.to_dict()
        d.pop("checkpoint_every")
        d.pop("log_wall_time")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class CurriculumStage:
    stage: int
    allowed_modalities: frozenset
    data_difficulty: str


def curriculum(config: TrainConfig) -> tuple[CurriculumStage, CurriculumStage]:
    enabled = [Modality(m) for m in config.modalities_enabled]
    return (CurriculumStage(1, frozenset(int(m) for m in pixel_aligned(enabled)), "easy"),
            CurriculumStage(2, frozenset(int(m) for m in enabled), "standard"))


def stage_at(config: TrainConfig, step: int) -> CurriculumStage:
    s1, s2 = curriculum(config)
    return s1 if step < config.stage1_steps else s2


@dataclass(frozen=True)
class BatchItem:
    index: int
    group: int
    modality: int | None
    mode: TaskMode
    noise: NoiseAssignment
    drop_text: bool


@dataclass
class LossRecord:
    step: int
    mode: str
    modality: str
    loss: float
    rgb_mse: float
    mod_mse: float
    ms: float = 0.0
    groups: tuple[int, ...] = ()

    def row(self) -> list[str]:
        return [str(self.step), self.mode, self.modality, _fmt(self.loss), _fmt(self.rgb_mse),
                _fmt(self.mod_mse), _fmt(self.ms)]


def _fmt(x: float) -> str:
    return "nan" if not np.isfinite(x) else f"{x:.9g}"


# ------------------------------------------------------------------ batches

def build_batch(dataset: Dataset, stage: CurriculumStage, rng: Rng, batch_size: int,
                routing: RoutingConfig, cfg_drop_prob: float = 0.0, shared_t: bool = False) -> list[BatchItem]:
    """``batch_size / 4`` samples per group, each with a modality, a mode and timesteps.

    Sample slot ``k`` draws everything from the child stream ``rng.derive(k)``.
    """
    if batch_size % N_GROUPS:
        raise ContractError(f"batch_size {batch_size} is not divisible by {N_GROUPS}")
    per = batch_size // N_GROUPS
    allowed = sorted(stage.allowed_modalities)
    picks: list[tuple[int, int]] = []
    for g in range(N_GROUPS):
        pool = dataset.group_indices(g)
        if len(pool) < per:
            raise ContractError(f"group {g} has {len(pool)} samples, batch needs {per}")
        chosen = pool[rng.derive(0, g).permutation(len(pool))[:per]]
        picks.extend((int(i), g) for i in chosen)
    items = []
    for k, (idx, g) in enumerate(picks):
        r = rng.derive(1, k)
        if allowed:
            modality = allowed[int(r.integers(0, len(allowed)))]
            mode = sample_task(r, routing)
        else:
            # RGB-only training: text-to-RGB regression on a single stream.
            modality, mode = None, TaskMode.JOINT
        noise = assign_noise(mode, r, shared_t)
        if modality is None:
            noise = NoiseAssignment(noise.t_r, 0.0)
        drop = bool(r.uniform() < cfg_drop_prob)
        items.append(BatchItem(idx, g, modality, mode, noise, drop))
    return items


def group_histogram(batch: list[BatchItem]) -> tuple[int, ...]:
    return tuple(int(np.sum([it.group == g for it in batch])) for g in range(N_GROUPS))


# ------------------------------------------------------------------ optimizer

def init_adam(params: dict) -> dict:
    return {"step": 0,
            "m": {k: np.zeros_like(p.data) for k, p in params.items()},
            "v": {k: np.zeros_like(p.data) for k, p in params.items()}}


def adam_update(params: dict, grads: dict, state: dict, lr: float, beta1: float = 0.9,
                beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0) -> dict:
    """Bias-corrected Adam, in place on ``params[k].data``; missing grads count as zero."""
    state["step"] += 1
    t = state["step"]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k in sorted(params):
        p = params[k]
        g = grads.get(k)
        g = np.zeros_like(p.data) if g is None else g
        if weight_decay:
            g = g + weight_decay * p.data
        m = state["m"][k]
        v = state["v"][k]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - step).astype(p.data.dtype)
    return state


# ------------------------------------------------------------------ step

def _batch_arrays(model: UnifiedDiT, dataset: Dataset, batch: list[BatchItem], rng: Rng):
    """Noisy inputs and velocity targets for a batch; noise from ``rng.derive(sample, stream)``."""
    dt = model.dtype
    shape = dataset.grids.shape[2:]
    rgb = np.stack([dataset.grids[it.index, 0] for it in batch]).astype(dt)
    n_r = np.stack([rng.derive(k, 0).normal(shape, dt) for k in range(len(batch))])
    t_r = np.array([it.noise.t_r for it in batch])
    out = {"r_t": interpolate(rgb, n_r, t_r), "v_r": velocity_target(rgb, n_r), "t_r": t_r}
    if batch[0].modality is None:
        return out
    aux = np.stack([dataset.grids[it.index, it.modality] for it in batch]).astype(dt)
    n_m = np.stack([rng.derive(k, 1).normal(shape, dt) for k in range(len(batch))])
    t_m = np.array([it.noise.t_m for it in batch])
    out.update(m_t=interpolate(aux, n_m, t_m), v_m=velocity_target(aux, n_m), t_m=t_m)
    return out


def batch_forward_loss(model: UnifiedDiT, dataset: Dataset, batch: list[BatchItem], noise_rng: Rng):
    """Build inputs, run the forward pass and return ``(loss, mse_r, mse_m)``; caller owns the tape."""
    rgb_only = batch[0].modality is None
    if any((it.modality is None) != rgb_only for it in batch):
        raise ContractError("batch mixes RGB-only and two-stream samples")
    arr = _batch_arrays(model, dataset, batch, noise_rng)
    c_r = [None if it.drop_text else dataset.captions[it.index] for it in batch]
    if rgb_only:
        v_r, _ = model.forward(arr["r_t"], None, None, c_r, None, arr["t_r"])
        return batch_loss(v_r, None, arr["v_r"], None, [it.mode for it in batch])
    c_m = [None if it.drop_text else MODALITY_PROMPTS[Modality(it.modality)] for it in batch]
    mods = np.array([it.modality for it in batch], dtype=np.int64)
    v_r, v_m = model.forward(arr["r_t"], arr["m_t"], mods, c_r, c_m, arr["t_r"], arr["t_m"])
    return batch_loss(v_r, v_m, arr["v_r"], arr["v_m"], [it.mode for it in batch])


def _summary(labels) -> str:
    return "+".join(sorted(set(labels)))


def train_step(model: UnifiedDiT, dataset: Dataset, batch: list[BatchItem], opt_state: dict,
               config: TrainConfig, step: int) -> LossRecord:
    if T.active_tape() is not None:
        raise ContractError("train_step needs an inactive tape")
    t0 = time.perf_counter()
    noise_rng = Rng(config.seed).derive(_NOISE, step)
    model.zero_grad()
    with T.Tape():
        loss, mse_r, mse_m = batch_forward_loss(model, dataset, batch, noise_rng)
        if not np.isfinite(loss.data):
            bad = [batch[k].index for k in range(len(batch))
                   if not (np.isfinite(mse_r[k]) and (np.isnan(mse_m[k]) or np.isfinite(mse_m[k])))]
            raise NumericError(f"non-finite loss at step {step} (seed {config.seed}), samples {bad}")
        T.backward(loss)
    grads = {k: p.grad for k, p in model.params.items()}
    adam_update(model.params, grads, opt_state, config.lr, config.beta1, config.beta2,
                config.eps, config.weight_decay)
    sup_r = [mse_r[k] for k, it in enumerate(batch) if it.mode is not TaskMode.ESTIMATION]
    sup_m = [mse_m[k] for k, it in enumerate(batch) if it.modality is not None
             and it.mode is not TaskMode.CONDITIONAL]
    ms = (time.perf_counter() - t0) * 1000.0
    return LossRecord(
        step=step,
        mode=_summary(it.mode.label for it in batch),
        modality=_summary("none" if it.modality is None else Modality(it.modality).label for it in batch),
        loss=float(loss.data),
        rgb_mse=float(np.mean(sup_r)) if sup_r else float("nan"),
        mod_mse=float(np.mean(sup_m)) if sup_m else float("nan"),
        ms=ms if config.log_wall_time else 0.0,
        groups=group_histogram(batch),
    )


# ------------------------------------------------------------------ checkpoints

def save_checkpoint(path: str | Path, model: UnifiedDiT, opt_state: dict, config: TrainConfig,
                    step: int) -> None:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        model.config.save(out / "model.json")
        names = sorted(model.params)
        for fname, source in (("params.bin", {k: model.params[k].data for k in names}),
                              ("adam_m.bin", opt_state["m"]), ("adam_v.bin", opt_state["v"])):
            (out / fname).write_bytes(b"".join(blob.encode(source[k]) for k in names))
        state = {"step": step, "adam_step": opt_state["step"], "config_hash": config.digest(),
                 "dtype": model.dtype.name, "names": names, "train": config.to_dict()}
        (out / "state.json").write_text(json.dumps(state, indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise DataIOError(f"cannot write checkpoint {out}: {exc}") from exc


def _read_blobs(path: Path, names: list[str]) -> dict[str, np.ndarray]:
    buf = path.read_bytes()
    out, off = {}, 0
    for k in names:
        out[k], off = blob.decode(buf, off)
    return out


def load_checkpoint(path: str | Path, expect: TrainConfig | None = None):
    """Returns ``(model, opt_state, train_config, step)``; rejects a config-hash mismatch."""
    root = Path(path)
    try:
        state = json.loads((root / "state.json").read_text())
        mcfg = ModelConfig.load(root / "model.json")
        names = state["names"]
        params = _read_blobs(root / "params.bin", names)
        m = _read_blobs(root / "adam_m.bin", names)
        v = _read_blobs(root / "adam_v.bin", names)
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise DataIOError(f"cannot read checkpoint {root}: {exc}") from exc
    if expect is not None and expect.digest() != state["config_hash"]:
        raise ContractError(f"checkpoint {root} was written by config {state['config_hash']}, "
                            f"resume requested with {expect.digest()}")
    tensors = {k: T.Tensor(a, requires_grad=True) for k, a in params.items()}
    model = UnifiedDiT(mcfg, dtype=state["dtype"], params=tensors)
    opt = {"step": state["adam_step"], "m": m, "v": v}
    return model, opt, TrainConfig.from_dict(state["train"]), state["step"]


def load_model(path: str | Path) -> UnifiedDiT:
    return load_checkpoint(path)[0]


# ------------------------------------------------------------------ runs

def _append_csv(path: Path, row, header=None) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new and header:
            w.writerow(header)
        w.writerow(row)


def _truncate_csv(path: Path, keep_below: int) -> None:
    if not path.exists():
        return
    lines = path.read_text().splitlines(keepends=True)
    kept = lines[:1] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) < keep_below]
    path.write_text("".join(kept))


def run_curriculum(config: TrainConfig, data: dict, out_dir: str | Path, resume: bool = False,
                   eval_hook=None, eval_every: int = 0, stop_at: int | None = None) -> dict:
    """Stage-1 steps on easy data and pixel-aligned modalities, then stage 2 to ``total_steps``.

    ``data`` maps difficulty to a :class:`Dataset` or a dataset directory.
    Writes ``loss.csv`` (one row per step), ``batches.csv`` (group histogram and
    modalities per step) and checkpoints ``stage1`` (boundary) and ``final``.
    ``eval_hook(model, step)`` runs at step 0 and every ``eval_every`` steps.
    ``stop_at`` ends the run early after writing a ``last`` checkpoint, which
    ``resume=True`` picks up again.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sets = {k: (v if isinstance(v, Dataset) else read_dataset(v)) for k, v in data.items()}
    s1, s2 = curriculum(config)
    for stage, steps in ((s1, config.stage1_steps), (s2, config.total_steps - config.stage1_steps)):
        if steps and stage.data_difficulty not in sets:
            raise ContractError(f"no {stage.data_difficulty} dataset for stage {stage.stage}")
        if steps and not config.rgb_only and not stage.allowed_modalities:
            raise ContractError(f"stage {stage.stage} has no allowed modality among "
                                f"{[Modality(m).label for m in config.modalities_enabled]}")
    loss_csv, batch_csv = out / "loss.csv", out / "batches.csv"
    start = 0
    if resume and (out / "last").exists():
        model, opt, _, start = load_checkpoint(out / "last", expect=config)
        for f in (loss_csv, batch_csv):
            _truncate_csv(f, start)
    else:
        model = UnifiedDiT(config.model, seed=config.seed)
        opt = init_adam(model.params)
        for f in (loss_csv, batch_csv):
            f.unlink(missing_ok=True)
        config.save(out / "train.json")
    drop = config.model.cfg_drop_prob
    records = []
    for step in range(start, config.total_steps):
        if eval_hook is not None and eval_every and step % eval_every == 0:
            eval_hook(model, step)
        stage = s1 if step < config.stage1_steps else s2
        rng = Rng(config.seed).derive(_BATCH, step)
        batch = build_batch(sets[stage.data_difficulty], stage, rng, config.batch_size,
                            config.routing, drop, config.shared_t)
        rec = train_step(model, sets[stage.data_difficulty], batch, opt, config, step)
        records.append(rec)
        _append_csv(loss_csv, rec.row(), LOSS_COLUMNS)
        _append_csv(batch_csv, [step, stage.stage, "/".join(map(str, rec.groups)),
                                _summary("none" if it.modality is None else Modality(it.modality).label
                                         for it in batch)], BATCH_COLUMNS)
        done = step + 1
        if done == config.stage1_steps and 0 < done < config.total_steps:
            save_checkpoint(out / "stage1", model, opt, config, done)
        if config.checkpoint_every and done % config.checkpoint_every == 0:
            save_checkpoint(out / "last", model, opt, config, done)
        if stop_at is not None and done >= stop_at and done < config.total_steps:
            save_checkpoint(out / "last", model, opt, config, done)
            return {"model": model, "records": records, "loss_csv": loss_csv, "checkpoint": out / "last"}
    if eval_hook is not None and eval_every:
        eval_hook(model, config.total_steps)
    save_checkpoint(out / "final", model, opt, config, config.total_steps)
    return {"model": model, "records": records, "loss_csv": loss_csv, "checkpoint": out / "final"}


# ------------------------------------------------------------------ convergence comparison

@dataclass
class EvalBatch:
    rgb: np.ndarray
    aux: np.ndarray
    captions: list[str]
    noise_r: np.ndarray
    noise_m: np.ndarray
    modality: int = int(Modality.DEPTH)


def make_eval_batch(dataset: Dataset, n: int, seed: int, modality=Modality.DEPTH, dtype=np.float32) -> EvalBatch:
    rng = Rng(seed).derive(_EVAL)
    mod = int(Modality.parse(modality))
    idx = np.arange(min(n, len(dataset)))
    shape = dataset.grids.shape[2:]
    return EvalBatch(rgb=dataset.grids[idx, 0].astype(dtype), aux=dataset.grids[idx, mod].astype(dtype),
                     captions=[dataset.captions[i] for i in idx],
                     noise_r=rng.derive(0).normal((len(idx),) + shape, dtype),
                     noise_m=rng.derive(1).normal((len(idx),) + shape, dtype), modality=mod)


def eval_rgb_mse(model: UnifiedDiT, ev: EvalBatch, two_stream: bool = True) -> float:
    """RGB-stream velocity MSE averaged over the fixed timesteps 0.1 ... 0.9.

    Two-stream models see the auxiliary stream noised to the same t (joint mode).
    """
    B = len(ev.captions)
    target = velocity_target(ev.rgb, ev.noise_r)
    total = 0.0
    for t in EVAL_TIMESTEPS:
        r_t = interpolate(ev.rgb, ev.noise_r, t)
        tt = np.full(B, t)
        if two_stream:
            m_t = interpolate(ev.aux, ev.noise_m, t)
            prompts_m = [MODALITY_PROMPTS[Modality(ev.modality)]] * B
            v_r, _ = model.predict(r_t, m_t, np.full(B, ev.modality), ev.captions, prompts_m, tt, tt)
        else:
            v_r, _ = model.predict(r_t, None, None, ev.captions, None, tt)
        total += float(np.mean((v_r.astype(np.float64) - target) ** 2))
    return total / len(EVAL_TIMESTEPS)


ARMS = {"A": (), "B": (int(Modality.DEPTH),), "C": tuple(int(m) for m in AUXILIARY)}
ARM_NAMES = {"A": "rgb_only", "B": "single_depth", "C": "unified"}


def run_convergence_suite(base: TrainConfig, data: dict, out_dir: str | Path, seeds=(0, 1, 2),
                          eval_every: int = 50, eval_set: Dataset | None = None, n_eval: int = 16,
                          eval_seed: int = 20240917, arms=("A", "B", "C")) -> dict:
    """Train each arm on identical data, steps and seed; log held-out RGB velocity MSE.

    Returns ``{"csv": path, "final": {arm: {seed: mse}}, "runs": {(arm, seed): dir}}``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if eval_set is None:
        eval_set = build_dataset(Rng(eval_seed), n_eval, "standard", base.model.grid)
    ev = make_eval_batch(eval_set, n_eval, eval_seed)
    csv_path = out / "convergence.csv"
    csv_path.unlink(missing_ok=True)
    final: dict = {a: {} for a in arms}
    runs = {}
    for seed in seeds:
        for arm in arms:
            cfg = replace(base, seed=seed, modalities_enabled=ARMS[arm])
            two = not cfg.rgb_only
            curve = []

            def hook(model, step, _arm=arm, _seed=seed, _two=two, _curve=curve):
                mse = eval_rgb_mse(model, ev, _two)
                _curve.append((step, mse))
                _append_csv(csv_path, [step, ARM_NAMES[_arm], _seed, _fmt(mse)], CONVERGENCE_COLUMNS)

            run_dir = out / f"{ARM_NAMES[arm]}_seed{seed}"
            run_curriculum(cfg, data, run_dir, eval_hook=hook, eval_every=eval_every)
            final[arm][seed] = curve[-1][1]
            runs[(arm, seed)] = run_dir
    return {"csv": csv_path, "final": final, "runs": runs, "eval_batch": ev}


def ordering_report(final: dict) -> dict:
    """Median final MSE per arm and the expected ordering check (unified <= single <= rgb-only)."""
    med = {a: float(np.median(list(v.values()))) for a, v in final.items() if v}
    ordered = med.get("C", np.inf) <= med.get("B", np.inf) <= med.get("A", np.inf)
    gain = (med["A"] - med["C"]) / med["A"] if "A" in med and "C" in med else float("nan")
    return {"median": med, "ordered": bool(ordered), "relative_gain": gain,
            "gain_ok": bool(gain >= 0.05)}


# ------------------------------------------------------------------ gradient verification

def perturbed_model(config: ModelConfig, seed: int = 0, scale: float = 0.05) -> UnifiedDiT:
    """Float64 model with every parameter jittered, so zero-initialised gates carry gradient."""
    model = UnifiedDiT(config, seed=seed, dtype=np.float64)
    rng = Rng(seed).derive(0x6C)
    for k in sorted(model.params):
        p = model.params[k]
        p.data = p.data + scale * rng.derive(len(k), sum(map(ord, k))).normal(p.shape, np.float64)
    return model


def loss_grad_check(config: ModelConfig, seed: int = 0, coords_per_param: int | None = 4,
                    eps: float = 1e-6, modality=Modality.DEPTH) -> dict:
    """Finite-difference check of each mode loss on a one-sample batch; returns per-mode maxima."""
    model = perturbed_model(config, seed)
    ds = build_dataset(Rng(seed).derive(9), N_GROUPS, "standard", config.grid)
    mod = int(Modality.parse(modality))
    noise_rng = Rng(seed).derive(_NOISE)
    out = {}
    for mode, ts in ((TaskMode.CONDITIONAL, (0.35, 0.0)), (TaskMode.ESTIMATION, (0.0, 0.6)),
                     (TaskMode.JOINT, (0.35, 0.6))):
        batch = [BatchItem(0, 0, mod, mode, NoiseAssignment(*ts), False)]
        worst, _ = grad_check_params(lambda: batch_forward_loss(model, ds, batch, noise_rng)[0],
                                     model.params, eps, coords_per_param, seed)
        out[mode.label] = worst
    out["max"] = max(out.values())
    return out
