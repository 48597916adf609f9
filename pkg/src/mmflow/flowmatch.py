"""Task routing, interpolants, the three mode losses and the CFG Euler sampler."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Protocol

import numpy as np

import mmflow.numerics.autodiff as T
from mmflow.errors import ContractError, NumericError, ShapeError
from mmflow.modality import MODALITY_PROMPTS, Modality
from mmflow.numerics.autodiff import Tensor
from mmflow.numerics.rng import Rng


class TaskMode(enum.IntEnum):
    CONDITIONAL = 0
    ESTIMATION = 1
    JOINT = 2

    @property
    def label(self) -> str:
        return {0: "cond", 1: "est", 2: "joint"}[int(self)]

    @classmethod
    def parse(cls, value: "str | int | TaskMode") -> "TaskMode":
        if isinstance(value, cls):
            return value
        aliases = {"cond": 0, "conditional": 0, "est": 1, "estimation": 1, "estimate": 1,
                   "joint": 2, "t2v": 2}
        if isinstance(value, str):
            if value.lower() not in aliases:
                raise ContractError(f"unknown task mode {value!r}")
            return cls(aliases[value.lower()])
        return cls(int(value))


@dataclass(frozen=True)
class RoutingConfig:
    p_cond: float = 0.2
    p_est: float = 0.3
    p_joint: float = 0.5
    unordered: bool = False

    def __post_init__(self):
        probs = (self.p_cond, self.p_est, self.p_joint)
        if min(probs) < 0:
            raise ContractError(f"routing probabilities must be non-negative, got {probs}")
        if abs(sum(probs) - 1.0) > 1e-9:
            raise ContractError(f"routing probabilities must sum to 1, got {sum(probs)!r}")
        if not self.unordered and not (self.p_cond < self.p_est < self.p_joint):
            raise ContractError("routing must satisfy p_cond < p_est < p_joint "
                                "(set unordered=True for ablations)")

    @property
    def probs(self) -> tuple[float, float, float]:
        return (self.p_cond, self.p_est, self.p_joint)


@dataclass(frozen=True)
class NoiseAssignment:
    t_r: float
    t_m: float


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    cfg_scale: float = 7.5
    task: TaskMode = TaskMode.JOINT

    def __post_init__(self):
        if self.steps < 1:
            raise ContractError(f"sampler needs steps >= 1, got {self.steps}")
        if self.cfg_scale < 0:
            raise ContractError(f"cfg_scale must be >= 0, got {self.cfg_scale}")


def sample_task(rng: Rng, routing: RoutingConfig) -> TaskMode:
    """Categorical draw over the three modes from a single uniform variate."""
    u = rng.uniform()
    if u < routing.p_cond:
        return TaskMode.CONDITIONAL
    if u < routing.p_cond + routing.p_est:
        return TaskMode.ESTIMATION
    return TaskMode.JOINT


def sample_timestep(rng: Rng) -> float:
    return float(rng.uniform())


def assign_noise(mode: TaskMode, rng: Rng, shared_t: bool = False) -> NoiseAssignment:
    """Per-stream timesteps; the clean stream of a one-sided task gets t = 0."""
    if mode is TaskMode.CONDITIONAL:
        return NoiseAssignment(sample_timestep(rng), 0.0)
    if mode is TaskMode.ESTIMATION:
        return NoiseAssignment(0.0, sample_timestep(rng))
    t_r = sample_timestep(rng)
    return NoiseAssignment(t_r, t_r if shared_t else sample_timestep(rng))


def _same_shape(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


def interpolate(x0: np.ndarray, x1: np.ndarray, t) -> np.ndarray:
    """``(1 - t) x0 + t x1``; exact at both endpoints.

    ``t`` may be a scalar or one value per leading batch row.
    """
    x0, x1 = np.asarray(x0), np.asarray(x1)
    _same_shape("interpolate", x0, x1)
    t = np.asarray(t, dtype=x0.dtype)
    if t.ndim:
        t = t.reshape(t.shape + (1,) * (x0.ndim - t.ndim))
    return (1 - t) * x0 + t * x1


def velocity_target(x0: np.ndarray, x1: np.ndarray) -> np.ndarray:
    x0, x1 = np.asarray(x0), np.asarray(x1)
    _same_shape("velocity_target", x0, x1)
    return x1 - x0


def loss_weights(mode: TaskMode) -> tuple[float, float]:
    """Stream weights (rgb, modality) that turn two stream MSEs into the mode loss."""
    return {TaskMode.CONDITIONAL: (1.0, 0.0), TaskMode.ESTIMATION: (0.0, 1.0),
            TaskMode.JOINT: (0.5, 0.5)}[TaskMode(mode)]


def compute_loss(mode: TaskMode, v_hat_r: Tensor, v_hat_m: Tensor | None,
                 v_r: np.ndarray, v_m: np.ndarray | None) -> Tensor:
    """Mode loss for one sample (or a batch sharing one mode).

    Conditional supervises only the RGB stream, Estimation only the modality
    stream, Joint averages the two per-element MSEs.
    """
    w_r, w_m = loss_weights(mode)
    terms = []
    if w_r:
        terms.append((w_r, T.mean(T.square(T.sub(v_hat_r, Tensor(np.asarray(v_r, dtype=v_hat_r.dtype)))))))
    if w_m:
        if v_hat_m is None:
            raise ContractError(f"{TaskMode(mode).name} loss needs a modality stream")
        terms.append((w_m, T.mean(T.square(T.sub(v_hat_m, Tensor(np.asarray(v_m, dtype=v_hat_m.dtype)))))))
    if len(terms) == 1:
        return terms[0][1]
    return T.add(T.scalar_mul(terms[0][1], terms[0][0]), T.scalar_mul(terms[1][1], terms[1][0]))


def batch_loss(v_hat_r: Tensor, v_hat_m: Tensor | None, v_r: np.ndarray, v_m: np.ndarray | None,
               modes) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Mean over samples of the per-sample mode losses.

    Returns the scalar loss plus the per-sample RGB and modality MSE values.
    Masked streams enter with weight exactly zero, so their predictions get
    exactly zero gradient.
    """
    B = v_hat_r.shape[0]
    dt = v_hat_r.dtype
    red = tuple(range(1, v_hat_r.ndim))
    mse_r = T.mean(T.square(T.sub(v_hat_r, Tensor(np.asarray(v_r, dtype=dt)))), axis=red)
    if v_hat_m is None:
        loss = T.mean(mse_r)
        return loss, mse_r.data.copy(), np.full(B, np.nan)
    w = np.array([loss_weights(m) for m in modes], dtype=dt).reshape(B, 2)
    mse_m = T.mean(T.square(T.sub(v_hat_m, Tensor(np.asarray(v_m, dtype=dt)))), axis=red)
    per = T.add(T.mul(mse_r, Tensor(w[:, 0].copy())), T.mul(mse_m, Tensor(w[:, 1].copy())))
    return T.mean(per), mse_r.data.copy(), mse_m.data.copy()


def cfg_combine(v_uncond: np.ndarray, v_cond: np.ndarray, s: float) -> np.ndarray:
    """Guided velocity ``v_uncond + s (v_cond - v_uncond)``.

    Evaluated as ``s v_cond + (1 - s) v_uncond`` so that s = 1 and s = 0 return
    the respective branch bit-exactly.
    """
    v_uncond, v_cond = np.asarray(v_uncond), np.asarray(v_cond)
    _same_shape("cfg_combine", v_uncond, v_cond)
    s = v_cond.dtype.type(s) if v_cond.dtype.kind == "f" else s
    return s * v_cond + (1 - s) * v_uncond


class VelocityModel(Protocol):
    def predict(self, r_t, m_t, modality, prompts_r, prompts_m, t_r, t_m=None): ...


def euler_sample(model: VelocityModel, task: TaskMode, conditions: dict, cfg: SamplerConfig,
                 rng: Rng, grid_shape: tuple[int, ...] | None = None) -> dict:
    """Integrate the flow ODE from t = 1 (noise) to t = 0 with guided Euler steps.

    ``conditions`` keys: ``prompt`` (caption), ``modality`` (auxiliary id, or
    ``None`` for RGB-only models), ``rgb_grid`` (Estimation), ``modality_grid``
    (Conditional). Grids are ``[T, H, W, C]`` or batched ``[B, T, H, W, C]``.
    The clean conditioning stream stays pinned at its data value with t = 0.
    Returns ``{"rgb": ..., "modality": ...}``.
    """
    task = TaskMode.parse(task)
    if cfg.steps < 1:
        raise ContractError("steps must be >= 1")
    modality = conditions.get("modality")
    prompt = conditions.get("prompt") or ""
    rgb_only = modality is None
    if rgb_only and task is not TaskMode.JOINT:
        raise ContractError(f"{task.name} sampling needs an auxiliary modality")
    if task is TaskMode.CONDITIONAL and conditions.get("modality_grid") is None:
        raise ContractError("Conditional sampling requires conditions['modality_grid']")
    if task is TaskMode.ESTIMATION and conditions.get("rgb_grid") is None:
        raise ContractError("Estimation sampling requires conditions['rgb_grid']")

    ref = conditions.get("rgb_grid") if task is TaskMode.ESTIMATION else conditions.get("modality_grid")
    if ref is None:
        if grid_shape is None:
            cfg_obj = getattr(model, "config", None)
            if cfg_obj is None:
                raise ContractError("grid_shape required for Joint sampling with this model")
            grid_shape = tuple(cfg_obj.grid) + (cfg_obj.c_in,)
        shape = tuple(grid_shape)
    else:
        shape = np.asarray(ref).shape
    batched = len(shape) == 5
    bshape = shape if batched else (1,) + shape
    B = bshape[0]
    dtype = getattr(model, "dtype", np.dtype(np.float32))

    noise_r = rng.normal(bshape, dtype) if task is not TaskMode.ESTIMATION else None
    noise_m = rng.normal(bshape, dtype) if task is not TaskMode.CONDITIONAL and not rgb_only else None
    x_r = noise_r if noise_r is not None else np.asarray(conditions["rgb_grid"], dtype=dtype).reshape(bshape)
    if rgb_only:
        x_m = None
    elif noise_m is not None:
        x_m = noise_m
    else:
        x_m = np.asarray(conditions["modality_grid"], dtype=dtype).reshape(bshape)

    mod_ids = None if rgb_only else np.full(B, int(Modality.parse(modality)), dtype=np.int64)
    c_r = [prompt] * B
    c_m = None if rgb_only else [MODALITY_PROMPTS[Modality.parse(modality)]] * B
    null = [None] * B
    dt = 1.0 / cfg.steps
    guided = cfg.cfg_scale != 1.0
    for i in range(cfg.steps):
        t = 1.0 - i * dt
        t_r = t if task is not TaskMode.ESTIMATION else 0.0
        t_m = t if task is not TaskMode.CONDITIONAL else 0.0
        if guided:
            # Conditional and unconditional branches in one batched call.
            r_in = np.concatenate([x_r, x_r])
            m_in = None if x_m is None else np.concatenate([x_m, x_m])
            ids = None if mod_ids is None else np.concatenate([mod_ids, mod_ids])
            v_r, v_m = model.predict(r_in, m_in, ids, c_r + null, None if c_m is None else c_m + null,
                                     np.full(2 * B, t_r), np.full(2 * B, t_m))
            v_r = cfg_combine(v_r[B:], v_r[:B], cfg.cfg_scale)
            v_m = None if v_m is None else cfg_combine(v_m[B:], v_m[:B], cfg.cfg_scale)
        else:
            v_r, v_m = model.predict(x_r, x_m, mod_ids, c_r, c_m, np.full(B, t_r), np.full(B, t_m))
        if task is not TaskMode.ESTIMATION:
            x_r = (x_r - dtype.type(dt) * v_r).astype(dtype)
        if task is not TaskMode.CONDITIONAL and x_m is not None:
            x_m = (x_m - dtype.type(dt) * v_m).astype(dtype)
        if not np.isfinite(x_r).all() or (x_m is not None and not np.isfinite(x_m).all()):
            raise NumericError(f"non-finite sample at Euler step {i}")

    if task is TaskMode.CONDITIONAL:
        x_m = conditions["modality_grid"]
    if task is TaskMode.ESTIMATION:
        x_r = conditions["rgb_grid"]
    out_r = x_r if (batched or task is TaskMode.ESTIMATION) else x_r[0]
    out_m = x_m
    if x_m is not None and not batched and task is not TaskMode.CONDITIONAL:
        out_m = x_m[0]
    return {"rgb": out_r, "modality": out_m}
