"""Central finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from mmflow.errors import ContractError, NumericError
from mmflow.numerics.autodiff import Tape, Tensor, backward


def _rel(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))


def grad_check(scalar_fn: Callable[[Tensor], Tensor], point: Tensor, eps: float = 1e-6) -> float:
    """Max relative error between the taped gradient and central differences.

    The relative error per coordinate is ``|a - n| / max(1, |a|, |n|)``.
    """
    if point.dtype != np.float64:
        raise ContractError("grad_check needs a float64 point")
    x = Tensor(point.data.copy(), requires_grad=True)
    with Tape():
        loss = scalar_fn(x)
        if not np.isfinite(loss.data).all():
            raise NumericError("non-finite function value at the base point")
        backward(loss)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad
    numeric = np.empty_like(x.data)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = scalar_fn(Tensor(x.data.copy())).item()
        flat[i] = orig - eps
        fm = scalar_fn(Tensor(x.data.copy())).item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {np.unravel_index(i, x.shape)}")
        numeric.reshape(-1)[i] = (fp - fm) / (2 * eps)
    return float(_rel(analytic, numeric).max()) if analytic.size else 0.0


def grad_check_params(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor],
                      eps: float = 1e-6, coords_per_param: int | None = None,
                      seed: int = 0) -> tuple[float, dict[str, float]]:
    """Finite-difference check of a closure over many named parameters.

    ``loss_fn`` reads the parameters in place. When ``coords_per_param`` is
    set, only that many coordinates per parameter (chosen with a fixed seed)
    are differenced; the analytic gradient is always the full tape result.
    Returns the overall max relative error and the per-parameter maxima.
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ContractError(f"grad_check_params: {name} is not float64")
        p.grad = None
    with Tape():
        loss = loss_fn()
        if not np.isfinite(loss.data).all():
            raise NumericError("non-finite loss at the base point")
        backward(loss)
    rs = np.random.default_rng(seed)
    report: dict[str, float] = {}
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if coords_per_param is not None and flat.size > coords_per_param:
            idx = np.sort(rs.choice(flat.size, coords_per_param, replace=False))
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = loss_fn().item()
            flat[i] = orig - eps
            fm = loss_fn().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite loss perturbing {name}[{i}]")
            num = (fp - fm) / (2 * eps)
            worst = max(worst, float(_rel(analytic.reshape(-1)[i], num)))
        report[name] = worst
        p.grad = None
    return (max(report.values()) if report else 0.0), report
