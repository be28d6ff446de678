"""Shared test utilities: central finite differences as the gradient oracle."""

from __future__ import annotations

import numpy as np

from neurofuse.tensor import ComputationTape, Tensor, backward

FD_STEP = 1e-5


def fd_grad(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x)
        flat[i] = orig - h
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return out


def fd_grad_param(f, param: Tensor, h: float = FD_STEP) -> np.ndarray:
    """Central finite differences of f() with respect to one leaf tensor.

    ``f`` must be a pure scalar function of the current parameter values; the
    parameter is perturbed in place and restored.
    """
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f()
        flat[i] = orig - h
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Elementwise |a - n| / max(|a|, |n|, floor), maximized."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


def analytic_grad(build, params: list[Tensor]) -> list[np.ndarray]:
    """Run one taped forward/backward of the scalar built by ``build()``."""
    for p in params:
        p.zero_grad()
    with ComputationTape():
        loss = build()
        backward(loss)
    return [p.grad.copy() for p in params]
