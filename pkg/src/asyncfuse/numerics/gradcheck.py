"""Central finite-difference gradient checking."""
from __future__ import annotations

import math
from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor, finite_checks, no_grad


def numeric_grad(fn: Callable[[], Tensor], p: Tensor, h: float = 1e-5) -> np.ndarray:
    """d fn / d p by central differences, one coordinate at a time.

    Probes skip the per-op finite check for speed; a non-finite probe value
    still ends up in the returned gradient, and so in the comparison.
    """
    grad = np.zeros_like(p.data)
    flat = p.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad(), finite_checks(False), np.errstate(all="ignore"):
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> float:
    """||a - n|| / max(||a||, ||n||, floor); the floor absorbs round-off on zero gradients."""
    if not (np.isfinite(analytic).all() and np.isfinite(numeric).all()):
        return math.inf
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(num / den)


def check_gradients(fn: Callable[[], Tensor], params: Iterable[tuple[str, Tensor]],
                    h: float = 1e-5) -> dict[str, float]:
    """Relative error between tape and finite-difference gradients, per parameter.

    ``p.data`` is mutated in place during probing, so the arrays must be
    writeable and contiguous.
    """
    params = list(params)
    for _, p in params:
        p.data = np.ascontiguousarray(p.data).copy()
        p.grad = None
    fn().backward()
    errors = {}
    for name, p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        errors[name] = relative_error(analytic, numeric_grad(fn, p, h))
    for _, p in params:
        p.grad = None
    return errors
