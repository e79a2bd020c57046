"""Named parameter store with Adam state and L2 decay folded into the gradient."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0  # c in  loss + c * sum(theta^2)


class ParameterStore:
    """name -> (parameter tensor, Adam moments)."""

    def __init__(self, named: Iterable[tuple[str, Tensor]], hyper: AdamHyper | None = None):
        self.hyper = hyper or AdamHyper()
        self.params: dict[str, Tensor] = {}
        self.state: dict[str, AdamState] = {}
        self.skipped = 0
        for name, p in named:
            if name in self.params:
                raise KeyError(f"duplicate parameter name {name!r}")
            self.params[name] = p
            self.state[name] = AdamState(np.zeros_like(p.data), np.zeros_like(p.data))

    def __len__(self) -> int:
        return len(self.params)

    def __iter__(self):
        return iter(self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def l2(self) -> float:
        """sum of squares over every parameter entry."""
        return float(sum(np.sum(p.data * p.data) for p in self.params.values()))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.data = snap[k].copy()

    def step(self) -> None:
        adam_step(self)


def adam_step(store: ParameterStore) -> None:
    """One bias-corrected Adam update, then clear gradients.

    The decay term c * sum(theta^2) contributes ``2 * c * theta`` to
    each gradient before the moment updates (coupled L2, not AdamW).
    """
    h = store.hyper
    for name, p in store.params.items():
        g = p.grad
        if g is None:
            store.skipped += 1
            log.debug("no gradient for %s; skipped", name)
            continue
        if h.weight_decay:
            g = g + 2.0 * h.weight_decay * p.data
        st = store.state[name]
        st.step += 1
        st.m = h.beta1 * st.m + (1.0 - h.beta1) * g
        st.v = h.beta2 * st.v + (1.0 - h.beta2) * (g * g)
        m_hat = st.m / (1.0 - h.beta1 ** st.step)
        v_hat = st.v / (1.0 - h.beta2 ** st.step)
        p.data = p.data - h.lr * m_hat / (np.sqrt(v_hat) + h.eps)
    store.zero_grad()
