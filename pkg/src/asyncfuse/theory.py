"""Variance of accumulated semantic noise: closed-form bounds and Monte Carlo.

Each injection adds ``strength * eps`` with ``Var(eps) = sigma**2``.  Synchronous
injection happens at all L layers, asynchronous injection once per stage.
The constant useful part of the signal cancels in every variance and is not
simulated.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

CORRELATIONS = ("iid", "fully_correlated", "rho")
CHUNK = 1 << 17


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 1.0
    correlation: str = "iid"
    rho: float = 0.0  # pairwise correlation, used when correlation == "rho"
    strength: float = 1.0  # synchronous strength
    stage_strengths: tuple[float, ...] | None = None  # one strength per stage; defaults to strength
    depth: int = 6
    stages: int = 2
    trials: int = 10 ** 6
    seed: int = 2024
    strengths: tuple[float, ...] = field(init=False)

    def __post_init__(self):
        if self.correlation not in CORRELATIONS:
            raise ConfigError(f"unknown correlation model {self.correlation!r}")
        if not 0 <= self.stages <= self.depth:
            raise ConfigError(f"need 0 <= stages <= depth, got {self.stages}, {self.depth}")
        if self.sigma < 0 or not 0.0 <= self.rho <= 1.0:
            raise ConfigError("sigma must be nonnegative and rho in [0, 1]")
        per_stage = (self.strength,) * self.stages if self.stage_strengths is None else tuple(self.stage_strengths)
        if len(per_stage) != self.stages:
            raise ConfigError(f"{len(per_stage)} stage strengths for {self.stages} stages")
        object.__setattr__(self, "strengths", per_stage)

    @property
    def max_strength(self) -> float:
        return max((abs(v) for v in self.strengths), default=0.0)

    @property
    def pairwise(self) -> float:
        return {"iid": 0.0, "fully_correlated": 1.0}.get(self.correlation, self.rho)


def var_sync_bound(spec: NoiseSpec) -> float:
    return spec.depth ** 2 * spec.strength ** 2 * spec.sigma ** 2


def var_async_bound(spec: NoiseSpec) -> float:
    return spec.stages ** 2 * spec.max_strength ** 2 * spec.sigma ** 2


def exact_variance(strengths, sigma: float, rho: float) -> float:
    """Var(sum_i lam_i eps_i) when every pair of eps has correlation rho."""
    w = np.asarray(strengths, dtype=np.float64)
    return float(sigma ** 2 * ((1 - rho) * np.sum(w * w) + rho * np.sum(w) ** 2))


def _stage_columns(depth: int, stages: int) -> np.ndarray:
    # the layers where each stage injects; only their count matters for the variance
    return np.array([(s + 1) * depth // stages - 1 for s in range(stages)], dtype=np.int64)


def _draw(rng: np.random.Generator, n: int, spec: NoiseSpec) -> np.ndarray:
    rho = spec.pairwise
    shared = rng.standard_normal((n, 1))
    own = rng.standard_normal((n, spec.depth))
    return spec.sigma * (math.sqrt(rho) * shared + math.sqrt(1.0 - rho) * own)


def _var_and_stderr(x: np.ndarray) -> tuple[float, float]:
    d = x - x.mean()
    var = float(np.mean(d * d))
    m4 = float(np.mean(d ** 4))
    return var, math.sqrt(max(m4 - var * var, 0.0) / len(x))


def simulate_accumulation(spec: NoiseSpec) -> dict:
    """Monte Carlo estimate of both accumulated-noise variances.

    Trials are drawn in fixed-size chunks, each from its own child stream of
    ``SeedSequence(spec.seed)``, so results do not depend on how chunks would
    be scheduled.
    """
    if spec.trials < 2:
        raise ConfigError("need at least two trials")
    n_chunks = math.ceil(spec.trials / CHUNK)
    children = np.random.SeedSequence(spec.seed).spawn(n_chunks)
    cols = _stage_columns(spec.depth, spec.stages)
    per_stage = np.asarray(spec.strengths, dtype=np.float64)
    e_sync = np.empty(spec.trials)
    e_async = np.empty(spec.trials)
    for i, child in enumerate(children):
        lo, hi = i * CHUNK, min((i + 1) * CHUNK, spec.trials)
        eps = _draw(np.random.default_rng(child), hi - lo, spec)
        e_sync[lo:hi] = spec.strength * eps.sum(axis=1)
        e_async[lo:hi] = eps[:, cols] @ per_stage
    v_sync, se_sync = _var_and_stderr(e_sync)
    v_async, se_async = _var_and_stderr(e_async)
    b_sync, b_async = var_sync_bound(spec), var_async_bound(spec)
    return {
        "var_sync_mc": v_sync,
        "var_async_mc": v_async,
        "stderr_sync": se_sync,
        "stderr_async": se_async,
        "ratio_mc": v_async / v_sync if v_sync > 0 else float("nan"),
        "sync_bound": b_sync,
        "async_bound": b_async,
        "bound_ok": v_sync <= b_sync + 5 * se_sync and v_async <= b_async + 5 * se_async,
    }


def _sigmoid(g: float) -> float:
    if g >= 0:
        return 1.0 / (1.0 + math.exp(-g))
    z = math.exp(g)
    return z / (1.0 + z)


def gate_attenuation_curve(spec: NoiseSpec, gates) -> list[tuple[float, float, float]]:
    """Rows (g, sigmoid(g), async bound with every stage strength scaled by sigmoid(g))."""
    rows = []
    for g in gates:
        s = _sigmoid(float(g))
        rows.append((float(g), s, spec.stages ** 2 * (s * spec.max_strength) ** 2 * spec.sigma ** 2))
    return rows


THEORY_FIELDS = ("L", "S", "correlation", "var_sync", "var_async", "ratio", "sync_bound", "async_bound")


def theory_rows(specs) -> list[dict]:
    rows = []
    for spec in specs:
        res = simulate_accumulation(spec)
        label = spec.correlation if spec.correlation != "rho" else f"rho={spec.rho:g}"
        rows.append({"L": spec.depth, "S": spec.stages, "correlation": label,
                     "var_sync": res["var_sync_mc"], "var_async": res["var_async_mc"],
                     "ratio": res["ratio_mc"], "sync_bound": res["sync_bound"],
                     "async_bound": res["async_bound"]})
    return rows


def write_theory_csv(path, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=THEORY_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})
    return path
