"""Epoch loop with validation early stopping, evaluation and a small grid search."""
from __future__ import annotations

import dataclasses
import itertools
import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, DataError
from .model import forecast_loss
from .numerics import AdamHyper, Module, ParameterStore, adam_step, no_grad

log = logging.getLogger(__name__)

LR_GRID = (1e-4, 3e-4, 5e-4, 1e-3)
BATCH_GRID = (16, 32, 48, 64)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 50
    patience: int = 5
    weight_decay: float = 0.0
    max_steps: int | None = None
    seed: int = 2024
    shuffle: bool = True

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 1 or self.patience < 1:
            raise ConfigError(f"bad training settings {self}")

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)


@dataclass
class EpochRecord:
    epoch: int
    steps: int
    train_mse: float
    val_mse: float


def _embeddings(prompts, starts):
    # models without a text branch ignore the second argument
    return None if prompts is None else prompts.embeddings(starts)


def predict(model: Module, dataset, split: str = "test", batch_size: int = 64, prompts=None) -> np.ndarray:
    """Forecasts (W, H, N) in scaled units for every window of ``split``, in order."""
    model.eval()
    out = []
    with no_grad():
        for b in dataset.batches(split, batch_size):
            out.append(model(b.x, _embeddings(prompts, b.starts)).data)
    model.train()
    return np.concatenate(out, axis=0)


def evaluate(model: Module, dataset, split: str = "test", batch_size: int = 64,
             prompts=None) -> tuple[float, float]:
    """(MSE, MAE) over every window of ``split``; the last partial batch is kept."""
    sq = ab = 0.0
    count = 0
    model.eval()
    with no_grad():
        for b in dataset.batches(split, batch_size):
            err = model(b.x, _embeddings(prompts, b.starts)).data - b.y
            sq += float(np.sum(err * err))
            ab += float(np.sum(np.abs(err)))
            count += err.size
    model.train()
    return sq / count, ab / count


def train(model: Module, dataset, cfg: TrainConfig | None = None, prompts=None):
    """Adam training with early stopping on validation MSE.

    Returns the parameter store (holding the best-validation weights) and the
    per-epoch history.  Everything is driven by ``cfg.seed``.
    """
    cfg = cfg or TrainConfig()
    if dataset.counts()["train"] < 1:
        raise DataError("empty train split")
    store = ParameterStore(model.named_parameters(),
                           AdamHyper(lr=cfg.lr, weight_decay=cfg.weight_decay))
    rng = np.random.default_rng(cfg.seed)
    history: list[EpochRecord] = []
    best_val, best = np.inf, store.snapshot()
    stale = steps = 0
    for epoch in range(1, cfg.epochs + 1):
        sq, count = 0.0, 0
        for b in dataset.batches("train", cfg.batch_size, shuffle=cfg.shuffle, rng=rng):
            pred = model(b.x, _embeddings(prompts, b.starts))
            loss = forecast_loss(pred, b.y)
            err = pred.data - b.y
            sq += float(np.sum(err * err))
            count += err.size
            store.zero_grad()
            loss.backward()
            adam_step(store)
            steps += 1
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
        val, _ = evaluate(model, dataset, "val", cfg.batch_size, prompts)
        history.append(EpochRecord(epoch, steps, sq / count, val))
        log.info("epoch %d  steps %d  train %.6f  val %.6f", epoch, steps, sq / count, val)
        if val < best_val:
            best_val, best, stale = val, store.snapshot(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
    store.restore(best)
    return store, history


def grid_search(make_model: Callable[[], Module], dataset, base: TrainConfig | None = None,
                lrs=LR_GRID, batch_sizes=BATCH_GRID, prompts=None):
    """Train one model per (lr, batch size); keep the lowest best-validation MSE.

    Returns (model, TrainConfig, history, table) where ``table`` lists every cell.
    """
    base = base or TrainConfig()
    winner, table = None, []
    for lr, bs in itertools.product(lrs, batch_sizes):
        cfg = base.replace(lr=lr, batch_size=bs)
        model = make_model()
        _, history = train(model, dataset, cfg, prompts)
        val = min(r.val_mse for r in history)
        table.append((lr, bs, val))
        if winner is None or val < winner[0]:
            winner = (val, model, cfg, history)
    return winner[1], winner[2], winner[3], table
