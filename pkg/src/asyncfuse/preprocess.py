"""Series -> normalised temporal tokens: RevIN, patching, windowing, CSV input."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DataError
from .numerics import Linear, Module, Tensor, parameter

SPLITS = ("train", "val", "test")
ETT_RATIOS = (6, 2, 2)
DEFAULT_RATIOS = (7, 1, 2)


# -- RevIN -------------------------------------------------------------------
@dataclass
class RevinState:
    """Per-window statistics plus the (shared) learnable affine parameters."""

    gain: Tensor
    bias: Tensor
    eps: float = 1e-5
    mean: np.ndarray | None = None
    std: np.ndarray | None = None


def revin_normalize(x: Tensor, state: RevinState, mode: str = "norm") -> Tensor:
    """Instance-normalise ``x`` of shape (B, L, N) or invert a previous call.

    ``norm`` records mean and population std over the time axis (std clamped
    at ``eps``) into ``state``; ``denorm`` applies the exact inverse, affine
    included, using those recorded statistics.
    """
    if mode == "norm":
        mean = x.data.mean(axis=1, keepdims=True)
        std = np.maximum(x.data.std(axis=1, keepdims=True), state.eps)
        state.mean, state.std = mean, std
        return (x - mean) / std * state.gain + state.bias
    if mode == "denorm":
        if state.mean is None:
            raise ContractError("denorm called before norm captured statistics")
        return (x - state.bias) / state.gain * state.std + state.mean
    raise ValueError(f"unknown RevIN mode {mode!r}")


class RevIN(Module):
    def __init__(self, n_vars: int, eps: float = 1e-5, affine: bool = True):
        self.eps = eps
        if affine:
            self.gain = parameter(np.ones(n_vars))
            self.bias = parameter(np.zeros(n_vars))
        else:
            self.gain = Tensor(np.ones(n_vars))
            self.bias = Tensor(np.zeros(n_vars))

    def new_state(self) -> RevinState:
        return RevinState(self.gain, self.bias, self.eps)


# -- patching ----------------------------------------------------------------
@dataclass(frozen=True)
class PatchConfig:
    lookback: int = 96
    patch_len: int = 16
    stride: int = 8
    d_model: int = 64

    def __post_init__(self):
        if self.patch_len < 1 or self.stride < 1 or self.lookback < 1:
            raise ConfigError(f"patch_len, stride and lookback must be positive: {self}")
        if self.patch_len > self.lookback:
            raise ConfigError(f"patch_len {self.patch_len} exceeds lookback {self.lookback}")

    @property
    def num_patches(self) -> int:
        return (self.lookback - self.patch_len) // self.stride + 1


def patch_index(cfg: PatchConfig) -> np.ndarray:
    starts = np.arange(cfg.num_patches) * cfg.stride
    return starts[:, None] + np.arange(cfg.patch_len)[None, :]


def make_patches(x: Tensor, cfg: PatchConfig) -> Tensor:
    """(B, L, N) -> (B*N, N_p, P); each channel becomes its own batch row.

    Steps after the last full patch are dropped.
    """
    b, length, n = x.shape
    if length != cfg.lookback:
        raise ConfigError(f"input length {length} != lookback {cfg.lookback}")
    rows = x.transpose(0, 2, 1).reshape(b * n, length)
    return rows[:, patch_index(cfg)]


def embed_patches(patches: Tensor, proj: Linear, pos: Tensor) -> Tensor:
    return proj(patches) + pos


# -- series and windows --------------------------------------------------------
@dataclass
class Series:
    values: np.ndarray  # (T, N)
    timestamps: list[str]
    names: list[str]
    freq: str = "1 hour"
    name: str = "series"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataError(f"values must be (T, N), got {self.values.shape}")
        if len(self.timestamps) != len(self.values):
            raise DataError("timestamps and values differ in length")

    @property
    def n_vars(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return len(self.values)


def _check_timestamp(text: str, row: int) -> str:
    text = text.strip()
    try:
        int(text)
        return text
    except ValueError:
        pass
    try:
        datetime.fromisoformat(text)
    except ValueError:
        raise DataError(f"row {row}, column 1: timestamp {text!r} is neither ISO-8601 nor integer") from None
    return text


def read_csv(path, delimiter: str = ",", freq: str = "1 hour", name: str | None = None) -> Series:
    """Load a header-first CSV: timestamp column, then numeric channels."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if len(header) < 2:
            raise DataError(f"{path}: need a timestamp column and at least one channel")
        stamps, rows = [], []
        for r, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise DataError(f"{path}: row {r} has {len(rec)} fields, header has {len(header)}")
            stamps.append(_check_timestamp(rec[0], r))
            vals = []
            for c, cell in enumerate(rec[1:], start=2):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise DataError(f"{path}: row {r}, column {c} ({header[c - 1]}): "
                                    f"not numeric: {cell!r}") from None
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return Series(np.array(rows), stamps, header[1:], freq=freq, name=name or path.stem)


@dataclass
class Batch:
    x: np.ndarray  # (B, L, N) scaled history
    y: np.ndarray  # (B, H, N) scaled target
    starts: np.ndarray  # window start indices into the series


@dataclass
class WindowedDataset:
    series: Series
    lookback: int
    horizon: int
    ratios: tuple = DEFAULT_RATIOS
    few_shot_fraction: float | None = None
    scale: bool = True
    borders: dict = field(init=False)
    windows: dict = field(init=False)
    mean: np.ndarray = field(init=False)
    std: np.ndarray = field(init=False)
    data: np.ndarray = field(init=False)

    def __post_init__(self):
        total = len(self.series)
        if total < self.lookback + self.horizon:
            raise DataError(f"series of length {total} shorter than lookback+horizon "
                            f"({self.lookback}+{self.horizon})")
        if len(self.ratios) != 3 or min(self.ratios) < 0 or sum(self.ratios) <= 0:
            raise ConfigError(f"bad split ratios {self.ratios}")
        frac = self.few_shot_fraction
        if frac is not None and not 0.0 < frac <= 1.0:
            raise ConfigError(f"few_shot_fraction must lie in (0, 1], got {frac}")
        tot = sum(self.ratios)
        n_train = int(total * self.ratios[0] / tot)
        n_test = int(total * self.ratios[2] / tot)
        n_val = total - n_train - n_test
        train_end = n_train if frac is None else int(round(n_train * frac))
        # val/test histories may reach back into the previous split; targets never do
        self.borders = {
            "train": (0, train_end),
            "val": (max(n_train - self.lookback, 0), n_train + n_val),
            "test": (max(total - n_test - self.lookback, 0), total),
        }
        span = self.lookback + self.horizon
        self.windows = {}
        for split, (lo, hi) in self.borders.items():
            count = hi - lo - span + 1
            if count < 1:
                raise DataError(f"empty {split} split: region [{lo}, {hi}) cannot hold "
                                f"lookback {self.lookback} + horizon {self.horizon}")
            self.windows[split] = np.arange(lo, lo + count)
        stats = self.series.values[:n_train]
        if self.scale:
            self.mean = stats.mean(axis=0)
            std = stats.std(axis=0)
            self.std = np.where(std > 0, std, 1.0)
        else:
            self.mean = np.zeros(self.series.n_vars)
            self.std = np.ones(self.series.n_vars)
        self.data = (self.series.values - self.mean) / self.std

    @property
    def n_vars(self) -> int:
        return self.series.n_vars

    def counts(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.windows.items()}

    def window(self, start: int) -> tuple[np.ndarray, np.ndarray]:
        mid = start + self.lookback
        return self.data[start:mid], self.data[mid:mid + self.horizon]

    def raw_window(self, start: int) -> tuple[np.ndarray, list[str]]:
        """Unscaled history and its timestamps (used for prompt text)."""
        end = start + self.lookback
        return self.series.values[start:end], self.series.timestamps[start:end]

    def batch(self, starts: Sequence[int]) -> Batch:
        starts = np.asarray(starts, dtype=np.int64)
        offs = np.arange(self.lookback + self.horizon)
        block = self.data[starts[:, None] + offs[None, :]]
        return Batch(block[:, :self.lookback], block[:, self.lookback:], starts)

    def batches(self, split: str, batch_size: int, shuffle: bool = False,
                rng: np.random.Generator | None = None, drop_last: bool = False) -> Iterator[Batch]:
        starts = self.windows[split]
        if shuffle:
            if rng is None:
                raise ContractError("shuffled iteration needs a generator")
            starts = starts[rng.permutation(len(starts))]
        for i in range(0, len(starts), batch_size):
            chunk = starts[i:i + batch_size]
            if drop_last and len(chunk) < batch_size:
                break
            yield self.batch(chunk)

    def num_batches(self, split: str, batch_size: int) -> int:
        return math.ceil(len(self.windows[split]) / batch_size)


def build_windows(series: Series, lookback: int, horizon: int, split_ratios=DEFAULT_RATIOS,
                  few_shot_fraction: float | None = None, scale: bool = True) -> WindowedDataset:
    return WindowedDataset(series, lookback, horizon, tuple(split_ratios), few_shot_fraction, scale)
