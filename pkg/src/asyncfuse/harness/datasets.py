"""Dataset registry: ids map to a loader, a frequency label and the split-ratio rule.

Bundled sets are deterministic synthetic generators; real CSVs are added with
``register_csv``.
"""
from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timedelta
from typing import Callable

import numpy as np

from ..errors import ConfigError
from ..preprocess import DEFAULT_RATIOS, ETT_RATIOS, Series, read_csv

START = datetime(2016, 7, 1)


@dataclass(frozen=True)
class DatasetEntry:
    key: str
    loader: Callable[[], Series]
    freq: str
    ett_split: bool = False  # 6:2:2 instead of 7:1:2
    domain: str = "an unspecified"

    @property
    def ratios(self) -> tuple:
        return ETT_RATIOS if self.ett_split else DEFAULT_RATIOS

    def load(self) -> Series:
        return self.loader()


_REGISTRY: dict[str, DatasetEntry] = {}


def register(entry: DatasetEntry, overwrite: bool = False) -> DatasetEntry:
    if entry.key in _REGISTRY and not overwrite:
        raise ConfigError(f"dataset {entry.key!r} already registered")
    _REGISTRY[entry.key] = entry
    return entry


def register_csv(key: str, path, freq: str = "1 hour", ett_split: bool = False,
                 domain: str = "an unspecified", delimiter: str = ",") -> DatasetEntry:
    return register(DatasetEntry(key, lambda: read_csv(path, delimiter, freq, key), freq, ett_split, domain),
                    overwrite=True)


def get_dataset(key: str) -> DatasetEntry:
    try:
        return _REGISTRY[key]
    except KeyError:
        raise ConfigError(f"unknown dataset {key!r}; registered: {sorted(_REGISTRY)}") from None


def dataset_ids() -> list[str]:
    return sorted(_REGISTRY)


def stamps(n: int, step: timedelta) -> list[str]:
    return [(START + i * step).strftime("%Y-%m-%d %H:%M:%S") for i in range(n)]


def synthetic_series(length: int, n_vars: int, period: float, seed: int, step: timedelta,
                     name: str, noise: float = 0.1) -> Series:
    """Per-channel mix of two sinusoids, a slow linear drift and Gaussian noise."""
    rng = np.random.default_rng(seed)
    t = np.arange(length, dtype=np.float64)[:, None]
    amp = rng.uniform(0.5, 2.0, (2, n_vars))
    phase = rng.uniform(0, 2 * np.pi, (2, n_vars))
    slope = rng.uniform(-1.0, 1.0, n_vars) / length
    level = rng.uniform(-2.0, 5.0, n_vars)
    values = (level + amp[0] * np.sin(2 * np.pi * t / period + phase[0])
              + amp[1] * np.sin(2 * np.pi * t / (period / 4) + phase[1])
              + slope * t + noise * rng.standard_normal((length, n_vars)))
    return Series(values, stamps(length, step), [f"var{i}" for i in range(n_vars)],
                  freq=_label(step), name=name)


def sine_series(length: int = 400, period: int = 16, n_vars: int = 2) -> Series:
    """Noise-free sines with channel-dependent phase; the overfitting target."""
    t = np.arange(length, dtype=np.float64)[:, None]
    values = np.sin(2 * np.pi * t / period + np.arange(n_vars) * 0.7)
    return Series(values, stamps(length, timedelta(hours=1)), [f"sine{i}" for i in range(n_vars)],
                  freq="1 hour", name="sine")


def _label(step: timedelta) -> str:
    minutes = int(step.total_seconds() // 60)
    if minutes % 60 == 0:
        hours = minutes // 60
        return "1 hour" if hours == 1 else f"{hours} hours"
    return f"{minutes} minutes"


HOUR, QUARTER = timedelta(hours=1), timedelta(minutes=15)
register(DatasetEntry("synth_h", lambda: synthetic_series(2000, 7, 24, 11, HOUR, "synth_h"), "1 hour",
                      ett_split=True, domain="synthetic hourly sensor"))
register(DatasetEntry("synth_m", lambda: synthetic_series(4000, 7, 96, 12, QUARTER, "synth_m"), "15 minutes",
                      ett_split=True, domain="synthetic sensor"))
register(DatasetEntry("synth3", lambda: synthetic_series(1500, 3, 24, 13, HOUR, "synth3"), "1 hour",
                      domain="synthetic three-channel"))
register(DatasetEntry("sine", sine_series, "1 hour", domain="synthetic sine"))
