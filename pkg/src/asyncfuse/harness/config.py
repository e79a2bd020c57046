"""Experiment settings and the key=value config file format.

Config files hold one ``key = value`` pair per line; ``#`` starts a comment.
Keys are the field names of ``ExperimentSpec``.  Lists are comma separated
(``horizons = 96, 192``), ``none`` clears an optional value and booleans are
``true``/``false``.  Command-line flags override keys read from the file.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass
from pathlib import Path

from ..errors import ConfigError
from ..model import PLACEMENTS, ModelConfig
from ..numerics import config_hash
from ..prompts import PromptTemplateSpec
from ..training import TrainConfig

TASKS = ("long_term", "few_shot", "zero_shot", "ablation", "stage_sweep", "theory")
ABLATION_VARIANTS = ("full", "no_trunk", "no_query", "no_gate", "sync_refine")


@dataclass(frozen=True)
class ExperimentSpec:
    task: str = "long_term"
    dataset: str = "synth_h"
    target: str | None = None  # zero-shot evaluation set
    horizons: tuple[int, ...] = (96, 192, 336, 720)
    few_shot: float = 0.10
    variants: tuple[str, ...] = ABLATION_VARIANTS
    stage_grid: tuple[int, ...] = (1, 2, 4)
    placements: tuple[str, ...] = PLACEMENTS
    out: str = "runs"
    seed: int = 2024
    # model
    lookback: int = 96
    patch_len: int = 16
    stride: int = 8
    d_model: int = 64
    d_fusion: int | None = None
    n_queries: int = 4
    n_heads: int = 4
    ffn_mult: int = 4
    depth: int = 2
    stages: int = 1
    fusion_layers: tuple[int, ...] | None = None
    refine_layers: tuple[int, ...] | None = None
    variant: str = "full"
    d_llm: int = 768
    # optimisation
    lr: float = 1e-3
    batch_size: int = 32
    eval_batch: int = 64
    epochs: int = 50
    patience: int = 5
    weight_decay: float = 0.0
    max_steps: int | None = None
    # prompts
    prompt_variant: str = "full"
    trend: str = "last_minus_first"
    embedder: str = "stub"
    embedding_file: str | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if not 0.0 < self.few_shot <= 1.0:
            raise ConfigError(f"few_shot fraction must lie in (0, 1], got {self.few_shot}")

    def replace(self, **changes) -> ExperimentSpec:
        return dataclasses.replace(self, **changes)

    def model_config(self, n_vars: int, horizon: int, **changes) -> ModelConfig:
        cfg = ModelConfig(n_vars=n_vars, lookback=self.lookback, patch_len=self.patch_len,
                          stride=self.stride, horizon=horizon, d_model=self.d_model, d_fusion=self.d_fusion,
                          n_queries=self.n_queries, n_heads=self.n_heads, ffn_mult=self.ffn_mult,
                          depth=self.depth, stages=self.stages, fusion_layers=self.fusion_layers,
                          refine_layers=self.refine_layers, variant=self.variant, d_llm=self.d_llm,
                          seed=self.seed)
        return cfg.replace(**changes) if changes else cfg

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, epochs=self.epochs, patience=self.patience,
                           weight_decay=self.weight_decay, max_steps=self.max_steps, seed=self.seed)

    def prompt_spec(self, freq: str, domain: str) -> PromptTemplateSpec:
        return PromptTemplateSpec(self.prompt_variant, freq=freq, domain=domain, trend=self.trend)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    def hash(self) -> str:
        return config_hash(self.to_dict())


_HINTS = typing.get_type_hints(ExperimentSpec)


def _parse_value(key: str, text: str):
    hint = _HINTS[key]
    text = text.strip()
    optional = type(None) in typing.get_args(hint)
    if optional:
        if text.lower() in ("none", ""):
            return None
        hint = next(a for a in typing.get_args(hint) if a is not type(None))
    origin = typing.get_origin(hint)
    try:
        if origin is tuple:
            inner = typing.get_args(hint)[0]
            return tuple(inner(p.strip()) for p in text.split(",") if p.strip())
        if hint is bool:
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        return hint(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def parse_settings(pairs: dict[str, str]) -> dict:
    out = {}
    for key, text in pairs.items():
        if key not in _HINTS:
            raise ConfigError(f"unknown setting {key!r}")
        out[key] = _parse_value(key, text)
    return out


def read_config(path) -> dict:
    """Parse a key=value file into typed ExperimentSpec fields."""
    pairs = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value
    return parse_settings(pairs)


def write_config(path, spec: ExperimentSpec) -> Path:
    lines = []
    for key, value in dataclasses.asdict(spec).items():
        if value is None:
            text = "none"
        elif isinstance(value, tuple):
            text = ", ".join(str(v) for v in value)
        elif isinstance(value, bool):
            text = str(value).lower()
        else:
            text = str(value)
        lines.append(f"{key} = {text}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


def make_spec(file: str | None = None, **overrides) -> ExperimentSpec:
    """File values first, then non-None overrides."""
    values = read_config(file) if file else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentSpec(**values)
