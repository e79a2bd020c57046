"""Experiment protocols: long-term, few-shot, zero-shot, ablation and stage sweeps."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path

from ..errors import ConfigError, TransferError
from ..model import ModelConfig, build_model, make_variant, placement_layers
from ..numerics import Module, load_checkpoint, save_checkpoint
from ..preprocess import WindowedDataset, build_windows
from ..prompts import PromptPipeline, make_provider
from ..training import evaluate, predict, train
from .config import ExperimentSpec
from .datasets import DatasetEntry, get_dataset
from .report import ReportRow, RunReport

log = logging.getLogger(__name__)


@dataclass
class Prepared:
    entry: DatasetEntry
    data: WindowedDataset
    prompts: PromptPipeline


def prepare(spec: ExperimentSpec, key: str, horizon: int, few_shot: float | None = None) -> Prepared:
    entry = get_dataset(key)
    data = build_windows(entry.load(), spec.lookback, horizon, entry.ratios, few_shot)
    provider = make_provider(spec.embedder, spec.d_llm, spec.seed, spec.embedding_file)
    return Prepared(entry, data, PromptPipeline(data, spec.prompt_spec(entry.freq, entry.domain), provider))


def fit(spec: ExperimentSpec, prep: Prepared, horizon: int, **model_changes) -> tuple[Module, ModelConfig]:
    cfg = spec.model_config(prep.data.n_vars, horizon, **model_changes)
    model = build_model(cfg)
    train(model, prep.data, spec.train_config(), prep.prompts)
    return model, cfg


def checkpoint_config(spec: ExperimentSpec, cfg: ModelConfig, key: str) -> dict:
    return {"model": cfg.to_dict(), "dataset": key, "prompt_variant": spec.prompt_variant,
            "trend": spec.trend, "embedder": spec.embedder, "embedding_file": spec.embedding_file}


def save_model(path, model: Module, spec: ExperimentSpec, cfg: ModelConfig, key: str) -> Path:
    return save_checkpoint(path, model.state_dict(), checkpoint_config(spec, cfg, key), spec.seed)


def load_model(path) -> tuple[Module, dict]:
    params, header = load_checkpoint(path)
    cfg = ModelConfig(**header["config"]["model"])
    model = build_model(cfg)
    model.load_state_dict(params)
    return model, header


def _row(key: str, horizon: int, cfg: ModelConfig, metrics: tuple[float, float], variant: str | None = None,
         note: str = "") -> ReportRow:
    return ReportRow(key, horizon, variant or cfg.variant, metrics[0], metrics[1],
                     make_variant(cfg)["fusion_calls"], cfg.hash(), note)


def _finish(report: RunReport, started: float) -> RunReport:
    report.with_averages()
    report.wall_time = time.perf_counter() - started
    return report


def run_long_term(spec: ExperimentSpec, save_dir=None) -> RunReport:
    """Train one model per horizon and score the test split."""
    started = time.perf_counter()
    report = RunReport("long_term", spec.hash(), spec.seed)
    for h in spec.horizons:
        prep = prepare(spec, spec.dataset, h)
        model, cfg = fit(spec, prep, h)
        if save_dir is not None:
            save_model(Path(save_dir) / checkpoint_name(spec.dataset, h, cfg.variant), model, spec, cfg,
                       spec.dataset)
        report.add(_row(spec.dataset, h, cfg, evaluate(model, prep.data, "test", spec.eval_batch, prep.prompts)))
    return _finish(report, started)


def checkpoint_name(key: str, horizon: int, variant: str) -> str:
    return f"{key}_H{horizon}_{variant}.ckpt"


def run_few_shot(spec: ExperimentSpec, fraction: float | None = None) -> RunReport:
    """Train on a leading fraction of the train split; validation and test are unchanged."""
    started = time.perf_counter()
    fraction = spec.few_shot if fraction is None else fraction
    report = RunReport("few_shot", spec.hash(), spec.seed, notes=[f"train fraction {fraction:g}"])
    for h in spec.horizons:
        prep = prepare(spec, spec.dataset, h, few_shot=fraction)
        model, cfg = fit(spec, prep, h)
        report.add(_row(spec.dataset, h, cfg, evaluate(model, prep.data, "test", spec.eval_batch, prep.prompts)))
    return _finish(report, started)


def evaluate_checkpoint(path, spec: ExperimentSpec, key: str | None = None, split: str = "test"):
    """Score a saved model on ``key`` (default: the set it was trained on).

    Returns (row, forecasts) with forecasts shaped (windows, horizon, vars).
    """
    model, header = load_model(path)
    cfg: ModelConfig = model.cfg
    key = key or header["config"]["dataset"]
    saved = header["config"]
    spec = spec.replace(lookback=cfg.lookback, d_llm=cfg.d_llm, prompt_variant=saved["prompt_variant"],
                        trend=saved["trend"], embedder=saved["embedder"], embedding_file=saved["embedding_file"])
    prep = prepare(spec, key, cfg.horizon)
    if prep.data.n_vars != cfg.n_vars:
        raise TransferError(f"model expects {cfg.n_vars} channels, {key!r} has {prep.data.n_vars}")
    mets = evaluate(model, prep.data, split, spec.eval_batch, prep.prompts)
    forecasts = predict(model, prep.data, split, spec.eval_batch, prep.prompts)
    return _row(key, cfg.horizon, cfg, mets), forecasts


def run_eval(spec: ExperimentSpec, checkpoints, key: str | None = None) -> tuple[RunReport, dict]:
    started = time.perf_counter()
    report = RunReport("eval", spec.hash(), spec.seed)
    forecasts = {}
    for path in checkpoints:
        row, fc = evaluate_checkpoint(path, spec, key)
        report.add(row)
        forecasts[Path(path).stem] = fc
    return _finish(report, started), forecasts


def run_zero_shot(spec: ExperimentSpec, checkpoints: dict[int, str] | None = None) -> RunReport:
    """Train on ``spec.dataset`` (or load its checkpoints), score ``spec.target`` untouched.

    Target z-scoring uses the target's own train split; prompt text uses the
    target's frequency label.
    """
    started = time.perf_counter()
    source, target = spec.dataset, spec.target or spec.dataset
    n_src, n_tgt = get_dataset(source).load().n_vars, get_dataset(target).load().n_vars
    if n_src != n_tgt:
        raise TransferError(f"channel counts differ: {source!r} has {n_src}, {target!r} has {n_tgt}")
    report = RunReport("zero_shot", spec.hash(), spec.seed,
                       notes=[f"{source} -> {target}; prompt frequency label from {target}"])
    for h in spec.horizons:
        if checkpoints and h in checkpoints:
            model, _ = load_model(checkpoints[h])
            cfg = model.cfg
        else:
            model, cfg = fit(spec, prepare(spec, source, h), h)
        tgt = prepare(spec, target, h)
        report.add(_row(f"{source}->{target}", h, cfg,
                        evaluate(model, tgt.data, "test", spec.eval_batch, tgt.prompts)))
    return _finish(report, started)


def run_ablation(spec: ExperimentSpec) -> RunReport:
    """Every variant under the same seed, hyperparameters and data order."""
    started = time.perf_counter()
    report = RunReport("ablation", spec.hash(), spec.seed)
    for h in spec.horizons:
        prep = prepare(spec, spec.dataset, h)
        for variant in spec.variants:
            model, cfg = fit(spec, prep, h, variant=variant)
            report.add(_row(spec.dataset, h, cfg,
                            evaluate(model, prep.data, "test", spec.eval_batch, prep.prompts)))
    return _finish(report, started)


def stage_grid(depth: int, stages, placements) -> list[tuple[int, str, tuple | None, str]]:
    """(S, preset, fusion layers or None, skip reason) for every sweep cell."""
    cells = []
    for s in stages:
        for p in placements:
            if s < 1 or s > depth or depth % s:
                cells.append((s, p, None, f"skipped: depth {depth} / {s} stages is not an integer"))
                continue
            cells.append((s, p, placement_layers(depth, s, p), ""))
    return cells


def run_stage_sweep(spec: ExperimentSpec) -> RunReport:
    started = time.perf_counter()
    report = RunReport("stage_sweep", spec.hash(), spec.seed)
    for h in spec.horizons:
        prep = prepare(spec, spec.dataset, h)
        for s, preset, layers, reason in stage_grid(spec.depth, spec.stage_grid, spec.placements):
            label = f"S{s}_{preset}"
            if layers is None:
                report.skip(spec.dataset, h, label, reason)
                continue
            model, cfg = fit(spec, prep, h, stages=s, fusion_layers=layers, refine_layers=None)
            mets = evaluate(model, prep.data, "test", spec.eval_batch, prep.prompts)
            report.add(_row(spec.dataset, h, cfg, mets, variant=label,
                            note="fusion at " + " ".join(str(l) for l in layers)))
    return _finish(report, started)


def run_task(spec: ExperimentSpec, save_dir=None) -> RunReport:
    runners = {"long_term": lambda: run_long_term(spec, save_dir), "few_shot": lambda: run_few_shot(spec),
               "zero_shot": lambda: run_zero_shot(spec), "ablation": lambda: run_ablation(spec),
               "stage_sweep": lambda: run_stage_sweep(spec)}
    if spec.task not in runners:
        raise ConfigError(f"task {spec.task!r} has no model protocol")
    return runners[spec.task]()
