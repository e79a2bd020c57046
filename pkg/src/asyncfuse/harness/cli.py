"""Command line entry point (``asyncfuse``).

Every subcommand accepts ``--config FILE`` plus one flag per experiment
setting (``--d-model 32``, ``--horizons 96,192``); flags override the file.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from ..blocks import AttentionTrace
from ..errors import ConfigError
from ..numerics import no_grad
from ..theory import NoiseSpec, gate_attenuation_curve, theory_rows, write_theory_csv
from .config import ExperimentSpec, make_spec, parse_settings, write_config
from .datasets import dataset_ids
from .protocols import (
    load_model,
    prepare,
    run_ablation,
    run_eval,
    run_few_shot,
    run_long_term,
    run_stage_sweep,
    run_zero_shot,
)

log = logging.getLogger("asyncfuse")

SETTINGS = [f.name for f in dataclasses.fields(ExperimentSpec)]


def add_settings(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value settings file")
    g = p.add_argument_group("settings (override the config file)")
    for name in SETTINGS:
        g.add_argument("--" + name.replace("_", "-"), dest=name, metavar="V")
    p.add_argument("-v", "--verbose", action="store_true")


def spec_from(args, **forced) -> ExperimentSpec:
    given = {k: getattr(args, k) for k in SETTINGS if getattr(args, k, None) is not None}
    overrides = parse_settings(given)
    overrides.update(forced)
    return make_spec(args.config, **overrides)


def emit(report, out: Path, stem: str) -> None:
    paths = report.write(out, stem)
    sys.stdout.write(report.to_table())
    print(f"report: {paths['csv']}")


def cmd_train(args) -> int:
    spec = spec_from(args, task="long_term")
    out = Path(spec.out)
    write_config(out / "train.cfg", spec)
    emit(run_long_term(spec, save_dir=out / "checkpoints"), out, "train")
    return 0


def cmd_eval(args) -> int:
    spec = spec_from(args)
    out = Path(spec.out)
    ckpts = list(args.checkpoint) or sorted((out / "checkpoints").glob("*.ckpt"))
    if not ckpts:
        raise ConfigError(f"no checkpoints given and none found under {out / 'checkpoints'}")
    report, forecasts = run_eval(spec, ckpts, args.on)
    emit(report, out, "eval")
    if args.save_forecasts:
        for stem, arr in forecasts.items():
            np.save(out / f"forecast_{stem}.npy", arr)
    return 0


def cmd_zero_shot(args) -> int:
    spec = spec_from(args, task="zero_shot")
    emit(run_zero_shot(spec), Path(spec.out), "zero_shot")
    return 0


def cmd_few_shot(args) -> int:
    spec = spec_from(args, task="few_shot")
    emit(run_few_shot(spec), Path(spec.out), "few_shot")
    return 0


def cmd_ablate(args) -> int:
    spec = spec_from(args, task="ablation")
    emit(run_ablation(spec), Path(spec.out), "ablation")
    return 0


def cmd_sweep(args) -> int:
    spec = spec_from(args, task="stage_sweep")
    emit(run_stage_sweep(spec), Path(spec.out), "stage_sweep")
    return 0


def cmd_theory(args) -> int:
    specs = [NoiseSpec(args.sigma, corr, rho=args.rho if corr == "rho" else 0.0, strength=args.strength,
                       depth=args.depth, stages=s, trials=args.trials, seed=args.seed)
             for s in args.stages for corr in args.correlation]
    rows = theory_rows(specs)
    path = write_theory_csv(Path(args.out) / "theory.csv", rows)
    for r in rows:
        print(f"L={r['L']} S={r['S']} {r['correlation']:<16} sync {r['var_sync']:.4f} (bound "
              f"{r['sync_bound']:g})  async {r['var_async']:.4f} (bound {r['async_bound']:g})")
    for g, s, b in gate_attenuation_curve(NoiseSpec(args.sigma, strength=args.strength, depth=args.depth,
                                                     stages=args.stages[0]), [-4, -2, 0, 2, 4]):
        print(f"gate {g:+.0f}  sigmoid {s:.4f}  async bound {b:.4f}")
    print(f"csv: {path}")
    return 0


def cmd_render(args) -> int:
    spec = spec_from(args)
    horizon = spec.horizons[0]
    prep = prepare(spec, spec.dataset, horizon)
    start = int(prep.data.windows[args.split][args.index])
    for rec in prep.prompts.records(start):
        print(rec.text)
    return 0


def cmd_dump_attn(args) -> int:
    spec = spec_from(args)
    model, header = load_model(args.checkpoint)
    cfg = model.cfg
    spec = spec.replace(lookback=cfg.lookback, d_llm=cfg.d_llm)
    prep = prepare(spec, args.on or header["config"]["dataset"], cfg.horizon)
    starts = prep.data.windows[args.split][:args.windows]
    batch = prep.data.batch(starts)
    trace = AttentionTrace()
    model.eval()
    with no_grad():
        model(batch.x, prep.prompts.embeddings(starts), trace)
    out = Path(spec.out) / "attention"
    paths = trace.write_csv(out)
    feat_dir = Path(spec.out) / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    for key, arr in trace.features.items():
        # one row per token, for external embedding plots
        np.savetxt(feat_dir / f"{key}.csv", arr.reshape(-1, arr.shape[-1]), delimiter=",", fmt="%.10g")
    print(f"{len(paths)} attention maps -> {out}; {len(trace.features)} feature matrices -> {feat_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asyncfuse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        add_settings(p)
        p.set_defaults(fn=fn)
        return p

    command("train", cmd_train, "train one model per horizon, save checkpoints and a report")
    p = command("eval", cmd_eval, "score saved checkpoints on a test split")
    p.add_argument("--checkpoint", action="append", default=[], help="repeatable; default: OUT/checkpoints/*")
    p.add_argument("--on", help="dataset id to score on (default: training set)")
    p.add_argument("--save-forecasts", action="store_true", help="write forecast_*.npy (windows, H, N)")
    command("zero-shot", cmd_zero_shot, "train on --dataset, score --target without retraining")
    command("few-shot", cmd_few_shot, "train on a leading fraction (--few-shot) of the train split")
    command("ablate", cmd_ablate, "compare model variants under one seed")
    command("sweep-stages", cmd_sweep, "grid over stage counts and placement presets")

    p = sub.add_parser("theory", help="noise-accumulation bounds and Monte Carlo")
    p.add_argument("--depth", type=int, default=6)
    p.add_argument("--stages", type=lambda s: [int(v) for v in s.split(",")], default=[2])
    p.add_argument("--correlation", type=lambda s: s.split(","), default=["iid", "fully_correlated"])
    p.add_argument("--rho", type=float, default=0.5)
    p.add_argument("--strength", type=float, default=1.0)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--trials", type=int, default=10 ** 6)
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--out", default="runs")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(fn=cmd_theory)

    p = command("render-prompts", cmd_render, "print the prompts of one window")
    p.add_argument("--split", default="test")
    p.add_argument("--index", type=int, default=0)

    p = command("dump-attn", cmd_dump_attn, "export attention maps and hidden features as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--on")
    p.add_argument("--split", default="test")
    p.add_argument("--windows", type=int, default=8)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, ValueError, LookupError) as exc:
        print(f"asyncfuse {args.command}: error: {exc}", file=sys.stderr)
        print(f"registered datasets: {', '.join(dataset_ids())}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
