"""Run reports: per-(horizon, variant) metrics with average rows, as CSV and a text table.

Wall time goes to a separate file so that the CSV and the table are
byte-identical across repeated runs.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FIELDS = ("dataset", "horizon", "variant", "mse", "mae", "fusion_calls", "config_hash", "note")


@dataclass
class ReportRow:
    dataset: str
    horizon: int | str  # "avg" on average rows
    variant: str
    mse: float
    mae: float
    fusion_calls: int | str = ""
    config_hash: str = ""
    note: str = ""

    @property
    def skipped(self) -> bool:
        return self.mse != self.mse  # NaN metrics mark a cell that did not run


@dataclass
class RunReport:
    task: str
    config_hash: str
    seed: int
    rows: list[ReportRow] = field(default_factory=list)
    wall_time: float = 0.0
    notes: list[str] = field(default_factory=list)

    def add(self, row: ReportRow) -> None:
        self.rows.append(row)

    def skip(self, dataset: str, horizon, variant: str, reason: str) -> None:
        self.rows.append(ReportRow(dataset, horizon, variant, float("nan"), float("nan"), note=reason))

    def metric_rows(self) -> list[ReportRow]:
        return [r for r in self.rows if r.horizon != "avg" and not r.skipped]

    def with_averages(self) -> RunReport:
        """Append one average row per (dataset, variant), in first-seen order."""
        self.rows = [r for r in self.rows if r.horizon != "avg"]
        groups: dict[tuple, list[ReportRow]] = {}
        for r in self.metric_rows():
            groups.setdefault((r.dataset, r.variant), []).append(r)
        for (ds, var), rows in groups.items():
            self.rows.append(ReportRow(ds, "avg", var, float(np.mean([r.mse for r in rows])),
                                       float(np.mean([r.mae for r in rows])), rows[0].fusion_calls))
        return self

    def lookup(self, dataset: str, horizon, variant: str) -> ReportRow:
        for r in self.rows:
            if (r.dataset, r.horizon, r.variant) == (dataset, horizon, variant):
                return r
        raise KeyError((dataset, horizon, variant))

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(FIELDS)
            for r in self.rows:
                w.writerow([r.dataset, r.horizon, r.variant, _num(r.mse), _num(r.mae), r.fusion_calls,
                            r.config_hash, r.note])
        return path

    def to_table(self) -> str:
        header = ("dataset", "horizon", "variant", "MSE", "MAE", "fusion")
        body = [(r.dataset, str(r.horizon), r.variant, f"{r.mse:.4f}", f"{r.mae:.4f}", str(r.fusion_calls))
                if not r.skipped else (r.dataset, str(r.horizon), r.variant, "-", "-", r.note)
                for r in self.rows]
        widths = [max(len(x) for x in col) for col in zip(header, *body)]
        fmt = "  ".join(f"{{:<{w}}}" for w in widths)
        lines = [fmt.format(*header), fmt.format(*("-" * w for w in widths))]
        lines += [fmt.format(*row) for row in body]
        lines += [f"# {n}" for n in self.notes]
        return "\n".join(line.rstrip() for line in lines) + "\n"

    def write(self, directory, stem: str = "report") -> dict[str, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        csv_path = self.to_csv(directory / f"{stem}.csv")
        txt_path = directory / f"{stem}.txt"
        txt_path.write_text(self.to_table())
        meta = directory / f"{stem}.meta.json"
        meta.write_text(json.dumps({"task": self.task, "config_hash": self.config_hash, "seed": self.seed},
                                   sort_keys=True) + "\n")
        timing = directory / f"{stem}.time"
        timing.write_text(f"{self.wall_time:.3f}\n")
        return {"csv": csv_path, "table": txt_path, "meta": meta, "time": timing}


def _num(x: float) -> str:
    return "" if x != x else repr(float(x))  # repr round-trips float64 exactly


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
