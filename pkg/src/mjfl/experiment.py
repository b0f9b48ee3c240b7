"""Experiment orchestration and CSV output.

A run writes three files into its output directory:

* ``trace.csv``: one row per completed (job, round), ordered by simulated
  completion time and then job.
* ``summary.csv``: one row per job.
* ``resolved_config.yaml``: the fully resolved configuration, enough to
  replay the run exactly.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from . import engine
from .config import ExperimentConfig, dump_config, load_config
from .engine import SimulationTrace

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ("job", "round", "sim_time_min", "time_cost", "fairness_cost", "combined_cost",
                 "total_cost", "loss", "devices")
SUMMARY_COLUMNS = ("job", "rounds", "total_time_min", "final_loss", "mean_fairness",
                   "target_loss", "time_to_target_min")
COMPARE_COLUMNS = ("scheduler", "seed", "job", "time_to_target_min", "final_loss", "mean_total_cost")
NOT_REACHED = "/"

TRACE_FILE, SUMMARY_FILE, CONFIG_FILE = "trace.csv", "summary.csv", "resolved_config.yaml"


@dataclass(frozen=True)
class TraceRow:
    job: int
    round: int
    sim_time_min: float
    time_cost: float
    fairness_cost: float
    combined_cost: float
    total_cost: float
    loss: float
    devices: tuple[int, ...]

    def to_csv(self) -> list[str]:
        return [str(self.job), str(self.round), *(_fmt(getattr(self, c)) for c in TRACE_COLUMNS[2:8]),
                ";".join(str(k) for k in self.devices)]

    @classmethod
    def from_csv(cls, row: dict[str, str]) -> TraceRow:
        return cls(
            int(row["job"]), int(row["round"]),
            *(float(row[c]) for c in TRACE_COLUMNS[2:8]),
            tuple(int(k) for k in row["devices"].split(";") if k),
        )


def _fmt(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError(f"refusing to write non-finite value {x}")
    return repr(float(x))


def trace_rows(trace: SimulationTrace) -> list[TraceRow]:
    records = sorted(trace.records, key=lambda r: (r.end_time, r.job, r.round))
    return [
        TraceRow(r.job, r.round, r.end_time, r.time_cost, r.fairness_cost, r.combined_cost,
                 r.total_cost, r.loss, r.devices)
        for r in records
    ]


def write_trace(rows: Iterable[TraceRow], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for row in rows:
            w.writerow(row.to_csv())


def read_trace(path: str | Path) -> list[TraceRow]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TRACE_COLUMNS:
            raise ValueError(f"{path}: unexpected trace header {reader.fieldnames}")
        return [TraceRow.from_csv(row) for row in reader]


def time_to_target(rows: Sequence[TraceRow], job: int, target: float) -> float | None:
    """Simulated completion time of the job's first round with loss at or below ``target``."""
    for row in rows:
        if row.job == job and row.loss <= target:
            return row.sim_time_min
    return None


def summarize(rows: Sequence[TraceRow], config: ExperimentConfig) -> list[dict]:
    out = []
    for spec in config.jobs:
        mine = [r for r in rows if r.job == spec.job]
        reached = time_to_target(rows, spec.job, spec.target_loss)
        out.append({
            "job": spec.job,
            "rounds": len(mine),
            "total_time_min": sum(r.time_cost for r in mine),
            "final_loss": mine[-1].loss if mine else math.nan,
            "mean_fairness": sum(r.fairness_cost for r in mine) / len(mine) if mine else math.nan,
            "target_loss": spec.target_loss,
            "time_to_target_min": NOT_REACHED if reached is None else reached,
        })
    return out


def _write_table(rows: Sequence[dict], columns: Sequence[str], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) if isinstance(v, float) else str(v) for v in (row[c] for c in columns)])


def run_experiment(config: ExperimentConfig, out_dir: str | Path | None = None,
                   scheduler=None) -> SimulationTrace:
    """Simulate ``config`` and write its trace, summary and resolved config."""
    out = Path(out_dir if out_dir is not None else config.output)
    out.mkdir(parents=True, exist_ok=True)
    logger.info("running %s seed %d into %s", config.scheduler.name, config.seed, out)
    trace = engine.run(config, scheduler)
    rows = trace_rows(trace)
    write_trace(rows, out / TRACE_FILE)
    _write_table(summarize(rows, config), SUMMARY_COLUMNS, out / SUMMARY_FILE)
    (out / CONFIG_FILE).write_text(dump_config(config))
    return trace


def _job_key(config: ExperimentConfig) -> list[tuple]:
    return [(j.local_epochs, j.participation, j.target_loss, tuple(j.curve), j.max_rounds)
            for j in config.jobs]


def compare(dirs: Sequence[str | Path]) -> list[dict]:
    """Per run and job: time to target (``"/"`` if never reached), final loss, mean total cost."""
    if len(dirs) < 2:
        raise ValueError("compare needs at least two experiment outputs")
    table, reference = [], None
    for d in dirs:
        d = Path(d)
        config = load_config(d / CONFIG_FILE)
        if reference is None:
            reference = (d, _job_key(config))
        elif _job_key(config) != reference[1]:
            raise ValueError(f"job specs in {d} differ from those in {reference[0]}")
        rows = read_trace(d / TRACE_FILE)
        for spec in config.jobs:
            mine = [r for r in rows if r.job == spec.job]
            reached = time_to_target(rows, spec.job, spec.target_loss)
            table.append({
                "scheduler": config.scheduler.name,
                "seed": config.seed,
                "job": spec.job,
                "time_to_target_min": NOT_REACHED if reached is None else reached,
                "final_loss": mine[-1].loss if mine else math.nan,
                "mean_total_cost": sum(r.total_cost for r in mine) / len(mine) if mine else math.nan,
            })
    return table


def write_comparison(table: Sequence[dict], path: str | Path) -> None:
    _write_table(table, COMPARE_COLUMNS, path)


def format_comparison(table: Sequence[dict]) -> str:
    """Plain-text rendering of a comparison table."""
    cells = [list(COMPARE_COLUMNS)] + [
        [f"{v:.4g}" if isinstance(v, float) else str(v) for v in (row[c] for c in COMPARE_COLUMNS)]
        for row in table
    ]
    widths = [max(len(r[i]) for r in cells) for i in range(len(COMPARE_COLUMNS))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells)


def tournament(config: ExperimentConfig, schedulers: Sequence[str], seeds: Sequence[int],
               out_dir: str | Path) -> list[dict]:
    """Run every scheduler on every seed under ``out_dir/<scheduler>/seed_<n>``.

    Writes ``out_dir/comparison.csv`` and returns its rows.
    """
    out = Path(out_dir)
    dirs = []
    for name in schedulers:
        for seed in seeds:
            run_dir = out / name / f"seed_{seed}"
            run_experiment(config.with_overrides(scheduler=name, seed=seed, output=str(run_dir)), run_dir)
            dirs.append(run_dir)
    table = compare(dirs)
    write_comparison(table, out / "comparison.csv")
    return table
