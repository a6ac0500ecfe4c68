"""Encoder x explorer ablation grids.

Grid spec syntax: axes separated by ``;``, each axis ``key=v1,v2,...``; the
cells are the cartesian product of the axes. Several grids can be joined with
``+`` and their cells are concatenated (duplicates dropped)::

    encoder=gp,ws,gnn;explorer=none + encoder=gnn,gp;explorer=rs
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from caster.config import TrainConfig, parse_overrides
from caster.harness.adaptation import (adapt_batch, collect_heldout, efficiency_returns, overfitting_returns,
                                       support_width)
from caster.harness.reports import EvalReport, seed_stats, shared_test_tasks
from caster.harness.runs import CHECKPOINT_FILE, completed_run, train_run
from caster.io import load_checkpoint, write_csv
from caster.tasks import ConfigError

logger = logging.getLogger(__name__)


def parse_grid(spec: str) -> list[dict[str, str]]:
    """Cells of a grid spec as ordered ``{key: raw value}`` dicts."""
    cells: list[dict[str, str]] = []
    for part in spec.split("+"):
        axes = []
        for axis in filter(None, (a.strip() for a in part.split(";"))):
            if "=" not in axis:
                raise ConfigError(f"grid axis {axis!r} is not key=v1,v2")
            key, values = (x.strip() for x in axis.split("=", 1))
            vals = [v.strip() for v in values.split(",") if v.strip()]
            if not vals:
                raise ConfigError(f"grid axis {key!r} has no values")
            axes.append([(key, v) for v in vals])
        if not axes:
            continue
        keys = [a[0][0] for a in axes]
        if len(set(keys)) != len(keys):
            raise ConfigError(f"repeated key in grid part {part.strip()!r}")
        for combo in itertools.product(*axes):
            cell = dict(combo)
            parse_overrides(cell)  # validate keys and value types early
            if cell not in cells:
                cells.append(cell)
    if not cells:
        raise ConfigError("empty grid spec")
    return cells


def cell_name(cell: dict[str, str]) -> str:
    return "-".join(f"{k}={v}" for k, v in cell.items())


@dataclass
class CellSeed:
    cell: str
    seed: int
    status: str = "ok"
    on_policy: list[float] = field(default_factory=list)  # mean return per K
    off_policy: float = float("nan")
    on_policy_2: float = float("nan")  # on-policy side of the gap, 2 episodes
    support_width: float = float("nan")
    final_test_return: float = float("nan")
    run_dir: str = ""
    per_task: dict = field(default_factory=dict)


def evaluate_run(run_dir: Path, k_max: int, eval_seed: int, heldout_episodes: int = 10,
                 histogram_episodes: int = 3) -> dict:
    """On-policy curve, off-policy return, gap and explorer reward coverage of one trained run."""
    ckpt = load_checkpoint(run_dir / CHECKPOINT_FILE)
    model, tasks = ckpt.model(), shared_test_tasks([ckpt])
    curve = efficiency_returns(model, tasks, k_max, np.random.default_rng([eval_seed, 0]))
    rng = np.random.default_rng([eval_seed, 1])
    heldout = collect_heldout(model, tasks, heldout_episodes, rng)
    off, on = overfitting_returns(model, tasks, heldout, rng, episodes=2)
    traces = adapt_batch(model, tasks, histogram_episodes, np.random.default_rng([eval_seed, 2]))
    widths = [support_width(np.concatenate(t.explorer_rewards)) for t in traces]
    return {"curve": curve, "off": off, "on": on, "support_width": float(np.median(widths)),
            "tasks": [t.index for t in tasks]}


def run_ablation_grid(base: TrainConfig, cells: list[dict[str, str]], seeds: list[int], out_dir: str | Path,
                      k_max: int = 2, eval_seed: int = 0, reuse: bool = True,
                      plots: bool = False) -> tuple[EvalReport, list[CellSeed]]:
    """Train and evaluate every cell at every seed; failures are recorded, not raised.

    Each cell/seed run lives in ``out_dir/cells/<cell>-seed<s>-<config hash>``.
    With ``reuse``, a run directory whose checkpoint was trained from the same
    resolved config is evaluated without retraining.
    """
    out_dir = Path(out_dir)
    results: list[CellSeed] = []
    for cell in cells:
        name = cell_name(cell)
        for seed in seeds:
            record = CellSeed(name, seed)
            try:
                config = base.replace(**parse_overrides(cell), seed=seed)
                run_dir = out_dir / "cells" / f"{name}-seed{seed}-{config.hash()}"
                record.run_dir = str(run_dir)
                if reuse and completed_run(run_dir, config):
                    logger.info("reusing %s", run_dir)
                else:
                    logger.info("training %s seed %d", name, seed)
                    train_run(config, run_dir, plots=plots)
                ev = evaluate_run(run_dir, k_max, eval_seed)
                record.on_policy = ev["curve"].mean(axis=1).tolist()
                record.off_policy = float(ev["off"].mean())
                record.on_policy_2 = float(ev["on"].mean())
                record.support_width = ev["support_width"]
                record.per_task = {"tasks": ev["tasks"], "curve": ev["curve"].tolist(),
                                   "off": ev["off"].tolist(), "on": ev["on"].tolist()}
            except Exception as exc:  # one broken cell must not sink the grid
                logger.exception("cell %s seed %d failed", name, seed)
                record.status = f"error: {type(exc).__name__}: {exc}"
            results.append(record)
    return consolidate(cells, results, k_max, eval_seed), results


def consolidate(cells: list[dict[str, str]], results: list[CellSeed], k_max: int, eval_seed: int) -> EvalReport:
    rows = []
    for cell in cells:
        name = cell_name(cell)
        ok = [r for r in results if r.cell == name and r.status == "ok"]
        failed = [r for r in results if r.cell == name and r.status != "ok"]
        row: dict = {"cell": name, **cell, "n_seeds": len(ok), "failed_seeds": len(failed),
                     "status": "ok" if not failed else "; ".join(sorted({r.status for r in failed}))}
        for k in range(k_max + 1):
            s = seed_stats([r.on_policy[k] for r in ok]) if ok else {"mean": np.nan, "std": np.nan}
            row[f"on_K{k}_mean"], row[f"on_K{k}_std"] = s["mean"], s["std"]
        for key, attr in (("off_policy", "off_policy"), ("on_policy_2ep", "on_policy_2"),
                          ("support_width", "support_width")):
            s = seed_stats([getattr(r, attr) for r in ok]) if ok else {"mean": np.nan, "std": np.nan}
            row[f"{key}_mean"], row[f"{key}_std"] = s["mean"], s["std"]
        gaps = [r.off_policy - r.on_policy_2 for r in ok]
        s = seed_stats(gaps) if ok else {"mean": np.nan, "std": np.nan}
        row["gap_mean"], row["gap_std"] = s["mean"], s["std"]
        rows.append(row)
    seed_rows = []
    for r in results:
        row = {"cell": r.cell, "seed": r.seed, "status": r.status}
        for k in range(k_max + 1):
            row[f"on_K{k}"] = r.on_policy[k] if r.on_policy else np.nan
        row.update({"off_policy": r.off_policy, "on_policy_2ep": r.on_policy_2,
                    "gap": r.off_policy - r.on_policy_2, "support_width": r.support_width})
        seed_rows.append(row)
    return EvalReport("ablation", rows, seed_rows, {"k_max": k_max, "eval_seed": eval_seed,
                                                     "cells": [cell_name(c) for c in cells]})


def write_per_task(results: list[CellSeed], path: str | Path) -> Path:
    """Long table of per-task returns behind every cell/seed (for paired tests)."""
    rows = []
    for r in results:
        if r.status != "ok":
            continue
        for j, task in enumerate(r.per_task["tasks"]):
            row = {"cell": r.cell, "seed": r.seed, "task": task}
            for k, curve in enumerate(r.per_task["curve"]):
                row[f"on_K{k}"] = curve[j]
            row["off_policy"] = r.per_task["off"][j]
            row["on_policy_2ep"] = r.per_task["on"][j]
            rows.append(row)
    return write_csv(path, rows)
