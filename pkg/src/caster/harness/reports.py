"""Evaluation protocols over checkpoints and their CSV reports.

Every aggregate row carries ``n_seeds`` and the across-seed ``std``; a report
with fewer than ``MIN_SEEDS`` seeds in any row is non-conforming.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from caster.harness.adaptation import (adapt_batch, collect_heldout, efficiency_returns, overfitting_returns,
                                       reward_histogram, support_width)
from caster.io import Checkpoint, write_csv
from caster.tasks import ConfigError, TaskSpec

MIN_SEEDS = 3


@dataclass
class EvalReport:
    kind: str
    rows: list[dict]
    task_rows: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def n_seeds(self) -> int:
        return min((int(r["n_seeds"]) for r in self.rows if "n_seeds" in r), default=0)

    @property
    def conforming(self) -> bool:
        return self.n_seeds >= MIN_SEEDS

    def write(self, directory: str | Path, name: str = "report") -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = [write_csv(directory / f"{name}.csv", self.rows)]
        if self.task_rows:
            paths.append(write_csv(directory / f"{name}_tasks.csv", self.task_rows))
        meta = dict(self.metadata, kind=self.kind, n_seeds=self.n_seeds, conforming=self.conforming)
        meta_path = directory / f"{name}_meta.json"
        meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return paths + [meta_path]


def seed_stats(values) -> dict:
    """Mean, sample std (0 for one seed) and count of per-seed values."""
    values = np.asarray(values, dtype=np.float64)
    return {"mean": float(values.mean()),
            "std": float(values.std(ddof=1)) if values.size > 1 else 0.0,
            "n_seeds": int(values.size)}


def shared_test_tasks(checkpoints: list[Checkpoint]) -> list[TaskSpec]:
    """Held-out tasks common to all checkpoints; they must agree on the task distribution."""
    from caster.trainer import make_task_sets

    if not checkpoints:
        raise ConfigError("at least one checkpoint is required")
    keys = {(c.config.family, c.config.task_seed, c.config.num_train_tasks, c.config.num_test_tasks)
            for c in checkpoints}
    if len(keys) > 1:
        raise ConfigError("checkpoints were trained on different task distributions")
    return make_task_sets(checkpoints[0].config)[1]


def _eval_rng(eval_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([eval_seed, index])


def _metadata(checkpoints: list[Checkpoint], eval_seed: int, tasks: list[TaskSpec], **extra) -> dict:
    return {"eval_seed": eval_seed, "num_test_tasks": len(tasks),
            "config_hashes": [c.config.hash() for c in checkpoints],
            "train_seeds": [c.config.seed for c in checkpoints],
            "env_steps": [c.env_steps for c in checkpoints], **extra}


def efficiency_report(checkpoints: list[Checkpoint], k_max: int = 10, eval_seed: int = 0) -> EvalReport:
    """Final actor return against adaptation budget ``K = 0..k_max``."""
    tasks = shared_test_tasks(checkpoints)
    per_seed = np.stack([efficiency_returns(c.model(), tasks, k_max, _eval_rng(eval_seed, i))
                         for i, c in enumerate(checkpoints)])  # (seeds, K + 1, tasks)
    rows = []
    for k in range(k_max + 1):
        stats = seed_stats(per_seed[:, k].mean(axis=1))
        rows.append({"K": k, **stats, "task_std": float(per_seed[:, k].mean(axis=0).std()),
                     "n_tasks": len(tasks)})
    task_rows = []
    for j, task in enumerate(tasks):
        for k in range(k_max + 1):
            task_rows.append({"task": task.index, "K": k, **seed_stats(per_seed[:, k, j])})
    return EvalReport("efficiency", rows, task_rows, _metadata(checkpoints, eval_seed, tasks, k_max=k_max))


def overfit_report(checkpoints: list[Checkpoint], eval_seed: int = 0, episodes: int = 2,
                   heldout_episodes: int = 10) -> EvalReport:
    """Off-policy (held-out store) versus on-policy (fresh explorer) context, equal transition counts."""
    tasks = shared_test_tasks(checkpoints)
    off, on = [], []
    for i, c in enumerate(checkpoints):
        rng = _eval_rng(eval_seed, i)
        model = c.model()
        heldout = collect_heldout(model, tasks, heldout_episodes, rng)
        o, n = overfitting_returns(model, tasks, heldout, rng, episodes)
        off.append(o)
        on.append(n)
    off, on = np.array(off), np.array(on)
    gap = off - on
    rows = [{"context": name, **seed_stats(values.mean(axis=1)), "transitions": episodes * c.config.horizon,
             "n_tasks": len(tasks)}
            for name, values in (("off_policy", off), ("on_policy", on), ("gap", gap))]
    task_rows = []
    for j, task in enumerate(tasks):
        row = {"task": task.index}
        for name, values in (("off_policy", off), ("on_policy", on), ("gap", gap)):
            s = seed_stats(values[:, j])
            row.update({f"{name}_mean": s["mean"], f"{name}_std": s["std"]})
        row["n_seeds"] = len(checkpoints)
        task_rows.append(row)
    return EvalReport("overfit", rows, task_rows,
                      _metadata(checkpoints, eval_seed, tasks, episodes=episodes, heldout_episodes=heldout_episodes))


def histogram_report(checkpoints: list[Checkpoint], eval_seed: int = 0, episodes: int = 3,
                     bins: int = 10, num_tasks: int | None = None) -> EvalReport:
    """Per-episode reward histograms of the explorer's consecutive adaptation episodes."""
    tasks = shared_test_tasks(checkpoints)[:num_tasks]
    rows, task_rows = [], []
    widths = np.zeros((len(checkpoints), len(tasks), episodes))
    for i, c in enumerate(checkpoints):
        for j, trace in enumerate(adapt_batch(c.model(), tasks, episodes, _eval_rng(eval_seed, i))):
            edges, counts = reward_histogram(trace, bins)
            for e in range(episodes):
                widths[i, j, e] = support_width(trace.explorer_rewards[e])
                for b in range(len(edges) - 1):
                    task_rows.append({"seed": c.config.seed, "task": trace.task.index, "episode": e,
                                      "bin_lo": float(edges[b]), "bin_hi": float(edges[b + 1]),
                                      "count": int(counts[e, b])})
    for e in range(episodes):
        rows.append({"episode": e, **seed_stats(np.median(widths[:, :, e], axis=1)), "statistic": "support_width",
                     "n_tasks": len(tasks)})
    return EvalReport("histogram", rows, task_rows, _metadata(checkpoints, eval_seed, tasks, bins=bins))


REPORTS = {"efficiency": efficiency_report, "overfit": overfit_report, "histogram": histogram_report}
