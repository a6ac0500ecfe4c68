"""One training run written to a run directory.

Layout::

    config-resolved   every key with defaults filled in
    metrics.csv       one row per evaluation (columns: trainer.METRIC_COLUMNS)
    checkpoint        final parameters (plus checkpoint-<env_steps> if configured)
    report.csv        adaptation curve of the final model on the held-out tasks
    *.png             figures rendered from the CSVs
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

from caster.config import TrainConfig
from caster.harness.reports import EvalReport, efficiency_report
from caster.io import CsvWriter, load_checkpoint, save_checkpoint
from caster.trainer import METRIC_COLUMNS, TrainingAborted, meta_train

logger = logging.getLogger(__name__)

CONFIG_FILE = "config-resolved"
CHECKPOINT_FILE = "checkpoint"


def completed_run(run_dir: str | Path, config: TrainConfig) -> bool:
    """True when ``run_dir`` holds a final checkpoint trained from exactly ``config``."""
    path = Path(run_dir) / CHECKPOINT_FILE
    if not path.exists():
        return False
    try:
        ckpt = load_checkpoint(path)
    except Exception:  # unreadable leftovers are simply retrained
        return False
    return ckpt.config.hash() == config.hash()


def train_run(config: TrainConfig, run_dir: str | Path, plots: bool = True) -> EvalReport:
    """Train, checkpoint and evaluate one seed; returns the single-seed report.

    Raises:
        TrainingAborted: after writing ``abort-snapshot.json`` to the run dir.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / CONFIG_FILE).write_text(config.to_text())

    def checkpoint(state):
        save_checkpoint(run_dir / f"{CHECKPOINT_FILE}-{state.env_steps}", state)

    with CsvWriter(run_dir / "metrics.csv", METRIC_COLUMNS) as metrics:
        try:
            state, _ = meta_train(config, on_row=metrics.write, on_checkpoint=checkpoint)
        except TrainingAborted as exc:
            (run_dir / "abort-snapshot.json").write_text(json.dumps(exc.snapshot, indent=2, default=str) + "\n")
            raise
    save_checkpoint(run_dir / CHECKPOINT_FILE, state)
    report = efficiency_report([load_checkpoint(run_dir / CHECKPOINT_FILE)], k_max=config.eval_episodes,
                               eval_seed=config.seed)
    report.write(run_dir)
    if plots:
        from caster.plotting import render_csv

        for name in ("metrics.csv", "report.csv"):
            render_csv(run_dir / name)
    logger.info("run written to %s", run_dir)
    return report
