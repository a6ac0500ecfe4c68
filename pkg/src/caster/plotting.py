"""Render report CSVs to PNG files next to them.

CSV files are the contract; figures are a convenience. The figure layout is
chosen from the CSV's columns.
"""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from caster.io import read_csv  # noqa: E402


def _floats(rows, key):
    return np.array([float(r[key]) if r.get(key, "") not in ("", "nan") else np.nan for r in rows])


def _metrics(ax_rows, rows):
    ax, ax2 = ax_rows
    x = _floats(rows, "env_steps")
    mean, std = _floats(rows, "test_return"), _floats(rows, "test_return_std")
    ax.plot(x, mean, label="after adaptation")
    ax.fill_between(x, mean - std, mean + std, alpha=0.2)
    ax.plot(x, _floats(rows, "zero_shot_return"), label="zero-shot", linestyle="--")
    ax.set_ylabel("test return")
    ax.legend()
    for key in ("e_loss", "m_loss", "kl", "shaped_reward"):
        ax2.plot(x, _floats(rows, key), label=key)
    ax2.set_yscale("symlog", linthresh=1e-3)
    ax2.set_xlabel("environment steps")
    ax2.legend()


def _curve(ax, rows):
    k, mean, std = _floats(rows, "K"), _floats(rows, "mean"), _floats(rows, "std")
    ax.errorbar(k, mean, yerr=std, marker="o", capsize=3)
    ax.set_xlabel("adaptation episodes K")
    ax.set_ylabel("final return")


def _bars(ax, rows, label_key):
    labels = [r[label_key] for r in rows]
    ax.bar(labels, _floats(rows, "mean"), yerr=_floats(rows, "std"), capsize=3)
    ax.set_ylabel("mean")


def _histograms(ax, rows):
    first = (rows[0]["seed"], rows[0]["task"])
    by_episode = defaultdict(list)
    for r in rows:
        if (r["seed"], r["task"]) == first:
            by_episode[r["episode"]].append(r)
    for episode, bins in sorted(by_episode.items()):
        lo, hi, counts = _floats(bins, "bin_lo"), _floats(bins, "bin_hi"), _floats(bins, "count")
        ax.stairs(counts, np.append(lo, hi[-1]), label=f"episode {episode}")
    ax.set_xlabel("reward")
    ax.set_ylabel("count")
    ax.set_title(f"seed {first[0]}, task {first[1]}")
    ax.legend()


def _ablation(ax, rows):
    ks = sorted(int(c[len("on_K"):-len("_mean")]) for c in rows[0] if c.startswith("on_K") and c.endswith("_mean"))
    for r in rows:
        mean = np.array([float(r[f"on_K{k}_mean"] or "nan") for k in ks])
        std = np.array([float(r[f"on_K{k}_std"] or "nan") for k in ks])
        ax.errorbar(ks, mean, yerr=std, marker="o", capsize=3, label=r["cell"])
    ax.set_xlabel("adaptation episodes K")
    ax.set_ylabel("on-policy final return")
    ax.legend(fontsize="small")


def render_csv(path: str | Path, out: str | Path | None = None) -> Path:
    """Render ``path`` to ``out`` (default: same name with ``.png``)."""
    path = Path(path)
    out = path.with_suffix(".png") if out is None else Path(out)
    rows = read_csv(path)
    if not rows:
        raise ValueError(f"{path} has no data rows")
    cols = set(rows[0])
    if {"env_steps", "test_return"} <= cols:
        fig, axes = plt.subplots(2, 1, figsize=(7, 7), sharex=True)
        _metrics(axes, rows)
    else:
        fig, ax = plt.subplots(figsize=(7, 4.5))
        if "cell" in cols and any(c.startswith("on_K") for c in cols):
            _ablation(ax, rows)
        elif {"bin_lo", "bin_hi", "count"} <= cols:
            _histograms(ax, rows)
        elif {"K", "mean", "std"} <= cols and "task" not in cols:
            _curve(ax, rows)
        elif {"context", "mean"} <= cols:
            _bars(ax, rows, "context")
        elif {"episode", "mean"} <= cols:
            _bars(ax, rows, "episode")
            ax.set_xlabel("explorer episode")
        else:
            numeric = [c for c in rows[0] if all(_is_number(r[c]) for r in rows)]
            if len(numeric) < 2:
                plt.close(fig)
                raise ValueError(f"{path}: nothing numeric to plot")
            x = _floats(rows, numeric[0])
            for c in numeric[1:]:
                ax.plot(x, _floats(rows, c), label=c)
            ax.set_xlabel(numeric[0])
            ax.legend()
    fig.suptitle(path.name)
    fig.tight_layout()
    fig.savefig(out, dpi=100)
    plt.close(fig)
    return out


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True
