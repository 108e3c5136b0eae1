"""Figures for report summaries, written as PNG next to the CSVs."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import METRIC_NAMES  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.2),
    "figure.dpi": 120,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "savefig.bbox": "tight",
}

LABELS = {"auc": "AUC", "hr5": "HR@5", "hr10": "HR@10", "ndcg5": "NDCG@5", "ndcg10": "NDCG@10"}


def _setting_value(setting: str) -> str:
    return setting.split("=", 1)[1] if "=" in setting else setting


def plot_conditions(summary: Sequence[dict], path, metric: str = "hr5", title: str | None = None) -> Path:
    """Bar chart of one metric per condition, error bars = sample std over seeds."""
    if metric not in METRIC_NAMES:
        raise ValueError(f"unknown metric {metric!r}")
    path = Path(path)
    labels = [r["condition"] + (f"\n{r['setting']}" if r["setting"] else "") for r in summary]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.bar(range(len(summary)), [r[f"{metric}_mean"] for r in summary],
               yerr=[r[f"{metric}_std"] for r in summary], color="0.55", capsize=3)
        ax.set_xticks(range(len(summary)), labels, rotation=30, ha="right")
        ax.set_ylabel(LABELS[metric])
        lo = min(r[f"{metric}_mean"] - r[f"{metric}_std"] for r in summary)
        hi = max(r[f"{metric}_mean"] + r[f"{metric}_std"] for r in summary)
        pad = max(hi - lo, 1e-3) * 0.5
        ax.set_ylim(max(0.0, lo - pad), min(1.0, hi + pad))
        if title:
            ax.set_title(title)
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_sweep(summary: Sequence[dict], axis: str, path, metric: str = "ndcg5") -> Path:
    """One line per condition across the sweep settings, in the order given."""
    if metric not in METRIC_NAMES:
        raise ValueError(f"unknown metric {metric!r}")
    path = Path(path)
    settings = list(dict.fromkeys(r["setting"] for r in summary))
    conditions = list(dict.fromkeys(r["condition"] for r in summary))
    lookup = {(r["condition"], r["setting"]): r for r in summary}
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for cond in conditions:
            xs, ys, es = [], [], []
            for i, s in enumerate(settings):
                row = lookup.get((cond, s))
                if row is not None:
                    xs.append(i)
                    ys.append(row[f"{metric}_mean"])
                    es.append(row[f"{metric}_std"])
            ax.errorbar(xs, ys, yerr=es, marker="o", ms=4, capsize=3, label=cond)
        ax.set_xticks(range(len(settings)), [_setting_value(s) for s in settings])
        ax.set_xlabel(axis)
        ax.set_ylabel(LABELS[metric])
        ax.legend()
        fig.savefig(path)
        plt.close(fig)
    return path


def render_report(summary: Sequence[dict], out_dir, name: str = "report", sweep_axis: str | None = None,
                  metrics: Sequence[str] = ("hr5", "ndcg5")) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for m in metrics:
        if sweep_axis:
            paths.append(plot_sweep(summary, sweep_axis, out_dir / f"{name}_sweep_{m}.png", m))
        else:
            paths.append(plot_conditions(summary, out_dir / f"{name}_{m}.png", m))
    return paths
