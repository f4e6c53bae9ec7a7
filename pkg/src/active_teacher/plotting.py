"""Figures for simulation outputs, rendered to PNG files.

matplotlib is imported lazily with the non-interactive Agg backend, so the
rest of the package works without it.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import numpy as np

FIGURE_NAMES = ("final_ap.png", "loss_curves.png", "labeled_objects.png")


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _by_strategy(rows: Sequence[dict], key: str) -> dict[str, np.ndarray]:
    groups: dict[str, list[float]] = defaultdict(list)
    for row in rows:
        groups[row["strategy"]].append(float(row[key]))
    return {s: np.asarray(v) for s, v in groups.items()}


def _bar(ax, groups: dict[str, np.ndarray], ylabel: str):
    names = list(groups)
    means = [groups[n].mean() for n in names]
    errs = [groups[n].std(ddof=1) if len(groups[n]) > 1 else 0.0 for n in names]
    ax.bar(names, means, yerr=errs, capsize=4, color="tab:blue", alpha=0.8)
    for i, n in enumerate(names):
        ax.scatter(np.full(len(groups[n]), i), groups[n], color="k", s=10, zorder=3)
    ax.set_ylabel(ylabel)
    ax.tick_params(axis="x", rotation=20)


def read_history(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def render_figures(run_dir, summary_rows: Sequence[dict], out_dir=None) -> list[Path]:
    """Write the standard figures for a simulation directory; returns their paths.

    Args:
        run_dir: Directory holding ``<strategy>/seed<k>/history.csv`` files.
        summary_rows: Parsed summary rows (see ``experiment.read_summary``).
        out_dir: Where to put the PNGs; defaults to ``run_dir / "figures"``.
    """
    plt = _pyplot()
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir is not None else run_dir / "figures"
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    fig, ax = plt.subplots(figsize=(6, 4))
    _bar(ax, _by_strategy(summary_rows, "final_ap"), "final AP@[.5:.95]")
    ax.set_title("Final teacher AP by strategy (dots: seeds)")
    fig.tight_layout()
    written.append(out_dir / FIGURE_NAMES[0])
    fig.savefig(written[-1], dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(7, 4))
    for row in summary_rows:
        path = run_dir / row["strategy"] / f"seed{row['seed']}" / "history.csv"
        if not path.is_file():
            continue
        hist = read_history(path)
        last = max(int(h["round"]) for h in hist)
        hist = [h for h in hist if int(h["round"]) == last]
        steps = np.array([int(h["step"]) for h in hist])
        loss = np.array([float(h["loss_total"]) for h in hist])
        ax.plot(steps, loss, lw=0.8, label=f"{row['strategy']} s{row['seed']}")
    ax.set_xlabel("step (final round)")
    ax.set_ylabel("total loss")
    ax.set_yscale("log")
    if len(summary_rows) <= 12:
        ax.legend(fontsize=7)
    fig.tight_layout()
    written.append(out_dir / FIGURE_NAMES[1])
    fig.savefig(written[-1], dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    _bar(ax, _by_strategy(summary_rows, "labeled_objects"), "labeled objects")
    ax.set_title("Annotated objects at equal image budget")
    fig.tight_layout()
    written.append(out_dir / FIGURE_NAMES[2])
    fig.savefig(written[-1], dpi=120)
    plt.close(fig)
    return written
