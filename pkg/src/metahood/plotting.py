"""Figure rendering for the report command (files only, no display)."""

from __future__ import annotations

import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def bar_chart(path: str | os.PathLike, labels: Sequence[str], values: Sequence[float], *, title: str,
              ylabel: str, log_scale: bool = False) -> None:
    fig, ax = plt.subplots(figsize=(max(4.0, 0.7 * len(labels) + 2), 3.6), constrained_layout=True)
    try:
        ax.bar(range(len(labels)), values, color="#4c72b0")
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=30 if len(labels) > 5 else 0, ha="right" if len(labels) > 5 else "center")
        ax.set_title(title)
        ax.set_ylabel(ylabel)
        if log_scale and any(v > 0 for v in values):
            ax.set_yscale("log")
        ax.grid(axis="y", alpha=0.3)
        fig.savefig(path, dpi=100)
    finally:
        plt.close(fig)


def grouped_bars(path: str | os.PathLike, groups: Sequence[str], series: dict[str, Sequence[float]], *,
                 title: str, ylabel: str) -> None:
    """One cluster per group, one bar per series inside it."""
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(groups) + 2), 3.6), constrained_layout=True)
    try:
        n = max(1, len(series))
        width = 0.8 / n
        for k, (name, vals) in enumerate(series.items()):
            xs = [i + (k - (n - 1) / 2) * width for i in range(len(groups))]
            ax.bar(xs, vals, width=width, label=name)
        ax.set_xticks(range(len(groups)))
        ax.set_xticklabels(groups)
        ax.set_title(title)
        ax.set_ylabel(ylabel)
        if series:
            ax.legend(fontsize="small")
        ax.grid(axis="y", alpha=0.3)
        fig.savefig(path, dpi=100)
    finally:
        plt.close(fig)
