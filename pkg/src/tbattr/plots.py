"""Static figure rendering for training logs, PR curves, and the ablation
table.  Uses the Agg backend so everything renders headless to files."""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import MalformedLog
from .evaluation import METRICS

LOG_COLUMNS = ("epoch", "loss_det", "loss_cls", "total", "val_acc", "val_f1", "val_map")


def read_log(path):
    """Parse a training CSV log into {column: list}; metric cells may be
    empty for epochs that skipped evaluation."""
    if not os.path.exists(path):
        raise MalformedLog(f"log not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedLog(f"{path}: empty log") from None
        if tuple(header) != LOG_COLUMNS:
            raise MalformedLog(f"{path}: unexpected header {header}")
        columns = {name: [] for name in LOG_COLUMNS}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(LOG_COLUMNS):
                raise MalformedLog(f"{path}:{lineno}: expected {len(LOG_COLUMNS)} cells")
            for name, cell in zip(LOG_COLUMNS, row):
                if cell == "" and name.startswith("val_"):
                    columns[name].append(None)
                    continue
                try:
                    columns[name].append(float(cell))
                except ValueError:
                    raise MalformedLog(f"{path}:{lineno}: bad {name} value {cell!r}") from None
    if not columns["epoch"]:
        raise MalformedLog(f"{path}: no epochs logged")
    return columns


def _metric_points(epochs, values):
    pts = [(e, v) for e, v in zip(epochs, values) if v is not None]
    return [p[0] for p in pts], [p[1] for p in pts]


def make_loss_figure(logs):
    """Loss curves for {stem: columns} logs; legend entries are the stems."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for stem, columns in logs.items():
        ax.plot(columns["epoch"], columns["total"], label=stem)
    ax.set_xlabel("epoch")
    ax.set_ylabel("total loss")
    ax.legend()
    fig.tight_layout()
    return fig


def make_metrics_figure(logs):
    """Validation metric curves; one line per (log, metric) pair."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for stem, columns in logs.items():
        for name in ("val_acc", "val_f1", "val_map"):
            xs, ys = _metric_points(columns["epoch"], columns[name])
            if xs:
                ax.plot(xs, ys, label=f"{stem}:{name}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation metric")
    ax.set_ylim(0, 1)
    if ax.get_legend_handles_labels()[0]:
        ax.legend(fontsize="small")
    fig.tight_layout()
    return fig


def make_pr_figure(precision, recall):
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.step(recall, precision, where="post")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    fig.tight_layout()
    return fig


def make_ablation_figure(table):
    """Grouped bars with std error bars, one group per table row."""
    labels, means, stds = [], [], []
    for label, _, flags, report in table.rows:
        marks = "".join("✓" if f else "✗" for f in flags)
        labels.append(f"{label}\n{marks}")
        means.append([getattr(report, name)[0] for name in METRICS])
        stds.append([getattr(report, name)[1] for name in METRICS])
    means = np.asarray(means)
    stds = np.asarray(stds)
    x = np.arange(len(labels))
    width = 0.25
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(labels)), 4))
    for m, name in enumerate(METRICS):
        ax.bar(x + (m - 1) * width, means[:, m], width, yerr=stds[:, m], label=name)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, fontsize="small")
    ax.set_ylabel("percent")
    ax.legend()
    fig.tight_layout()
    return fig


def save_figure(fig, path):
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def emit_plots(log_paths, out_dir, warn=None):
    """Render loss_curve.png and val_metrics.png from training logs.

    An empty log list renders nothing and reports a warning through `warn`.
    Returns the written paths.
    """
    if not log_paths:
        if warn is not None:
            warn("no logs given; nothing to plot")
        return []
    logs = {}
    for path in log_paths:
        stem = os.path.splitext(os.path.basename(path))[0]
        if stem in logs:  # disambiguate same-named logs from different dirs
            stem = os.path.basename(os.path.dirname(path)) + "/" + stem
        logs[stem] = read_log(path)
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for name, fig in (
        ("loss_curve.png", make_loss_figure(logs)),
        ("val_metrics.png", make_metrics_figure(logs)),
    ):
        written.append(save_figure(fig, os.path.join(out_dir, name)))
    return written
