"""Report emission: metrics JSON, delimited tables, and static figures.

Figures are written with matplotlib's non-interactive backend next to the
CSV files they are drawn from, so every plotted number is also available
as text.
"""

from __future__ import annotations

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import MetricReport  # noqa: E402

SUMMARY_KEYS = ("B1", "B2", "B3", "B4", "METEOR", "ROUGE_L", "CIDEr_D", "F1", "IoU",
                "type_accuracy")
LOG_FIELDS = ("epoch", "L_c", "L_d", "L_a", "lambda_c", "lambda_d", "lr", "lr_slow", "steps",
              "grad_norm")


def write_csv(path, rows, fields):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in fields})


def read_log(path):
    """Epoch records from a JSON-lines training log."""
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def plot_losses(log, path):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    epochs = [r["epoch"] for r in log]
    for key, label in (("L_c", "caption"), ("L_d", "detection"), ("L_a", "alignment")):
        ys = [r.get(key) for r in log]
        if any(y is not None for y in ys):
            ax.plot(epochs, [float("nan") if y is None else y for y in ys], marker=".", label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_lambdas(log, path):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    epochs = [r["epoch"] for r in log]
    ax.plot(epochs, [r["lambda_c"] for r in log], marker=".", label="caption weight")
    ax.plot(epochs, [r["lambda_d"] for r in log], marker=".", label="detection weight")
    ax.axhline(1.0, color="grey", lw=0.8, ls=":")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss weight")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_metrics(summary: dict, path):
    keys = [k for k in SUMMARY_KEYS if k in summary]
    fig, ax = plt.subplots(figsize=(7, 3.5))
    vals = [summary[k] for k in keys]
    bars = ax.bar(keys, vals, color="#4477aa")
    for b, v in zip(bars, vals):
        ax.text(b.get_x() + b.get_width() / 2, v, f"{v:.3f}", ha="center", va="bottom", fontsize=7)
    ax.set_ylabel("score")
    ax.tick_params(axis="x", labelrotation=45)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def write_training_report(log, out_dir, formats=("svg", "png")):
    """log.csv plus loss and loss-weight curves; returns written paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = [os.path.join(out_dir, "log.csv")]
    write_csv(paths[0], log, LOG_FIELDS)
    if log:
        for fmt in formats:
            for name, fn in (("losses", plot_losses), ("loss_weights", plot_lambdas)):
                p = os.path.join(out_dir, f"{name}.{fmt}")
                fn(log, p)
                paths.append(p)
    return paths


def write_eval_report(report: MetricReport, out_dir, meta: dict, plots=False,
                      formats=("svg", "png")):
    """report.json (metrics, parameters, per-sample rows, ``meta``) plus CSVs
    and, optionally, a metric bar chart.  Returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    summary = report.summary()
    doc = {"metrics": {k: summary.get(k) for k in SUMMARY_KEYS},
           "metric_params": report.params,
           "per_sample": report.per_sample}
    doc.update(meta)
    paths = [os.path.join(out_dir, "report.json"), os.path.join(out_dir, "metrics.csv"),
             os.path.join(out_dir, "per_sample.csv")]
    with open(paths[0], "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    write_csv(paths[1], [{"metric": k, "value": summary[k]} for k in SUMMARY_KEYS if k in summary],
              ("metric", "value"))
    fields = ("id", "change_type", "caption", "type_correct", "F1", "IoU", "CIDEr_D", "B4")
    write_csv(paths[2], report.per_sample, fields)
    if plots:
        for fmt in formats:
            p = os.path.join(out_dir, f"metrics.{fmt}")
            plot_metrics(summary, p)
            paths.append(p)
    return paths
