"""Report emission: CSV summaries next to the JSON report, plus matplotlib
figures (F1 vs EBR line plot, confusion-matrix heatmap) rendered to files.
"""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .evaluation import MetricsReport


def write_summary_csv(report: MetricsReport, path) -> None:
    """Flat metric table, one row per scalar metric."""
    rows = [
        ("variant", report.variant),
        ("split", report.split),
        ("num_episodes", report.num_episodes),
        ("ap_mean", report.ap_mean),
        ("ap_std", report.ap_std),
        ("ap_undefined_count", report.ap_undefined_count),
        ("acc_mean", report.acc_mean),
        ("acc_std", report.acc_std),
        ("f1_macro", report.f1_macro),
    ]
    if report.ap_stage1_mean is not None:
        rows.append(("ap_stage1_mean", report.ap_stage1_mean))
        rows.append(("ap_stage1_std", report.ap_stage1_std))
    for db, f1 in sorted(report.ebr_f1.items(), key=lambda kv: float(kv[0])):
        rows.append((f"f1_ebr_{db}db", "" if f1 is None else f1))
    for cls, f1 in sorted(report.f1_per_class.items()):
        rows.append((f"f1_class_{cls}", f1))
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "value"])
        writer.writerows(rows)


def plot_f1_vs_ebr(reports: list[MetricsReport], path) -> None:
    """F1 as a function of event-to-background ratio, one line per model."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for report in reports:
        items = sorted(((float(db), f1) for db, f1 in report.ebr_f1.items()), key=lambda kv: kv[0])
        xs = [db for db, f1 in items if f1 is not None]
        ys = [f1 for _, f1 in items if f1 is not None]
        ax.plot(xs, ys, marker="o", label=report.variant)
    ax.set_xlabel("EBR (dB)")
    ax.set_ylabel("F1")
    ax.set_ylim(-0.02, 1.02)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_confusion(report: MetricsReport, path) -> None:
    """Heatmap of the aggregated confusion matrix (class slots + no-event)."""
    m = np.asarray(report.confusion, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(m, cmap="viridis")
    n = m.shape[0] - 1
    ticks = [f"c{i + 1}" for i in range(n)] + ["no event"]
    ax.set_xticks(range(n + 1), ticks, rotation=45, ha="right")
    ax.set_yticks(range(n + 1), ticks)
    ax.set_xlabel("predicted")
    ax.set_ylabel("ground truth")
    ax.set_title(report.variant)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_report(report: MetricsReport, out_dir) -> list[Path]:
    """Write the CSV summary and both figures; returns created paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    created = []
    csv_path = out / "metrics.csv"
    write_summary_csv(report, csv_path)
    created.append(csv_path)
    ebr_path = out / "f1_vs_ebr.png"
    plot_f1_vs_ebr([report], ebr_path)
    created.append(ebr_path)
    cm_path = out / "confusion_matrix.png"
    plot_confusion(report, cm_path)
    created.append(cm_path)
    return created
