"""Rendering of metric reports: aligned text tables, delimited CSV, and
matplotlib figures written next to the primary JSON outputs."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import REGIONS, MetricsReport  # noqa: E402

# Table column layout mirrors the per-region comparison tables:
# method | DSC ET | DSC WT | DSC TC | HD95 ET | HD95 WT | HD95 TC
_TABLE_REGIONS = ("ET", "WT", "TC")


def metrics_table(rows: dict) -> str:
    """Aligned table from {method: {region: {"dsc","hd95"}}}."""
    header = ["Method"] + [f"DSC {r}" for r in _TABLE_REGIONS] + \
        [f"HD95 {r}" for r in _TABLE_REGIONS]
    lines = [header]
    for method, scores in rows.items():
        line = [method]
        line += [f"{scores[r]['dsc']:.3f}" for r in _TABLE_REGIONS]
        line += [f"{scores[r]['hd95']:.2f}" for r in _TABLE_REGIONS]
        lines.append(line)
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    out = []
    for k, row in enumerate(lines):
        out.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if k == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out) + "\n"


def report_rows(report: MetricsReport, method: str) -> dict:
    agg = report.aggregates()
    return {method: {r: {"dsc": agg[r]["dsc_mean"], "hd95": agg[r]["hd95_mean"]}
                     for r in REGIONS}}


def write_report_files(report: MetricsReport, json_path, method: str = "model") -> list:
    """Write report.json plus .txt table, .csv records, and a .png figure
    sharing the JSON path's stem. Returns the written paths."""
    json_path = Path(json_path)
    stem = json_path.with_suffix("")
    paths = [json_path]
    json_path.write_text(report.to_json() + "\n")

    txt = Path(f"{stem}.txt")
    txt.write_text(metrics_table(report_rows(report, method)))
    paths.append(txt)

    csv_path = Path(f"{stem}.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "region", "dsc", "hd95"])
        for rec in report.records:
            writer.writerow([rec["sample_id"], rec["region"],
                             f"{rec['dsc']:.6f}", f"{rec['hd95']:.6f}"])
    paths.append(csv_path)

    png = Path(f"{stem}.png")
    metrics_figure(report, png)
    paths.append(png)
    return paths


def metrics_figure(report: MetricsReport, path) -> None:
    agg = report.aggregates()
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    x = np.arange(len(REGIONS))
    axes[0].bar(x, [agg[r]["dsc_mean"] for r in REGIONS], color="#4878d0")
    axes[0].set_xticks(x, REGIONS)
    axes[0].set_ylim(0, 1)
    axes[0].set_title("Mean DSC")
    axes[1].bar(x, [agg[r]["hd95_mean"] for r in REGIONS], color="#d65f5f")
    axes[1].set_xticks(x, REGIONS)
    axes[1].set_title("Mean HD95 (px)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def training_curves(history, path) -> None:
    epochs = [rec["epoch"] for rec in history.epochs]
    losses = [rec["train_loss"] for rec in history.epochs]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    axes[0].plot(epochs, losses, marker="o", ms=3)
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("train loss")
    axes[0].set_title("Training loss")
    for region in REGIONS:
        pts = [(rec["epoch"], rec["val_dsc"][region])
               for rec in history.epochs if rec["val_dsc"] is not None]
        if pts:
            xs, ys = zip(*pts)
            axes[1].plot(xs, ys, marker="o", ms=3, label=region)
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("val DSC")
    axes[1].set_ylim(0, 1)
    axes[1].set_title("Validation DSC")
    if axes[1].lines:
        axes[1].legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def ablation_table(result) -> str:
    return metrics_table(result.rows)


def write_ablation_files(result, histories, out_dir) -> list:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    jp = out_dir / "ablation.json"
    jp.write_text(result.to_json() + "\n")
    paths.append(jp)

    tp = out_dir / "ablation.txt"
    counts = "\n".join(f"{v}: {n} parameters" for v, n in result.param_counts.items())
    tp.write_text(ablation_table(result) + "\n" + counts + "\n")
    paths.append(tp)

    cp = out_dir / "ablation.csv"
    with open(cp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "region", "dsc", "hd95", "param_count"])
        for variant, scores in result.rows.items():
            for region in REGIONS:
                writer.writerow([variant, region,
                                 f"{scores[region]['dsc']:.6f}",
                                 f"{scores[region]['hd95']:.6f}",
                                 result.param_counts[variant]])
    paths.append(cp)

    pp = out_dir / "ablation.png"
    ablation_figure(result, pp)
    paths.append(pp)

    for variant, history in histories.items():
        hp = out_dir / f"history_{variant}.json"
        hp.write_text(history.to_json() + "\n")
        paths.append(hp)
    return paths


def ablation_figure(result, path) -> None:
    variants = list(result.rows)
    x = np.arange(len(REGIONS))
    width = 0.8 / len(variants)
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    for i, variant in enumerate(variants):
        scores = result.rows[variant]
        axes[0].bar(x + i * width, [scores[r]["dsc"] for r in REGIONS],
                    width, label=variant)
        axes[1].bar(x + i * width, [scores[r]["hd95"] for r in REGIONS],
                    width, label=variant)
    for ax, title in zip(axes, ("Mean DSC", "Mean HD95 (px)")):
        ax.set_xticks(x + width * (len(variants) - 1) / 2, REGIONS)
        ax.set_title(title)
    axes[0].set_ylim(0, 1)
    axes[0].legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def prediction_figure(image, probs, hard, gt_stack, path) -> None:
    """Panel of the first image channel, probability maps, and contours of
    predicted (solid) vs ground-truth (dashed) masks when provided."""
    ncols = 1 + len(REGIONS)
    fig, axes = plt.subplots(1, ncols, figsize=(3.2 * ncols, 3.2))
    axes[0].imshow(image[:, :, 0], cmap="gray", vmin=0, vmax=1)
    axes[0].set_title("input (ch 0)")
    for c, region in enumerate(REGIONS):
        ax = axes[1 + c]
        ax.imshow(probs[:, :, c], cmap="magma", vmin=0, vmax=1)
        if hard[:, :, c].any():
            ax.contour(hard[:, :, c], levels=[0.5], colors="cyan", linewidths=1.0)
        if gt_stack is not None and gt_stack[:, :, c].any():
            ax.contour(gt_stack[:, :, c], levels=[0.5], colors="white",
                       linewidths=1.0, linestyles="dashed")
        ax.set_title(region)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
