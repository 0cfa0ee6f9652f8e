"""Report rendering: delimited metric tables plus matplotlib figures.

Every CLI report path writes machine-readable output (JSON + CSV) next to
PNG figures so runs can be compared at a glance.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .trainer import EvalPair


def write_eval_outputs(out_dir, pair: EvalPair, examples: list[dict] | None = None) -> list[str]:
    """Write report.json, report.csv and figures for one evaluation."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    report_json = out / "report.json"
    report_json.write_text(json.dumps(pair.to_json(), indent=2, sort_keys=True))
    written.append(str(report_json))

    report_csv = out / "report.csv"
    classes = sorted(set(pair.init.per_class_iou) | set(pair.refined.per_class_iou))
    with open(report_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "init_iou", "refined_iou", "iou_gain",
                    "init_ap", "refined_ap", "ap_gain"])
        for cls in classes:
            init_iou = pair.init.per_class_iou.get(cls, 0.0)
            ref_iou = pair.refined.per_class_iou.get(cls, 0.0)
            init_ap = pair.init.per_class_ap.get(cls, 0.0)
            ref_ap = pair.refined.per_class_ap.get(cls, 0.0)
            w.writerow([cls, f"{init_iou:.6f}", f"{ref_iou:.6f}", f"{ref_iou - init_iou:.6f}",
                        f"{init_ap:.6f}", f"{ref_ap:.6f}", f"{ref_ap - init_ap:.6f}"])
        w.writerow(["TOTAL", f"{pair.init.mean_iou:.6f}", f"{pair.refined.mean_iou:.6f}",
                    f"{pair.deltas['mean_iou']:.6f}", f"{pair.init.ap:.6f}",
                    f"{pair.refined.ap:.6f}", f"{pair.deltas['ap']:.6f}"])
    written.append(str(report_csv))

    fig_dir = out / "figures"
    fig_dir.mkdir(exist_ok=True)
    written.append(_per_class_figure(fig_dir / "per_class_iou.png", pair, classes))
    written.append(_summary_figure(fig_dir / "metric_gains.png", pair))
    if examples:
        written.append(_overlay_figure(fig_dir / "overlays.png", examples))
    return written


def _per_class_figure(path, pair: EvalPair, classes) -> str:
    fig, ax = plt.subplots(figsize=(1.6 + 1.1 * len(classes), 3.2))
    x = np.arange(len(classes))
    ax.bar(x - 0.18, [pair.init.per_class_iou.get(c, 0) for c in classes],
           width=0.36, label="init", color="#9aa7b8")
    ax.bar(x + 0.18, [pair.refined.per_class_iou.get(c, 0) for c in classes],
           width=0.36, label="refined", color="#2a6fb0")
    ax.set_xticks(x, classes)
    ax.set_ylabel("mean IoU")
    ax.set_ylim(0, 1)
    ax.set_title(f"{pair.split} ({pair.mode}): per-class IoU")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def _summary_figure(path, pair: EvalPair) -> str:
    names = ["mean_iou", "ap", "ap50", "af", "boundary_f1", "boundary_f2"]
    fig, ax = plt.subplots(figsize=(6.4, 3.2))
    x = np.arange(len(names))
    ax.bar(x - 0.18, [getattr(pair.init, n) for n in names], width=0.36,
           label="init", color="#9aa7b8")
    ax.bar(x + 0.18, [getattr(pair.refined, n) for n in names], width=0.36,
           label="refined", color="#2a6fb0")
    for i, n in enumerate(names):
        ax.text(i, max(getattr(pair.init, n), getattr(pair.refined, n)) + 0.02,
                f"{pair.deltas[n]:+.3f}", ha="center", fontsize=8)
    ax.set_xticks(x, names, rotation=20)
    ax.set_ylim(0, 1.1)
    ax.set_title(f"{pair.split} ({pair.mode}): init vs refined")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def _overlay_figure(path, examples: list[dict]) -> str:
    n = len(examples)
    cols = min(4, n)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(3.2 * cols, 3.2 * rows), squeeze=False)
    for ax in axes.flat:
        ax.axis("off")
    for ax, ex in zip(axes.flat, examples):
        ax.imshow(ex["image"])
        for polys, color, label in ((ex["gt"], "#23d160", "gt"),
                                    (ex["init"], "#ffd24a", "init"),
                                    (ex["refined"], "#18a6f2", "refined")):
            for p in polys:
                closed = np.vstack([p, p[:1]])
                ax.plot(closed[:, 0] - 0.5, closed[:, 1] - 0.5, color=color, lw=1.4)
        ax.set_title(ex["label"], fontsize=9)
    handles = [plt.Line2D([0], [0], color=c, lw=2)
               for c in ("#23d160", "#ffd24a", "#18a6f2")]
    fig.legend(handles, ["ground truth", "init", "refined"], loc="lower center",
               ncol=3, frameon=False)
    fig.tight_layout(rect=(0, 0.05, 1, 1))
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def write_train_outputs(out_dir, timeline: list[dict]) -> list[str]:
    """Write timeline.csv and the loss-curve figure for a training run."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    steps = [t for t in timeline if "loss" in t]

    csv_path = out / "timeline.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "epoch", "loss", "chamfer", "std"])
        for t in steps:
            w.writerow([t["step"], t["epoch"], f"{t['loss']:.6f}",
                        f"{t['chamfer']:.6f}", f"{t['std']:.6f}"])
    written.append(str(csv_path))

    if steps:
        fig, ax = plt.subplots(figsize=(6.4, 3.2))
        xs = [t["step"] for t in steps]
        ys = [t["loss"] for t in steps]
        ax.plot(xs, ys, lw=0.4, alpha=0.35, color="#2a6fb0")
        if len(ys) > 50:
            k = max(1, len(ys) // 200)
            smooth = np.convolve(ys, np.ones(2 * k + 1) / (2 * k + 1), mode="valid")
            ax.plot(xs[k:-k], smooth, lw=1.6, color="#d0442e", label="smoothed")
            ax.legend(frameon=False)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_title("training loss")
        fig.tight_layout()
        fig_path = out / "figures" / "loss_curve.png"
        fig_path.parent.mkdir(exist_ok=True)
        fig.savefig(fig_path, dpi=120)
        plt.close(fig)
        written.append(str(fig_path))
    return written


def format_eval_table(pair: EvalPair) -> str:
    """Plain-text per-class table (refined value / gain), in percent."""
    def pc(v):
        return f"{100 * v:.1f}"

    def gain(v):
        return f"{100 * v:+.1f}"

    classes = sorted(set(pair.init.per_class_iou) | set(pair.refined.per_class_iou))
    rows = [("", "IoU", "IoU+", "AP", "AP+", "F1px", "F1px+")]
    for cls in classes:
        i_iou = pair.init.per_class_iou.get(cls, 0.0)
        r_iou = pair.refined.per_class_iou.get(cls, 0.0)
        i_ap = pair.init.per_class_ap.get(cls, 0.0)
        r_ap = pair.refined.per_class_ap.get(cls, 0.0)
        rows.append((cls, pc(r_iou), gain(r_iou - i_iou),
                     pc(r_ap), gain(r_ap - i_ap), "", ""))
    rows.append(("mean", pc(pair.refined.mean_iou), gain(pair.deltas["mean_iou"]),
                 pc(pair.refined.ap), gain(pair.deltas["ap"]),
                 pc(pair.refined.boundary_f1), gain(pair.deltas["boundary_f1"])))
    widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
             for row in rows]
    lines.append(f"AF {pc(pair.refined.af)} ({gain(pair.deltas['af'])})  "
                 f"F2px {pc(pair.refined.boundary_f2)} ({gain(pair.deltas['boundary_f2'])})  "
                 f"instances {pair.n_instances}")
    return "\n".join(lines)
