"""CSV tables and static SVG figures for evaluation results."""
from __future__ import annotations

import csv
import json
import os

import numpy as np

from .data import SCENARIO_CLASSES
from .metrics import EDD_CATEGORIES, SERIOUS_CATEGORIES, EDDReport, Evaluation


def _writer(path):
    fh = open(path, "w", newline="")
    return fh, csv.writer(fh, lineterminator="\n")


def write_accuracy_csv(ev: Evaluation, path):
    fh, w = _writer(path)
    with fh:
        w.writerow(["class", "name", "accuracy", "pr_auc"])
        for c in sorted(set(ev.accuracy) | set(ev.pr_auc)):
            acc = ev.accuracy.get(c)
            auc = ev.pr_auc.get(c)
            w.writerow([c, SCENARIO_CLASSES[c], "" if acc is None else repr(acc),
                        "" if auc is None else repr(auc)])


def write_edd_csv(edd: EDDReport, path):
    fh, w = _writer(path)
    with fh:
        w.writerow(["category", "frames", "fraction", "serious"])
        total = edd.total
        for cat in EDD_CATEGORIES + ("correct",):
            n = edd[cat]
            w.writerow([cat, n, repr(n / total if total else 0.0), int(cat in SERIOUS_CATEGORIES)])


def write_summary_json(ev: Evaluation, path):
    doc = {
        "mean_pr_auc": ev.mean_pr_auc,
        "frame_accuracy": ev.frame_accuracy,
        "pr_auc": {str(c): v for c, v in ev.pr_auc.items()},
        "accuracy": {str(c): v for c, v in ev.accuracy.items()},
        "edd": ev.edd.as_dict(),
        "serious_fraction": ev.edd.serious_fraction,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "scenariogcn"  # stable element ids
    return plt


def plot_edd_svg(edd: EDDReport, path, title: str = "Error distribution"):
    """Horizontal stacked bar of frame fractions; serious categories hatched."""
    plt = _pyplot()
    total = edd.total or 1
    fig, ax = plt.subplots(figsize=(9, 2.2))
    left = 0.0
    cmap = plt.get_cmap("tab10")
    for i, cat in enumerate(("correct",) + EDD_CATEGORIES):
        frac = edd[cat] / total
        if frac == 0:
            continue
        ax.barh(0, frac, left=left, color=cmap(i % 10), edgecolor="black", linewidth=0.5,
                hatch="//" if cat in SERIOUS_CATEGORIES else None, label=f"{cat} ({edd[cat]})")
        left += frac
    ax.set_xlim(0, 1)
    ax.set_yticks([])
    ax.set_xlabel("fraction of frames")
    ax.set_title(f"{title}  (serious {edd.serious_fraction:.1%})")
    ax.legend(loc="upper center", bbox_to_anchor=(0.5, -0.45), ncol=4, fontsize=7, frameon=False)
    fig.savefig(path, format="svg", bbox_inches="tight", metadata={"Date": None})
    plt.close(fig)


def plot_pr_svg(ev: Evaluation, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4))
    for c, curve in sorted(ev.curves.items()):
        r = np.r_[0.0, curve.recall]
        p = np.r_[curve.precision[0], curve.precision]
        ax.step(r, p, where="pre", label=f"{c} {SCENARIO_CLASSES[c]} ({curve.auc:.2f})", linewidth=1)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_title(f"mean PR-AUC {ev.mean_pr_auc:.3f}")
    ax.legend(fontsize=6, loc="lower left")
    fig.savefig(path, format="svg", bbox_inches="tight", metadata={"Date": None})
    plt.close(fig)


def write_report(ev: Evaluation, out_dir, edd: bool = True) -> list[str]:
    """Write every report artifact into ``out_dir``; returns the file names."""
    os.makedirs(out_dir, exist_ok=True)
    files = ["accuracy.csv", "summary.json", "pr_curves.svg"]
    write_accuracy_csv(ev, os.path.join(out_dir, "accuracy.csv"))
    write_summary_json(ev, os.path.join(out_dir, "summary.json"))
    plot_pr_svg(ev, os.path.join(out_dir, "pr_curves.svg"))
    if edd:
        write_edd_csv(ev.edd, os.path.join(out_dir, "edd.csv"))
        plot_edd_svg(ev.edd, os.path.join(out_dir, "edd.svg"))
        files += ["edd.csv", "edd.svg"]
    return files
