"""Delimited outputs and matplotlib figures for evaluation, ablation, and noise reports."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .grounding import EvalReport
from .propagation import PropagationResult
from .synth import AblationReport, NoiseReport


def write_eval_csv(report: EvalReport, path: Path) -> None:
    """One row per query plus a summary row carrying the aggregate percentages."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "indicator", "scene_id", "iou", "hit50", "hit80", "chosen_node_id", "error"])
        for q in report.per_query:
            w.writerow(
                ["query", q.indicator, q.scene_id, f"{q.iou:.6f}", int(q.hit50), int(q.hit80),
                 q.chosen_node_id or "", q.error or ""]
            )
        w.writerow(
            ["summary", f"n={report.n_queries}", report.split_name, "",
             f"{report.iou_at_50:.4f}", f"{report.iou_at_80:.4f}", "", ""]
        )


def write_ablation_csv(report: AblationReport, path: Path, *, method: str) -> None:
    rows = [r for r in report.rows if r.method == method]
    means = [m for m in report.means if m["method"] == method]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["size", "trial", "iou50", "iou80", "labeled_count"])
        for r in rows:
            w.writerow([r.size, r.trial, f"{r.iou50:.4f}", f"{r.iou80:.4f}", r.labeled_count])
        for m in means:
            w.writerow([m["size"], "mean", f"{m['iou50']:.4f}", f"{m['iou80']:.4f}", f"{m['labeled_count']:.1f}"])


def write_noise_csv(reports: dict[str, NoiseReport], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "class", "total", "labeled", "labeled_rate_pct"])
        for method, rep in reports.items():
            for cls, stats in rep.per_class.items():
                w.writerow([method, cls, stats["total"], stats["labeled"], f"{stats['labeled_rate']:.4f}"])


def eval_figure(split_reports: dict[str, EvalReport], path: Path) -> None:
    """Grouped bars of the two hit rates per split."""
    names = sorted(split_reports)
    x = range(len(names))
    iou50 = [split_reports[n].iou_at_50 for n in names]
    iou80 = [split_reports[n].iou_at_80 for n in names]
    fig, ax = plt.subplots(figsize=(1.8 + 1.3 * len(names), 3.6))
    ax.bar([i - 0.18 for i in x], iou50, width=0.36, label="IoU>0.5", color="#4878cf")
    ax.bar([i + 0.18 for i in x], iou80, width=0.36, label="IoU>0.8", color="#d65f5f")
    ax.set_xticks(list(x))
    ax.set_xticklabels(names, rotation=15)
    ax.set_ylabel("hit rate (%)")
    ax.set_ylim(0, 105)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def ablation_figure(report: AblationReport, path: Path) -> None:
    """Mean hit rates against reminiscence size, one line per method and threshold."""
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    methods = sorted({m["method"] for m in report.means})
    for method in methods:
        rows = sorted((m for m in report.means if m["method"] == method), key=lambda m: m["size"])
        sizes = [m["size"] for m in rows]
        ax.plot(sizes, [m["iou50"] for m in rows], marker="o", label=f"{method} IoU>0.5")
        ax.plot(sizes, [m["iou80"] for m in rows], marker="s", linestyle="--", label=f"{method} IoU>0.8")
    ax.set_xlabel("reminiscence size (raw scenes)")
    ax.set_ylabel("hit rate (%)")
    ax.set_ylim(0, 105)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def noise_figure(reports: dict[str, NoiseReport], path: Path) -> None:
    """Ambiguous/invalid propagation rates side by side per method."""
    methods = list(reports)
    x = range(len(methods))
    amb = [reports[m].ambiguous_labeled_rate for m in methods]
    inv = [reports[m].invalid_labeled_rate for m in methods]
    fig, ax = plt.subplots(figsize=(1.8 + 1.3 * len(methods), 3.6))
    ax.bar([i - 0.18 for i in x], amb, width=0.36, label="ambiguous labeled", color="#ee854a")
    ax.bar([i + 0.18 for i in x], inv, width=0.36, label="invalid labeled", color="#6acc64")
    ax.set_xticks(list(x))
    ax.set_xticklabels(methods)
    ax.set_ylabel("rate (%)")
    ax.set_ylim(0, 105)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def convergence_figure(result: PropagationResult, path: Path) -> None:
    """Changed-node ratio and cumulative labels per pass."""
    passes = [p.pass_index for p in result.passes]
    ratios = [p.changed_ratio for p in result.passes]
    assigned = []
    total = 0
    for p in result.passes:
        total += p.labels_assigned
        assigned.append(total)
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    ax.plot(passes, ratios, marker="o", color="#4878cf", label="changed ratio")
    ax.axhline(result.config.convergence_ratio, color="#888", linestyle=":", label="convergence ratio")
    ax.set_xlabel("pass")
    ax.set_ylabel("changed ratio")
    ax.set_ylim(bottom=0)
    ax2 = ax.twinx()
    ax2.plot(passes, assigned, marker="s", color="#d65f5f", label="labels assigned (cum.)")
    ax2.set_ylabel("labels assigned")
    lines, labels = ax.get_legend_handles_labels()
    lines2, labels2 = ax2.get_legend_handles_labels()
    ax.legend(lines + lines2, labels + labels2, frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
