"""Consolidated run reports: CSV tables plus matplotlib figures rendered
next to them in the run directory's reports/ folder."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def write_loss_csv(path, report_dict: dict) -> None:
    with Path(path).open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["stage", "step", "loss"])
        for stage in report_dict["stages"]:
            for i, loss in enumerate(stage["losses"]):
                writer.writerow([stage["name"], i, f"{loss:.6f}"])


def write_probe_csv(path, report_dict: dict) -> None:
    with Path(path).open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["stage", "epoch", "config", "accuracy"])
        for stage in report_dict["stages"]:
            for rec in stage["probe_accs"]:
                writer.writerow([stage["name"], rec["epoch"], rec["label"],
                                 f"{rec['acc']:.6f}"])


def write_search_csv(path, result_dict: dict) -> None:
    with Path(path).open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["cycle", "best_predicted_accuracy"])
        for cycle, acc in result_dict["history"]:
            writer.writerow([cycle, f"{acc:.6f}"])


def plot_loss_curves(path, report_dict: dict, title: str = "training loss") -> None:
    fig, ax = plt.subplots(figsize=(8, 4.5))
    offset = 0
    for stage in report_dict["stages"]:
        losses = stage["losses"]
        xs = range(offset, offset + len(losses))
        ax.plot(xs, losses, lw=0.8, label=stage["name"])
        offset += len(losses)
    ax.set_xlabel("optimizer step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_probe_grid(path, ps_report: dict, naive_report: dict | None = None) -> None:
    """Final probe-config accuracies, progressive shrinking vs naive."""
    def final_accs(report):
        accs = {}
        for stage in report["stages"]:
            for rec in stage["probe_accs"]:
                accs[rec["label"]] = rec["acc"]  # later stages overwrite
        return accs

    ps = final_accs(ps_report)
    labels = list(ps)
    fig, ax = plt.subplots(figsize=(9, 4.5))
    x = range(len(labels))
    width = 0.38 if naive_report else 0.7
    ax.bar([i - width / 2 for i in x], [ps[l] for l in labels], width,
           label="progressive shrinking")
    if naive_report:
        nv = final_accs(naive_report)
        ax.bar([i + width / 2 for i in x], [nv.get(l, 0.0) for l in labels],
               width, label="naive sampling")
    ax.set_xticks(list(x))
    ax.set_xticklabels([l.replace(";", "\n") for l in labels], fontsize=6)
    ax.set_ylabel("top-1 accuracy")
    ax.set_title("probe sub-network accuracy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_search_history(path, result_dict: dict) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    cycles = [c for c, _ in result_dict["history"]]
    accs = [a for _, a in result_dict["history"]]
    ax.plot(cycles, accs)
    ax.set_xlabel("evolution cycle")
    ax.set_ylabel("best predicted accuracy")
    ax.set_title("search progress")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_run_reports(run_dir) -> list[Path]:
    """Render every CSV/figure the artifacts in a run directory support."""
    run_dir = Path(run_dir)
    reports = run_dir / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    written = []

    def load(name):
        p = reports / name
        return json.loads(p.read_text()) if p.exists() else None

    ps = load("train_report.json")
    naive = load("naive_report.json")
    search = load("search_result.json")
    if ps:
        write_loss_csv(reports / "loss_curves.csv", ps)
        write_probe_csv(reports / "probe_accs.csv", ps)
        plot_loss_curves(reports / "loss_curves.png", ps)
        written += [reports / "loss_curves.csv", reports / "probe_accs.csv",
                    reports / "loss_curves.png"]
        if ps["stages"] and any(s["probe_accs"] for s in ps["stages"]):
            plot_probe_grid(reports / "probe_grid.png", ps, naive)
            written.append(reports / "probe_grid.png")
    if naive:
        write_loss_csv(reports / "naive_loss_curves.csv", naive)
        plot_loss_curves(reports / "naive_loss_curves.png", naive,
                         title="naive baseline loss")
        written += [reports / "naive_loss_curves.csv",
                    reports / "naive_loss_curves.png"]
    if search:
        write_search_csv(reports / "search_history.csv", search)
        plot_search_history(reports / "search_history.png", search)
        written += [reports / "search_history.csv",
                    reports / "search_history.png"]
    return written
