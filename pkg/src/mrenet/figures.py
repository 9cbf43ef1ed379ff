"""Matplotlib renderings written next to the delimited report output.

Everything draws through the Agg backend so the report path works headless;
figures are a presentation layer only — the CSV files remain the canonical
machine-readable output.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def _bar_chart(path: Path, labels, means, stds, title: str, ylabel: str):
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(labels) + 2.0), 3.2))
    x = range(len(labels))
    ax.bar(x, means, yerr=stds, capsize=3, color="#4878a8")
    ax.set_xticks(list(x))
    ax.set_xticklabels([str(l) for l in labels], rotation=0)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def render_run_figures(report, run_dir) -> list[Path]:
    """Per-category Dice/HD95 bars for one run, plus the loss curve when a
    training trace is present in the same directory."""
    run_dir = Path(run_dir)
    out = []
    cats = list(report.categories)
    for metric, ylabel in (("dice", "Dice"), ("hd95", "HD95")):
        means = [report.category_mean(metric, c) for c in cats]
        stds = [report.category_std(metric, c) for c in cats]
        out.append(_bar_chart(
            run_dir / f"report_{metric}.png",
            [f"cat {c}" for c in cats], means, stds,
            f"{ylabel} per category (mean over {len(report.subjects)} "
            "subjects)", ylabel))
    trace = run_dir / "loss_trace.csv"
    if trace.exists():
        iters, losses = [], []
        for line in trace.read_text().splitlines()[1:]:
            it, loss, _ = line.split(",")
            iters.append(int(it))
            losses.append(float(loss))
        if iters:
            fig, ax = plt.subplots(figsize=(5.0, 3.2))
            ax.plot(iters, losses, lw=0.8)
            ax.set_xlabel("iteration")
            ax.set_ylabel("loss")
            ax.set_title("training loss")
            ax.grid(alpha=0.3)
            fig.tight_layout()
            path = run_dir / "loss_trace.png"
            fig.savefig(path, dpi=110)
            plt.close(fig)
            out.append(path)
    return out


def render_aggregate_figures(aggregate, out_dir) -> list[Path]:
    """Per-category mean/std over runs for each metric."""
    out_dir = Path(out_dir)
    out = []
    cats = [str(c) for c in aggregate.categories]
    for metric, ylabel in (("dice", "Dice"), ("hd95", "HD95")):
        means = [aggregate.mean(metric, c) for c in cats]
        stds = [aggregate.std(metric, c) for c in cats]
        out.append(_bar_chart(
            out_dir / f"aggregate_{metric}.png",
            [f"cat {c}" for c in cats], means, stds,
            f"{ylabel} per category (mean over {aggregate.n_runs()} runs)",
            ylabel))
    return out


def render_ablation_figures(result, out_dir) -> list[Path]:
    """One bar per grid cell for each metric."""
    out_dir = Path(out_dir)
    out = []
    labels = [label for label, _, _ in result.cells]
    for metric, ylabel in (("dice", "Dice"), ("hd95", "HD95")):
        means = [agg.mean(metric) for _, _, agg in result.cells]
        stds = [agg.std(metric) for _, _, agg in result.cells]
        out.append(_bar_chart(
            out_dir / f"ablation_{metric}.png", labels, means, stds,
            f"{ylabel} by cell (axis: {result.axis})", ylabel))
    return out
