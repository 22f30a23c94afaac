"""Report figures: predicted vs. ground-truth scores, training curves, metric bars."""

from __future__ import annotations

from contextlib import contextmanager
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import TABLE_COLUMN, read_predictions  # noqa: E402
from .training import read_run_log  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
}

FOLD_COLORS = ("#1b9e77", "#d95f02", "#7570b3", "#e7298a")


@contextmanager
def report_style():
    with plt.rc_context(STYLE):
        yield


def plot_predictions(doc: dict, report_dir: Path, out_path: Path) -> Path:
    """Scatter of test predictions against GRS, one panel per task."""
    tasks = list(doc["per_task"])
    with report_style():
        fig, axes = plt.subplots(1, len(tasks), figsize=(3.2 * len(tasks), 3.0), squeeze=False)
        for ax, task in zip(axes[0], tasks):
            lo, hi = doc["protocol"]["score_range"]
            ax.plot([lo, hi], [lo, hi], color="0.6", lw=0.8, ls="--")
            for row in doc["per_task"][task]["per_fold"]:
                _, truth, pred = read_predictions(Path(report_dir) / row["predictions"])
                ax.scatter(truth, pred, s=14, color=FOLD_COLORS[row["fold"] % 4],
                           label=f"fold {row['fold']}")
            m = doc["per_task"][task]["mean"]
            rho = "n/a" if m["rho"] is None else f"{m['rho']:.2f}"
            ax.set_title(f"{task}  rho={rho}  R-l2x100={m['r_l2_x100']:.3f}")
            ax.set_xlim(lo - 1, hi + 1)
            ax.set_ylim(lo - 1, hi + 1)
            ax.set_xlabel("ground-truth GRS")
            ax.set_ylabel("predicted GRS")
            ax.legend(frameon=False, loc="upper left")
        fig.savefig(out_path)
        plt.close(fig)
    return Path(out_path)


def plot_training_curves(logs: Mapping[str, Sequence[dict]], out_path: Path) -> Path:
    """Train/validation loss per epoch for each run, learning rate underneath."""
    with report_style():
        fig, (ax, ax_lr) = plt.subplots(2, 1, figsize=(5.0, 4.2), sharex=True,
                                        gridspec_kw={"height_ratios": [3, 1]})
        for k, (label, rows) in enumerate(logs.items()):
            epochs = [r["epoch"] for r in rows]
            color = FOLD_COLORS[k % len(FOLD_COLORS)]
            ax.plot(epochs, [r["train_loss"] for r in rows], color=color, lw=1.0, label=f"{label} train")
            ax.plot(epochs, [r["val_loss"] for r in rows], color=color, lw=1.0, ls=":", label=f"{label} val")
            if k == 0:
                ax_lr.plot(epochs, [r["lr"] for r in rows], color="0.3", lw=1.0)
        ax.set_yscale("log")
        ax.set_ylabel("MSE (normalised GRS)")
        ax.legend(frameon=False, ncol=2)
        ax_lr.set_ylabel("lr")
        ax_lr.set_xlabel("epoch")
        ax_lr.ticklabel_format(axis="y", style="sci", scilimits=(0, 0))
        fig.savefig(out_path)
        plt.close(fig)
    return Path(out_path)


def plot_metric_bars(docs: Sequence[dict], out_path: Path) -> Path:
    """Per-task rho and R-l2x100 for each report, side by side."""
    columns = ["SU", "NP", "KT", "Average"]
    with report_style():
        fig, axes = plt.subplots(1, 2, figsize=(7.0, 2.8))
        width = 0.8 / max(len(docs), 1)
        x = np.arange(len(columns))
        for metric, ax in zip(("rho", "r_l2_x100"), axes):
            for k, doc in enumerate(docs):
                vals = {c: np.nan for c in columns}
                for task, entry in doc["per_task"].items():
                    v = entry["mean"][metric]
                    vals[TABLE_COLUMN[task]] = np.nan if v is None else v
                avg = doc["average"][metric]
                vals["Average"] = np.nan if avg is None else avg
                ax.bar(x + k * width - 0.4 + width / 2, [vals[c] for c in columns], width,
                       label=doc["method"], color=FOLD_COLORS[k % len(FOLD_COLORS)])
            ax.set_xticks(x, columns)
            ax.set_title("Spearman rho" if metric == "rho" else "R-l2 x 100")
        axes[0].legend(frameon=False)
        fig.savefig(out_path)
        plt.close(fig)
    return Path(out_path)


def render_figures(docs: Sequence[dict], report_dirs: Sequence[Path], out_dir: Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [plot_metric_bars(docs, out_dir / "metrics.png")]
    for doc, rdir in zip(docs, report_dirs):
        tag = doc["method"].replace(" ", "_")
        paths.append(plot_predictions(doc, rdir, out_dir / f"predictions_{tag}.png"))
        logs = {}
        for task in doc["per_task"]:
            for row in doc["per_task"][task]["per_fold"]:
                p = Path(rdir) / task / f"fold{row['fold']}" / "run_log.jsonl"
                if p.is_file():
                    logs[f"{task} f{row['fold']}"] = read_run_log(p)
        if logs:
            paths.append(plot_training_curves(logs, out_dir / f"training_{tag}.png"))
    return paths
