"""Figures for the CLI reports: training curves and loss/energy scatter.

Every figure is written twice, as a PNG and as whitespace-delimited data
plus a gnuplot script that reproduces it.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0
WIDTH = 5.0  # inches

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.2,
    "lines.markersize": 4,
    "figure.figsize": (WIDTH, WIDTH * GOLDEN),
    "figure.dpi": 120,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_training(history: list, path, title: str = "") -> Path:
    epochs = [h["epoch"] for h in history]
    with matplotlib.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(epochs, [h["train_loss"] for h in history], label="train")
        ax.plot(epochs, [h["val_loss"] for h in history], label="validation")
        if min(h["val_loss"] for h in history) > 0:
            ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_pareto(points, on_front, path, title: str = "") -> Path:
    """Scatter of (validation loss, energy) with front members highlighted."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    mask = np.asarray(on_front, dtype=bool)
    with matplotlib.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.scatter(pts[~mask, 0], pts[~mask, 1], c="0.6", s=14, label="trials")
        if mask.any():
            front = pts[mask][np.argsort(pts[mask][:, 0], kind="stable")]
            ax.plot(front[:, 0], front[:, 1], "o-", c="tab:red", label="Pareto front")
        ax.set_xlabel("validation loss")
        ax.set_ylabel("energy per inference [mJ]")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)


# -- gnuplot ----------------------------------------------------------------
def write_table(path, columns: dict, comments=()) -> Path:
    """Whitespace-delimited table with a commented header."""
    path = Path(path)
    names = list(columns)
    rows = zip(*(columns[n] for n in names))
    with open(path, "w") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        fh.write("# " + " ".join(names) + "\n")
        for row in rows:
            fh.write(" ".join(_fmt(v) for v in row) + "\n")
    return path


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def pareto_gnuplot(data_name: str, png_name: str, comments=()) -> str:
    head = "".join(f"# {c}\n" for c in comments)
    return head + (
        "set terminal pngcairo size 800,500\n"
        f"set output '{png_name}'\n"
        "set xlabel 'validation loss'\n"
        "set ylabel 'energy per inference [mJ]'\n"
        "set key top right\n"
        f"plot '{data_name}' using 2:3 with points pt 7 lc rgb 'gray' title 'trials', \\\n"
        f"     '{data_name}' using ($4 == 1 ? $2 : 1/0):3 with points pt 7 lc rgb 'red' title 'Pareto front'\n"
    )


def training_gnuplot(data_name: str, png_name: str, comments=()) -> str:
    head = "".join(f"# {c}\n" for c in comments)
    return head + (
        "set terminal pngcairo size 800,500\n"
        f"set output '{png_name}'\n"
        "set xlabel 'epoch'\n"
        "set ylabel 'loss'\n"
        "set logscale y\n"
        f"plot '{data_name}' using 1:2 with lines title 'train', \\\n"
        f"     '{data_name}' using 1:3 with lines title 'validation'\n"
    )
