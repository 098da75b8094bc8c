"""Figures written next to the delimited reports.

Every function takes the output path and returns it; figures are closed
after saving so long CLI runs do not accumulate open handles.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 110,
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.4,
    "savefig.bbox": "tight",
}


def _save(fig, path):
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_training_log(rows, path, title=None):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        epochs = [r["epoch"] for r in rows]
        ax.plot(epochs, [r["loss"] for r in rows], color="C0", label="loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean loss")
        twin = ax.twinx()
        twin.plot(epochs, [r["accuracy"] for r in rows], color="C1", label="train accuracy")
        twin.set_ylabel("train accuracy")
        twin.set_ylim(0, 1.02)
        fig.legend(loc="upper center", ncol=2, frameon=False)
        if title:
            ax.set_title(title, pad=18)
        return _save(fig, path)


def plot_sweep(series, path, title=None):
    """``series`` maps a label to ``[(frames, accuracy), ...]``."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, rows in series.items():
            frames = [r[0] for r in rows]
            ax.plot(frames, [r[1] for r in rows], marker="o", label=label)
        ax.set_xscale("log", base=2)
        ax.set_xlabel("frames sampled per sequence")
        ax.set_ylabel("accuracy")
        ax.set_ylim(0, 1.02)
        ax.legend(frameon=False)
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_confusion(cm, path, title=None):
    cm = np.asarray(cm)
    with plt.rc_context(STYLE):
        size = min(1.0 + 0.35 * cm.shape[0], 9.0)
        fig, ax = plt.subplots(figsize=(size, size))
        ax.imshow(cm, cmap="Blues")
        if cm.shape[0] <= 12:
            for (i, j), v in np.ndenumerate(cm):
                ax.text(j, i, str(v), ha="center", va="center", fontsize=7)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_response(vmap, response, path, mask=None, title=None):
    """VideoMap (time on the x axis) above its temporal response curve."""
    matrix = np.asarray(vmap)
    with plt.rc_context(STYLE):
        fig, (top, bottom) = plt.subplots(2, 1, sharex=True, figsize=(5.0, 4.0))
        top.imshow(matrix.T, aspect="auto", cmap="viridis", interpolation="nearest")
        top.set_ylabel("feature")
        t = np.arange(len(response))
        bottom.plot(t, response, color="C3")
        if mask is not None:
            bottom.fill_between(t, 0, np.max(response) if np.max(response) > 0 else 1, where=mask,
                                color="0.85", step="mid", label="relevant frames")
            bottom.legend(frameon=False)
        bottom.set_xlabel("frame")
        bottom.set_ylabel("response")
        if title:
            top.set_title(title)
        return _save(fig, path)
