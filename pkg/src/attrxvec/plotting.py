"""Report figures: training curves and score distributions."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "attrxvec",
}

# PNG metadata without a software/version stamp keeps reruns byte-identical
_SAVE_KW = {"dpi": 120, "metadata": {"Software": None}}


def _moving_average(x, width):
    if len(x) < width or width < 2:
        return np.asarray(x, dtype=float)
    kernel = np.ones(width) / width
    return np.convolve(x, kernel, mode="valid")


def plot_training_curves(history, path, smooth=10):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        for task, color in (("speaker", "C0"), ("nsa", "C1")):
            steps = [s["step"] for s in history.steps if s["task"] == task]
            if not steps:
                continue
            loss = history.losses(task)
            ax.plot(steps, loss, color=color, alpha=0.3, lw=0.8)
            ma = _moving_average(loss, smooth)
            ax.plot(steps[len(steps) - len(ma):], ma, color=color, lw=1.5, label=f"{task} loss")
        ax.set_xlabel("step")
        ax.set_ylabel("cross-entropy")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, **_SAVE_KW)
        plt.close(fig)


def plot_score_histogram(target_scores, nontarget_scores, path, threshold=None, bins=40):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        allscores = np.concatenate([target_scores, nontarget_scores])
        edges = np.linspace(allscores.min(), allscores.max(), bins + 1)
        ax.hist(nontarget_scores, bins=edges, density=True, alpha=0.6, color="C3", label="nontarget")
        ax.hist(target_scores, bins=edges, density=True, alpha=0.6, color="C2", label="target")
        if threshold is not None and np.isfinite(threshold):
            ax.axvline(threshold, color="k", ls="--", lw=1, label="EER threshold")
        ax.set_xlabel("PLDA log-likelihood ratio")
        ax.set_ylabel("density")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, **_SAVE_KW)
        plt.close(fig)
