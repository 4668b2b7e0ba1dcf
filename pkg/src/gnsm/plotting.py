"""Report figures written next to the CSV/JSON outputs."""

from __future__ import annotations

import contextlib

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {
    "figure.figsize": (5.0, 3.6),
    "figure.dpi": 120,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
}


@contextlib.contextmanager
def report_style():
    with plt.rc_context(_STYLE):
        yield


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_pr_curves(curves: dict, path, baseline=None):
    """``curves`` maps a label to ``(precision, recall, ap)``."""
    with report_style():
        fig, ax = plt.subplots()
        for name, (precision, recall, ap) in curves.items():
            ax.step(np.concatenate([[0.0], recall]), np.concatenate([[precision[0]], precision]),
                    where="post", label=f"{name} (AP {ap:.3f})")
        if baseline is not None:
            ax.axhline(baseline, ls="--", color="grey", lw=0.8, label=f"ratio {baseline:.2f}")
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.legend(loc="lower left")
        return _save(fig, path)


def plot_score_hist(scores, labels, path, bins: int = 50):
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    with report_style():
        fig, ax = plt.subplots()
        edges = np.histogram_bin_edges(scores, bins=bins)
        ax.hist(scores[labels == 0], bins=edges, alpha=0.6, density=True, label="inlier")
        ax.hist(scores[labels == 1], bins=edges, alpha=0.6, density=True, label="anomaly")
        ax.set_xlabel("anomaly score (GMM negative log-likelihood)")
        ax.set_ylabel("density")
        ax.legend()
        return _save(fig, path)


def plot_training_curve(history: list, path):
    steps = [h["step"] for h in history]
    with report_style():
        fig, ax = plt.subplots()
        ax.plot(steps, [h["train_loss"] for h in history], label="train (live)")
        ax.plot(steps, [h["val_loss"] for h in history], label="validation (EMA)")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend()
        return _save(fig, path)


def plot_embedding_profile(eta, labels, lambdas, path):
    """Median and interquartile band of each squared score norm against temperature."""
    eta = np.asarray(eta)
    labels = np.asarray(labels)
    with report_style():
        fig, ax = plt.subplots()
        for lab, name in ((0, "inlier"), (1, "anomaly")):
            sel = eta[labels == lab]
            if not len(sel):
                continue
            q1, med, q3 = np.percentile(sel, [25, 50, 75], axis=0)
            ax.plot(lambdas, med, marker="o", ms=3, label=name)
            ax.fill_between(lambdas, q1, q3, alpha=0.2)
        ax.set_xscale("log")
        ax.set_yscale("symlog")
        ax.set_xlabel("temperature")
        ax.set_ylabel("squared score norm")
        ax.legend()
        return _save(fig, path)
