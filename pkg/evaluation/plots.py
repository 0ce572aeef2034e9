"""SVG plots of curves and score histograms."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

# Fixed salt and no date keep repeated renders of the same data identical.
matplotlib.rcParams["svg.hashsalt"] = "critcascade"
SVG_METADATA = {"Date": None}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=SVG_METADATA)
    plt.close(fig)
    return path


def plot_roc(curves: dict[str, pd.DataFrame], aucs: dict[str, float], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 5))
    for name, frame in curves.items():
        ax.plot(frame["fpr"], frame["tpr"], lw=1.5, label=f"{name} (AUC={aucs[name]:.4f})")
    ax.plot([0, 1], [0, 1], "k--", lw=1)
    ax.set_xlabel("False Positive Rate")
    ax.set_ylabel("True Positive Rate")
    ax.set_title("ROC")
    ax.legend(loc="lower right", fontsize="small")
    return _save(fig, path)


def plot_pr(curves: dict[str, pd.DataFrame], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 5))
    for name, frame in curves.items():
        ax.plot(frame["recall"], frame["precision"], lw=1.5, label=name)
    ax.set_xlabel("Recall")
    ax.set_ylabel("Precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_title("Precision-Recall")
    ax.legend(loc="upper right", fontsize="small")
    return _save(fig, path)


def plot_score_histogram(histogram: pd.DataFrame, epsilon: float | None, path: str | Path) -> Path:
    """Per-class reward-score histogram (log counts) with the threshold marked."""
    fig, ax = plt.subplots(figsize=(7, 4))
    widths = histogram["bin_right"] - histogram["bin_left"]
    ax.bar(histogram["bin_left"], histogram["negative"], width=widths, align="edge", alpha=0.6, label="negative")
    ax.bar(histogram["bin_left"], histogram["positive"], width=widths, align="edge", alpha=0.6, label="positive")
    if epsilon is not None:
        ax.axvline(epsilon, color="k", ls="--", lw=1, label=f"epsilon={epsilon:.3g}")
    ax.set_yscale("log")
    ax.set_xlabel("reward score")
    ax.set_ylabel("count")
    ax.legend(fontsize="small")
    return _save(fig, path)
