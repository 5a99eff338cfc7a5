"""Static figures for training logs, threshold curves and sample panels."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402

from .evaluation import ThresholdPoint  # noqa: E402

# background transparent; edema purple, enhancing orange, necrosis yellow
LABEL_CMAP = ListedColormap([(0, 0, 0, 0), (0.5, 0.2, 0.6, 0.8), (1.0, 0.55, 0.1, 0.8), (1.0, 0.9, 0.1, 0.9)])

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_loss_curves(rows: Sequence[dict], path: Path, title: str = "") -> Path:
    epochs = [r["epoch"] for r in rows]
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 2, figsize=(7.5, 2.8))
        for key, style in (("total", "-"), ("ce", "--"), ("dice", ":")):
            axes[0].plot(epochs, [r[key] for r in rows], style, label=key)
        axes[0].set_xlabel("epoch")
        axes[0].set_ylabel("loss")
        axes[0].legend(frameon=False)
        axes[1].plot(epochs, [r["kl"] for r in rows], color="C3")
        axes[1].set_xlabel("epoch")
        axes[1].set_ylabel("KL [nats]")
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_threshold_curve(
    curves: dict[str, Sequence[ThresholdPoint]], path: Path, min_cases: int = 1
) -> Path:
    """Predictive and query-volume Dice against the true-overlap threshold.

    ``curves`` maps a model label to its curve; the predictive threshold
    (mean true overlap of the subset) is drawn once as a dashed black line.
    """
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 2, figsize=(7.5, 3.0), sharey=True)
        reference = None
        for i, (label, curve) in enumerate(curves.items()):
            pts = [p for p in curve if p.n_cases >= min_cases and p.predictive_dice is not None]
            x = [p.threshold for p in pts]
            axes[0].plot(x, [p.predictive_dice for p in pts], marker=".", color=f"C{i}", label=label)
            axes[1].plot(x, [p.query_volume_dice for p in pts], marker=".", color=f"C{i}", label=label)
            if reference is None:
                reference = (x, [p.predictive_threshold for p in pts])
        for ax, name in zip(axes, ("Predictive Dice", "Query Volume Dice")):
            if reference is not None:
                ax.plot(*reference, "k--", lw=1, label="predictive threshold")
            ax.set_xlabel("true overlap threshold")
            ax.set_title(name)
            ax.set_ylim(0, 1)
        axes[0].set_ylabel("Dice")
        axes[1].legend(frameon=False, loc="lower right")
        fig.tight_layout()
        return _save(fig, path)


def plot_sample_panel(
    context_images: np.ndarray,
    context_segs: np.ndarray,
    context_times: Sequence[float],
    query_times: Sequence[float],
    mean_segs: np.ndarray,
    sample_segs: np.ndarray,
    path: Path,
    truth: Optional[dict[float, np.ndarray]] = None,
    channel: int = 1,
) -> Path:
    """Context row, mean-prediction row and one row per sampled trajectory.

    ``sample_segs`` is [S, Q, H, W]; ``truth`` optionally maps query time to
    an observed segmentation shown in an extra row.
    """
    n_ctx, n_q = len(context_times), len(query_times)
    rows = 2 + len(sample_segs) + (1 if truth else 0)
    cols = max(n_ctx, n_q)
    with plt.rc_context(RC):
        fig, axes = plt.subplots(rows, cols, figsize=(1.4 * cols, 1.4 * rows), squeeze=False)
        for ax in axes.ravel():
            ax.set_axis_off()
        background = context_images[-1, channel]

        def show(ax, seg, title=None, img=background, edge=None):
            ax.imshow(img, cmap="gray")
            ax.imshow(seg, cmap=LABEL_CMAP, vmin=0, vmax=3, interpolation="nearest")
            if title:
                ax.set_title(title, fontsize=7)
            if edge:
                ax.set_axis_on()
                ax.set_xticks([])
                ax.set_yticks([])
                for s in ax.spines.values():
                    s.set_edgecolor(edge)
                    s.set_linewidth(2)

        for j in range(n_ctx):
            show(axes[0, j], context_segs[j], f"context t={context_times[j]:.2f}", context_images[j, channel], "red")
        for j in range(n_q):
            show(axes[1, j], mean_segs[j], f"mean t={query_times[j]:.2f}")
        for i, seg in enumerate(sample_segs):
            for j in range(n_q):
                show(axes[2 + i, j], seg[j], f"sample {i}" if j == 0 else None)
        if truth:
            for j, t in enumerate(query_times):
                if t in truth:
                    show(axes[-1, j], truth[t], f"observed t={t:.2f}")
        fig.tight_layout()
        return _save(fig, path)
