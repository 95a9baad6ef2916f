"""Static figures: training curves and 2-D views of exported appearance codes."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

EVAL_KEYS = ("ap", "acc", "nmi")


def plot_training_curves(rows, path):
    """Loss terms against step, and evaluation metrics against step when logged.

    Returns the figure (already saved to ``path``).
    """
    if not rows:
        raise ValueError("metrics log is empty")
    steps = [r["step"] for r in rows]
    eval_rows = [r for r in rows if all(k in r for k in EVAL_KEYS)]
    n_panels = 2 if eval_rows else 1
    fig, axes = plt.subplots(1, n_panels, figsize=(5 * n_panels, 3.5), squeeze=False)
    ax = axes[0, 0]
    for key in ("total", "recon"):
        if all(key in r for r in rows):
            ax.plot(steps, [r[key] for r in rows], label=key)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    if eval_rows:
        ax = axes[0, 1]
        for key in EVAL_KEYS:
            ax.plot([r["step"] for r in eval_rows], [r[key] for r in eval_rows],
                    marker="o", label=key.upper())
        ax.set_xlabel("step")
        ax.set_ylim(0, 1)
        ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return fig


def embed_2d(Z, seed=0):
    """Project appearance codes to two dimensions (PCA when wider than 2)."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.shape[1] <= 2:
        return np.pad(Z, ((0, 0), (0, 2 - Z.shape[1])))
    from sklearn.decomposition import PCA

    return PCA(n_components=2, random_state=seed).fit_transform(Z)


def plot_latent_scatter(classes, Z, path):
    """Scatter of 2-D embedded codes, one colour per ground-truth class."""
    classes = np.asarray(classes)
    if len(classes) == 0:
        raise ValueError("latent export has no rows")
    xy = embed_2d(Z)
    fig, ax = plt.subplots(figsize=(5, 5))
    for c in np.unique(classes):
        sel = classes == c
        ax.scatter(xy[sel, 0], xy[sel, 1], s=6, label=str(c))
    ax.legend(title="class", markerscale=2, fontsize="small")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return fig
