"""Figures for sweep curves: mean CER or success ratio against epsilon."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

golden_mean = (np.sqrt(5) - 1.0) / 2.0
fig_width = 6.0

params = {
    "axes.labelsize": 10,
    "font.size": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.2,
    "figure.figsize": [fig_width, fig_width * golden_mean],
    "figure.dpi": 150,
    "svg.hashsalt": "sqat",
}

YLABELS = {"mean_cer": "mean CER vs. clean decoding", "success_ratio": "success ratio"}


def plot_curves(curves, path, title=None):
    """``curves`` is a list of (label, SweepCurve) sharing one grid and metric."""
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        for label, c in curves:
            ax.plot(c.grid, c.values, label=label)
        kind = curves[0][1].metric_kind
        ax.set_xlabel(r"relative perturbation size $\epsilon$")
        ax.set_ylabel(YLABELS.get(kind, kind))
        if kind == "success_ratio":
            ax.set_ylim(-0.02, 1.02)
        ax.grid(alpha=0.3)
        ax.legend(frameon=False)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
    return path


def plot_perturbation(image, delta, epsilon, path, text=None):
    """Clean image, rescaled perturbed image and |perturbation| stacked vertically."""
    from ..metrics import scaled_image

    pert = scaled_image(image, delta, epsilon)
    with plt.rc_context(params):
        fig, axes = plt.subplots(3, 1, figsize=(fig_width, 2.4))
        axes[0].imshow(image, cmap="gray", vmin=0, vmax=1)
        axes[1].imshow(pert, cmap="gray", vmin=0, vmax=1)
        axes[2].imshow(np.abs(pert - image), cmap="gray_r")
        for ax, lab in zip(axes, ["clean", f"eps={epsilon:g}", "|perturbation|"]):
            ax.set_xticks([])
            ax.set_yticks([])
            ax.set_ylabel(lab, rotation=0, ha="right", va="center")
        if text:
            axes[1].set_title(text, fontsize=8)
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
    return path
