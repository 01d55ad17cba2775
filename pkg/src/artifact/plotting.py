"""PNG figures rendered next to the delimited report files."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_rates(path, eps, errors: dict, reference_slope=0.5):
    """Log-log error curves, one per norm, with a reference power law."""
    eps = np.asarray(eps, float)
    fig, ax = plt.subplots(figsize=(5.5, 4.2))
    for name, values in errors.items():
        ax.loglog(eps, values, "o-", label=name)
    first = max(v[0] for v in errors.values())
    ax.loglog(eps, first * (eps / eps[0]) ** reference_slope, "k--", lw=1,
              label=f"slope {reference_slope:g}")
    ax.set_xlabel("epsilon")
    ax.set_ylabel("error")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_kernel(path, kernel):
    fig, ax = plt.subplots(figsize=(5.5, 4.2))
    t = kernel.times
    for (i, j), style in zip([(0, 0), (1, 1), (0, 1)], ["-", "--", ":"]):
        ax.plot(t, kernel.A[:, i, j], style, label=f"A{i + 1}{j + 1}")
    ax.set_xlabel("t")
    ax.set_ylabel("permeability")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
