"""Figure rendering for the bias report."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .metrics import BiasReport  # noqa: E402


def render_bias_figure(report: BiasReport, path) -> None:
    """Plot mean fitted position weight per prompt position with std bars.

    The dashed line marks the uniform profile (zero position bias).
    """
    n = len(report.mean_a)
    positions = list(range(1, n + 1))
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    ax.errorbar(
        positions,
        report.mean_a,
        yerr=report.std_a,
        marker="o",
        capsize=3,
        color="tab:blue",
        label=f"mean fitted weight (n={report.count})",
    )
    ax.axhline(1.0 / n, linestyle="--", color="tab:purple", label="no position bias")
    ax.set_xlabel("prompt position")
    ax.set_ylabel("fitted position weight")
    ax.set_xticks(positions)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
