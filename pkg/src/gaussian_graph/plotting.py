"""Report figures written next to the CSV outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed metadata keeps repeated runs byte-stable
_PNG_META = {"Software": None}


def _by_method(rows, key):
    series = {}
    for r in rows:
        series.setdefault(r["method"], []).append((r["views"], r[key]))
    return {m: sorted(v) for m, v in sorted(series.items())}


def plot_metric_vs_views(rows, key: str, ylabel: str, path, title: str = "") -> None:
    """One line per method; `rows` are summary rows (one per views/method)."""
    fig, ax = plt.subplots(figsize=(5, 3.5), dpi=100)
    for method, pts in _by_method(rows, key).items():
        xs, ys = zip(*pts)
        ax.plot(xs, ys, marker="o", label=method)
    ax.set_xlabel("input views")
    ax.set_ylabel(ylabel)
    ax.set_xticks(sorted({r["views"] for r in rows}))
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def plot_loss_curve(losses, color_mse, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5), dpi=100)
    steps = range(1, len(losses) + 1)
    ax.semilogy(steps, losses, label="total loss")
    ax.semilogy(steps, color_mse, label="color MSE")
    ax.set_xlabel("step")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
