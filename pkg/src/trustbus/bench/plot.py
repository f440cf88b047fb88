"""SVG chart for the stress sweep: latency against producer count."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

from matplotlib import pyplot as plt


def plot_latency_vs_producers(levels: list[dict], path: str) -> None:
    counts = [level["producers"] for level in levels]
    median = [level["median_latency_ms"] for level in levels]
    p95 = [level["p95_latency_ms"] for level in levels]
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    ax.plot(counts, median, marker="o", label="median")
    ax.plot(counts, p95, marker="s", linestyle="--", label="p95")
    ax.set_xlabel("producers")
    ax.set_ylabel("end-to-end latency (ms)")
    ax.set_title("Delivery latency under producer load")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
