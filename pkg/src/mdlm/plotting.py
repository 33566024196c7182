"""Figure rendering for benchmark and experiment reports (PNG next to the CSVs)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.5, 3.4),
    "figure.dpi": 120,
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.bbox": "tight",
}

COLORS = {"variable": "#1f77b4", "fixed30": "#d62728", "asr_like": "#2ca02c", "caption_like": "#9467bd"}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_loss_curves(curves: dict[str, list[float]], path, title: str = "training loss", smooth: int = 10) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, values in curves.items():
            y = np.asarray(values, dtype=float)
            steps = np.arange(1, len(y) + 1)
            ax.plot(steps, y, alpha=0.25, color=COLORS.get(label))
            if smooth > 1 and len(y) >= smooth:
                kernel = np.ones(smooth) / smooth
                ax.plot(steps[smooth - 1:], np.convolve(y, kernel, mode="valid"), label=label, color=COLORS.get(label))
            else:
                ax.lines[-1].set_label(label)
        ax.set_xlabel("step")
        ax.set_ylabel("cross entropy (nats/token)")
        ax.set_title(title)
        ax.legend()
        return _save(fig, path)


def plot_ttft(rows: list[dict], path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for policy in sorted({r["policy"] for r in rows}):
            pts = sorted((r["duration_s"], r["ttft_ms"]) for r in rows if r["policy"] == policy)
            ax.plot(*zip(*pts), marker="o", label=policy, color=COLORS.get(policy))
        ax.set_xlabel("input duration (s)")
        ax.set_ylabel("TTFT (ms)")
        ax.legend()
        return _save(fig, path)


def plot_throughput(rows: list[dict], path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ok = [r for r in rows if r["status"] == "ok"]
        labels = [str(r["batch"]) for r in rows]
        heights = [r["samples_per_s"] if r["status"] == "ok" else 0.0 for r in rows]
        bars = ax.bar(labels, heights, color=COLORS["variable"])
        for bar, r in zip(bars, rows):
            if r["status"] != "ok":
                ax.annotate(r["status"], (bar.get_x() + bar.get_width() / 2, 0), ha="center", va="bottom")
        ax.set_xlabel("batch size")
        ax.set_ylabel("samples / s")
        if not ok:
            ax.set_ylim(0, 1)
        return _save(fig, path)


def plot_padding(durations, fixed_waste: float, sorted_waste: float, path, pad_to: float = 30.0) -> Path:
    with plt.rc_context(STYLE):
        fig, (hist, bars) = plt.subplots(1, 2, figsize=(8, 3.2))
        hist.hist(durations, bins=np.arange(0, pad_to + 1, 1.0), color="#7f7f7f")
        hist.set_xlabel("sample length (s)")
        hist.set_ylabel("count")
        bars.bar(["fixed 30 s", "sorted buckets"], [fixed_waste, sorted_waste],
                 color=[COLORS["fixed30"], COLORS["variable"]])
        bars.set_ylabel("padding fraction")
        bars.set_ylim(0, 1)
        return _save(fig, path)


def plot_gmacs(rows: list[dict], path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        phases = [r["phase"] for r in rows if r["phase"] != "total"]
        values = [r["macs"] / 1e9 for r in rows if r["phase"] != "total"]
        ax.barh(phases, values, color=COLORS["variable"])
        ax.set_xlabel("GMACs")
        return _save(fig, path)
