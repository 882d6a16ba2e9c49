"""Figures written next to the CSV/JSON reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

KIND_STYLE = {
    "attn": dict(color="tab:red", marker="o"),
    "swa": dict(color="tab:orange", marker="v"),
    "rat": dict(color="tab:blue", marker="s"),
    "rnn": dict(color="tab:green", marker="^"),
}


def _style(ax):
    ax.grid(True, alpha=0.3, linewidth=0.6)
    for side in ("top", "right"):
        ax.spines[side].set_visible(False)


def plot_loss_curve(history, path, title: str = ""):
    steps = [r["step"] for r in history]
    losses = [r["loss"] for r in history]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(steps, losses, lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("train loss (nats)")
    if title:
        ax.set_title(title, fontsize=10)
    _style(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_bench(rows, path):
    """Median latency against T, one line per (kind, L); OOM rows are skipped."""
    series = {}
    for r in rows:
        if r["median_ms"] in ("OOM", None, ""):
            continue
        label = r["kind"] if r["kind"] != "rat" else f"rat L={r['L']}"
        series.setdefault((r["mode"], label, r["kind"]), []).append((int(r["T"]), float(r["median_ms"])))
    modes = sorted({k[0] for k in series})
    fig, axes = plt.subplots(1, max(1, len(modes)), figsize=(4.2 * max(1, len(modes)), 3.2), squeeze=False)
    for ax, mode in zip(axes[0], modes):
        for (m, label, kind), pts in sorted(series.items()):
            if m != mode:
                continue
            pts.sort()
            ax.plot([p[0] for p in pts], [p[1] for p in pts], label=label, lw=1.2, ms=4, **KIND_STYLE.get(kind, {}))
        ax.set_xscale("log", base=2)
        ax.set_yscale("log")
        ax.set_xlabel("T (tokens)" if mode != "generate" else "position")
        ax.set_ylabel("median latency (ms)")
        ax.set_title(mode, fontsize=10)
        ax.legend(fontsize=7, frameon=False)
        _style(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_ordering(results: dict, path, ylabel: str = "validation loss (nats)"):
    """Per-variant scatter of seeds plus the median bar."""
    names = list(results)
    fig, ax = plt.subplots(figsize=(4.8, 3.2))
    for i, name in enumerate(names):
        vals = results[name]
        ax.scatter([i] * len(vals), vals, s=14, alpha=0.7)
        med = sorted(vals)[len(vals) // 2]
        ax.hlines(med, i - 0.25, i + 0.25, color="k", lw=1.5)
    ax.set_xticks(range(len(names)), names, fontsize=8)
    ax.set_ylabel(ylabel)
    _style(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
