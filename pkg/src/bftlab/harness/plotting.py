"""Figures for a run, rendered off-screen next to the metrics CSV."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import message_types  # noqa: E402


def plot_messages(report, path: Path) -> Path:
    """Stacked bars: messages per decision, split by type."""
    fig, ax = plt.subplots(figsize=(8, 4))
    seqs = [d["seq"] for d in report.decisions]
    bottom = [0] * len(seqs)
    for t in message_types(report):
        vals = [d["messages"].get(t, 0) for d in report.decisions]
        ax.bar(seqs, vals, bottom=bottom, label=t)
        bottom = [b + v for b, v in zip(bottom, vals)]
    ax.set_xlabel("sequence number")
    ax.set_ylabel("messages")
    ax.set_title(f"{report.scenario.get('protocol', '')}: messages per decision")
    if seqs:
        ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_latency(report, path: Path) -> Path:
    """Per-decision latency (first send to first commit) against sequence number."""
    fig, ax = plt.subplots(figsize=(8, 4))
    pts = [(d["seq"], d["latency"]) for d in report.decisions if "latency" in d]
    if pts:
        xs, ys = zip(*pts)
        ax.plot(xs, ys, marker=".", linestyle="-")
    ax.set_xlabel("sequence number")
    ax.set_ylabel("latency (ticks)")
    ax.set_title(f"{report.scenario.get('protocol', '')}: decision latency")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def render(report, stem: Path) -> list[Path]:
    stem = Path(stem)
    return [
        plot_messages(report, stem.with_name(stem.name + ".messages.png")),
        plot_latency(report, stem.with_name(stem.name + ".latency.png")),
    ]
