"""Figure rendering for CLI report paths.

Every report figure is written next to its delimited output with the same
stem. Rendering is byte-deterministic: the Agg backend with pinned PNG
metadata, so repeated runs produce identical files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

_PNG_META = {"Software": None}


def _save(fig, path) -> None:
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def plot_loss_curves(records: list[dict], path) -> None:
    """Per-step total and component losses on a log-scaled y axis."""
    fig, ax = plt.subplots(figsize=(6.4, 4.0), dpi=110)
    steps = [r["step"] for r in records]
    ax.plot(steps, [r["total"] for r in records], label="total", lw=1.5)
    for key in ("distill", "card", "seg", "frame"):
        series = [r[key] for r in records]
        if any(v != 0.0 for v in series):
            ax.plot(steps, series, label=key, lw=1.0, alpha=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    fig.tight_layout()
    _save(fig, path)


def plot_macs(rows: list[dict], path) -> None:
    """Total MACs and MACs-C against the subsampling stride."""
    fig, ax = plt.subplots(figsize=(6.4, 4.0), dpi=110)
    strides = [r["stride"] for r in rows]
    ax.plot(strides, [r["total_macs"] for r in rows], marker="o", label="MACs")
    ax.plot(strides, [r["macs_c"] for r in rows], marker="s", label="MACs-C")
    ax.set_xlabel("stride")
    ax.set_ylabel("multiply-accumulates")
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.legend(frameon=False)
    fig.tight_layout()
    _save(fig, path)


def plot_frame_rates(rows: list[tuple[str, float]], path) -> None:
    """Average frame rate per unit type."""
    fig, ax = plt.subplots(figsize=(6.4, 4.0), dpi=110)
    names = [name for name, _ in rows]
    rates = [rate for _, rate in rows]
    ax.bar(range(len(names)), rates, color="#4878cf")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel("frame rate (Hz)")
    fig.tight_layout()
    _save(fig, path)


def plot_eval_metrics(metrics: dict, path) -> None:
    """Boundary precision/recall/F1 bars with the loss in the title."""
    fig, ax = plt.subplots(figsize=(6.4, 4.0), dpi=110)
    keys = ("boundary_precision", "boundary_recall", "boundary_f1")
    ax.bar(range(3), [metrics[k] for k in keys], color="#6acc65")
    ax.set_xticks(range(3))
    ax.set_xticklabels(["precision", "recall", "F1"])
    ax.set_ylim(0.0, 1.05)
    ax.set_title(
        f"distill loss {metrics['distill_loss']:.4f}, "
        f"rate {metrics['achieved_rate_hz']:.2f} Hz"
    )
    fig.tight_layout()
    _save(fig, path)
