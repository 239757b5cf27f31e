"""Figures for the report path. Everything renders off-screen to PNG."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 100,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "svg.hashsalt": "coordload",
}

# no timestamps or version strings, so re-runs give identical bytes
_PNG_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return path


def stall_breakdown(rows: Sequence[Mapping], path: Path, title: str = "") -> Path:
    """Stacked bars of compute / fetch stall / prep stall seconds per (variant, epoch)."""
    labels = [f"{r.get('variant', '')}\ne{r['epoch_index']}" for r in rows]
    comp = [float(r["compute_seconds"]) for r in rows]
    fetch = [float(r["fetch_stall_seconds"]) for r in rows]
    prep = [float(r["prep_stall_seconds"]) for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        xs = range(len(rows))
        ax.bar(xs, comp, label="compute", color="#4c72b0")
        ax.bar(xs, fetch, bottom=comp, label="fetch stall", color="#dd8452")
        ax.bar(xs, prep, bottom=[c + f for c, f in zip(comp, fetch)], label="prep stall",
               color="#55a868")
        ax.set_xticks(list(xs))
        ax.set_xticklabels(labels, fontsize=7)
        ax.set_ylabel("seconds")
        if title:
            ax.set_title(title)
        ax.legend(loc="upper left", bbox_to_anchor=(1.0, 1.0))
        fig.tight_layout()
        return _save(fig, path)


def fetch_rate_curve(rows: Sequence[Mapping], path: Path, x_star: float | None = None) -> Path:
    """Predicted F and throughput against cache fraction, with P and G as flat lines."""
    xs = [float(r["cache_fraction_x"]) for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(xs, [float(r["F"]) for r in rows], marker="o", ms=3, label="F (fetch)")
        ax.plot(xs, [float(r["throughput"]) for r in rows], lw=2, alpha=0.6, label="min(F, P, G)")
        ax.axhline(float(rows[0]["P"]), ls="--", color="0.4", lw=1, label="P")
        ax.axhline(float(rows[0]["G"]), ls=":", color="0.2", lw=1, label="G")
        if x_star is not None:
            ax.axvline(x_star, color="#c44e52", lw=1, label=f"x* = {x_star:g}")
        ax.set_yscale("log")
        ax.set_xlabel("cached fraction of dataset")
        ax.set_ylabel("samples / s")
        ax.legend(loc="upper left", fontsize=7)
        fig.tight_layout()
        return _save(fig, path)


def miss_comparison(per_epoch: Mapping[str, Sequence[int]], path: Path, title: str = "") -> Path:
    """Misses per epoch for each cache policy."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, misses in per_epoch.items():
            ax.plot(range(len(misses)), misses, marker="o", ms=3, label=name)
        ax.set_xlabel("epoch")
        ax.set_ylabel("misses")
        ax.set_ylim(bottom=0)
        if title:
            ax.set_title(title)
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)
