"""Report figures, rendered headless next to the delimited outputs.

SVG output drops the date metadata and pins a hash salt so byte-identical
reruns stay byte-identical.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "imgcloak"

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .pipeline import GfdsReport  # noqa: E402

_CLEAN = "#3c78b4"
_PROTECTED = "#c23b22"


def _save(fig, path_base: Path) -> list[Path]:
    written = []
    for ext, meta in ((".svg", {"Date": None}), (".png", None)):
        target = path_base.with_suffix(ext)
        fig.savefig(target, metadata=meta, dpi=120)
        written.append(target)
    plt.close(fig)
    return written


def gfds_scatter(report: GfdsReport, path_base) -> list[Path]:
    """2D projection of pooled embeddings, clean vs protected."""
    fig, ax = plt.subplots(figsize=(5.5, 4.5))
    for flag, color, label in ((False, _CLEAN, "clean"),
                               (True, _PROTECTED, "protected")):
        xs = [p.pc1 for p in report.points if p.protected == flag]
        ys = [p.pc2 for p in report.points if p.protected == flag]
        ax.scatter(xs, ys, s=18, c=color, label=label, alpha=0.75,
                   edgecolors="none")
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.set_title(f"pooled-embedding shift "
                 f"(separation ratio {report.overall.separation_ratio:.2f})")
    ax.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, Path(path_base))


def robustness_chart(rows: list[dict], baseline: float, path_base) -> list[Path]:
    """Separation ratio per post-processing op against the unprocessed value."""
    fig, ax = plt.subplots(figsize=(6.5, 4.0))
    labels = [r["operation"] for r in rows]
    values = [r["separation_ratio"] for r in rows]
    ax.bar(range(len(rows)), values, color=_PROTECTED, alpha=0.85)
    ax.axhline(baseline, color=_CLEAN, linestyle="--", linewidth=1.2,
               label=f"unprocessed ({baseline:.2f})")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel("separation ratio after op")
    ax.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, Path(path_base))


def ratio_curve(rows: list[dict], path_base) -> list[Path]:
    """Attack accuracy as a function of the protection ratio."""
    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    ratios = [r["ratio"] for r in rows]
    ax.plot(ratios, [r["test_accuracy"] for r in rows], "o-", color=_PROTECTED,
            label="clean-test accuracy")
    ax.plot(ratios, [r["train_accuracy"] for r in rows], "s--", color=_CLEAN,
            alpha=0.7, label="train accuracy")
    ax.set_xlabel("protection ratio")
    ax.set_ylabel("attacker accuracy (%)")
    ax.set_ylim(0, 105)
    ax.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, Path(path_base))
