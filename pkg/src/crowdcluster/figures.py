"""Matplotlib rendering for the CLI report paths.

Figures are written next to the delimited outputs; the data files stay the
canonical artifacts. Uses the Agg backend so no display is ever needed.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .aggregation import ClusteringResult  # noqa: E402
from .evaluation import EvaluationReport  # noqa: E402


def _cluster_colors(n: int) -> list:
    cmap = plt.get_cmap("tab20" if n > 10 else "tab10")
    return [cmap(i % cmap.N) for i in range(n)]


def render_cluster_scatter(result: ClusteringResult, path: str | Path) -> Path:
    """2-D projection of the embeddings, one color per cluster."""
    path = Path(path)
    colors = _cluster_colors(result.cluster_count)
    fig, ax = plt.subplots(figsize=(7, 6), dpi=120)
    for cid in sorted(result.members):
        objs = result.members[cid]
        xs = [result.projection[o][0] for o in objs]
        ys = [result.projection[o][1] for o in objs]
        ax.scatter(xs, ys, s=28, color=colors[cid], label=f"cluster {cid} ({len(objs)})",
                   edgecolors="white", linewidths=0.4)
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    ax.set_title(f"{len(result.assignment.assignment)} objects, "
                 f"{result.cluster_count} recovered clusters")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def render_quality_bars(report: EvaluationReport, path: str | Path) -> Path:
    """Per-cluster intruder detection rate with the overall Wilson interval."""
    path = Path(path)
    cluster_ids = sorted(report.per_cluster)
    qualities = [report.per_cluster[c].quality for c in cluster_ids]
    colors = _cluster_colors(max(cluster_ids) + 1 if cluster_ids else 1)
    fig, ax = plt.subplots(figsize=(7, 4.5), dpi=120)
    ax.bar([str(c) for c in cluster_ids], qualities,
           color=[colors[c] for c in cluster_ids])
    ax.axhline(report.overall_quality, color="black", linewidth=1.2,
               label=f"overall {report.overall_quality:.3f}")
    ax.axhspan(report.ci95[0], report.ci95[1], color="black", alpha=0.08,
               label=f"95% CI [{report.ci95[0]:.3f}, {report.ci95[1]:.3f}]")
    ax.set_ylim(0, 1.05)
    ax.set_xlabel("cluster")
    ax.set_ylabel("intruder detection rate")
    ax.set_title(f"evaluation quality ({report.correct}/{report.total} correct picks)")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
