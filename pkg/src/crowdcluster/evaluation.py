"""Intruder-based cluster quality evaluation.

Each task shows G objects: G-1 members of one recovered cluster plus one
object drawn from the union of all other clusters. The quality of the
clustering is the fraction of evaluator picks that hit the intruder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .aggregation import ClusteringResult
from .errors import ProtocolError, ValidationError

DEFAULT_GROUP_SIZE = 6
DEFAULT_TASKS_PER_CLUSTER = 3
_Z95 = 1.959963984540054


@dataclass(frozen=True)
class IntruderTask:
    """One evaluation display: cluster members plus one planted outsider."""

    task_id: str
    cluster_id: int
    shown_objects: tuple[str, ...]
    intruder: str
    seed: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "shown_objects", tuple(self.shown_objects))
        if len(set(self.shown_objects)) != len(self.shown_objects):
            raise ValidationError(f"task {self.task_id!r}: duplicate shown objects")
        if self.intruder not in self.shown_objects:
            raise ValidationError(f"task {self.task_id!r}: intruder not among shown objects")


@dataclass(frozen=True)
class IntruderResponse:
    task_id: str
    worker_id: str
    chosen: str


@dataclass(frozen=True)
class ClusterQuality:
    correct: int
    total: int
    quality: float


@dataclass(frozen=True)
class EvaluationReport:
    overall_quality: float
    correct: int
    total: int
    per_cluster: Mapping[int, ClusterQuality]
    ci95: tuple[float, float]


def generate_intruder_tasks(
    result: ClusteringResult,
    group_size: int = DEFAULT_GROUP_SIZE,
    tasks_per_cluster: int = DEFAULT_TASKS_PER_CLUSTER,
    seed: int = 0,
    diagnostics: list[str] | None = None,
) -> list[IntruderTask]:
    """Build intruder tasks for every cluster with at least group_size-1 members.

    Members are sampled uniformly without replacement; the intruder is drawn
    uniformly from the union of all other clusters' objects. Deterministic
    for a fixed seed. Too-small clusters are skipped with a diagnostic.
    """
    if group_size < 2:
        raise ValidationError(f"group_size must be >= 2, got {group_size}")
    if tasks_per_cluster < 1:
        raise ValidationError(f"tasks_per_cluster must be >= 1, got {tasks_per_cluster}")
    if result.cluster_count < 2:
        raise ProtocolError("intruder undefined: need at least 2 clusters")

    tasks: list[IntruderTask] = []
    eligible = 0
    for cluster_id in sorted(result.members):
        members = sorted(result.members[cluster_id])
        if len(members) < group_size - 1:
            if diagnostics is not None:
                diagnostics.append(
                    f"cluster {cluster_id} skipped: {len(members)} members < {group_size - 1}"
                )
            continue
        eligible += 1
        outsiders = sorted(
            obj for cid, objs in result.members.items() if cid != cluster_id for obj in objs
        )
        for t in range(tasks_per_cluster):
            rng = np.random.default_rng([seed, cluster_id, t])
            shown = list(rng.choice(members, size=group_size - 1, replace=False))
            intruder = str(rng.choice(outsiders))
            shown.append(intruder)
            order = rng.permutation(len(shown))
            tasks.append(IntruderTask(
                task_id=f"intruder-{cluster_id:03d}-{t:03d}",
                cluster_id=cluster_id,
                shown_objects=tuple(str(shown[i]) for i in order),
                intruder=intruder,
                seed=seed,
            ))
    if eligible == 0:
        raise ProtocolError(f"no cluster has the {group_size - 1} members a task needs")
    return tasks


def wilson_interval(correct: int, total: int, z: float = _Z95) -> tuple[float, float]:
    """Wilson score interval for a binomial fraction."""
    if total <= 0:
        raise ValidationError("wilson_interval needs at least one trial")
    phat = correct / total
    denom = 1.0 + z * z / total
    center = (phat + z * z / (2 * total)) / denom
    half = z * math.sqrt(phat * (1 - phat) / total + z * z / (4 * total * total)) / denom
    return (center - half, center + half)


def score_intruder(
    tasks: Sequence[IntruderTask],
    responses: Sequence[IntruderResponse],
) -> EvaluationReport:
    """Fraction of responses that picked the intruder, overall and per cluster."""
    if not responses:
        raise ValidationError("no evaluation responses to score")
    by_id = {t.task_id: t for t in tasks}
    correct_by_cluster: dict[int, int] = {}
    total_by_cluster: dict[int, int] = {}
    for response in responses:
        task = by_id.get(response.task_id)
        if task is None:
            raise ValidationError(f"response references unknown task {response.task_id!r}")
        if response.chosen not in task.shown_objects:
            raise ValidationError(
                f"response for task {response.task_id!r} chose an object not shown: {response.chosen!r}"
            )
        total_by_cluster[task.cluster_id] = total_by_cluster.get(task.cluster_id, 0) + 1
        if response.chosen == task.intruder:
            correct_by_cluster[task.cluster_id] = correct_by_cluster.get(task.cluster_id, 0) + 1

    per_cluster = {
        cid: ClusterQuality(
            correct=correct_by_cluster.get(cid, 0),
            total=total,
            quality=correct_by_cluster.get(cid, 0) / total,
        )
        for cid, total in sorted(total_by_cluster.items())
    }
    correct = sum(q.correct for q in per_cluster.values())
    total = sum(q.total for q in per_cluster.values())
    return EvaluationReport(
        overall_quality=correct / total,
        correct=correct,
        total=total,
        per_cluster=per_cluster,
        ci95=wilson_interval(correct, total),
    )


def report_text(report: EvaluationReport) -> str:
    """Plain-text summary table of an evaluation report."""
    lines = [
        "cluster  correct  total  quality",
        "-------  -------  -----  -------",
    ]
    for cid, q in sorted(report.per_cluster.items()):
        lines.append(f"{cid:>7d}  {q.correct:>7d}  {q.total:>5d}  {q.quality:>7.3f}")
    lines.append("-------  -------  -----  -------")
    lines.append(f"overall  {report.correct:>7d}  {report.total:>5d}  {report.overall_quality:>7.3f}")
    lines.append(f"95% Wilson interval: [{report.ci95[0]:.3f}, {report.ci95[1]:.3f}]")
    return "\n".join(lines) + "\n"
