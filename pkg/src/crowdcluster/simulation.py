"""Synthetic-crowd harness for end-to-end verification without real workers.

Planted worlds carry a ground-truth partition plus a secondary attribute per
object; parameterized worker models answer grouping and intruder tasks
deterministically per (worker seed, task id), so whole pipelines replay
bit-identically.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import sampler
from .aggregation import AggregationConfig, ClusteringResult, extract_clusters, fit
from .core import (GroupingResponse, ObjectRecord, Page, Partition,
                   adjusted_rand_index, expand_responses)
from .errors import ValidationError
from .evaluation import (IntruderResponse, IntruderTask, generate_intruder_tasks,
                         score_intruder)

WORKER_KINDS = ("faithful", "noisy", "splitter", "spammer")


@dataclass(frozen=True)
class WorldSpec:
    """A planted ground truth: cluster per object plus a secondary attribute."""

    n_objects: int
    true_clusters: int
    attribute_count: int
    seed: int
    truth: Partition
    attributes: Mapping[str, int]

    def object_ids(self) -> list[str]:
        return sorted(self.truth.assignment)

    def object_records(self) -> list[ObjectRecord]:
        return [
            ObjectRecord(
                object_id=obj,
                payload_uri=f"synthetic://cluster{self.truth.assignment[obj]}/attr{self.attributes[obj]}/{obj}",
            )
            for obj in self.object_ids()
        ]


@dataclass(frozen=True)
class SimWorker:
    """One simulated crowd member; p_flip only matters for the noisy kind."""

    worker_id: str
    kind: str = "faithful"
    p_flip: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in WORKER_KINDS:
            raise ValidationError(f"unknown worker kind {self.kind!r}; expected one of {WORKER_KINDS}")
        if not 0.0 <= self.p_flip <= 1.0:
            raise ValidationError(f"p_flip must be in [0, 1], got {self.p_flip}")
        if self.kind == "faithful" and self.p_flip != 0.0:
            raise ValidationError("faithful workers must have p_flip = 0")


def _task_rng(worker: SimWorker, task_id: str) -> np.random.Generator:
    # Stable across processes; Python's hash() is salted and unusable here.
    digest = hashlib.blake2b(task_id.encode(), digest_size=8).digest()
    return np.random.default_rng([worker.seed, int.from_bytes(digest, "big")])


def make_world(n_objects: int, true_clusters: int, attribute_count: int = 1, seed: int = 0) -> WorldSpec:
    """Round-robin cluster sizes (difference <= 1), shuffled; uniform attributes."""
    if true_clusters < 1:
        raise ValidationError(f"true_clusters must be >= 1, got {true_clusters}")
    if true_clusters > n_objects:
        raise ValidationError(f"true_clusters {true_clusters} exceeds n_objects {n_objects}")
    if attribute_count < 1:
        raise ValidationError(f"attribute_count must be >= 1, got {attribute_count}")
    rng = np.random.default_rng(seed)
    ids = [f"obj-{i:04d}" for i in range(n_objects)]
    labels = np.array([i % true_clusters for i in range(n_objects)])
    rng.shuffle(labels)
    attributes = rng.integers(0, attribute_count, size=n_objects)
    return WorldSpec(
        n_objects=n_objects,
        true_clusters=true_clusters,
        attribute_count=attribute_count,
        seed=seed,
        truth=Partition({obj: int(labels[i]) for i, obj in enumerate(ids)}),
        attributes={obj: int(attributes[i]) for i, obj in enumerate(ids)},
    )


def simulate_grouping(worker: SimWorker, page: Page, world: WorldSpec) -> GroupingResponse:
    """Answer one grouping page according to the worker's kind.

    faithful: the planted truth restricted to the page. splitter: splits by
    (truth cluster, attribute), producing atomic clusters. noisy: faithful,
    then each object reassigned to a uniformly random page group with
    probability p_flip. spammer: uniform labels, ignoring truth entirely.
    """
    unknown = [o for o in page.object_ids if o not in world.truth.assignment]
    if unknown:
        raise ValidationError(f"page {page.page_id!r} references unknown objects {unknown}")
    rng = _task_rng(worker, page.page_id)

    if worker.kind == "spammer":
        groups = {obj: int(rng.integers(0, page.size)) for obj in page.object_ids}
        return GroupingResponse(page_id=page.page_id, worker_id=worker.worker_id, groups=groups)

    if worker.kind == "splitter":
        keys = [(world.truth.assignment[o], world.attributes[o]) for o in page.object_ids]
    else:
        keys = [(world.truth.assignment[o],) for o in page.object_ids]
    label_of: dict[tuple, int] = {}
    labels = []
    for key in keys:
        if key not in label_of:
            label_of[key] = len(label_of)
        labels.append(label_of[key])

    if worker.kind == "noisy" and worker.p_flip > 0.0:
        present = sorted(set(labels))
        for i in range(len(labels)):
            if rng.random() < worker.p_flip:
                labels[i] = int(present[rng.integers(0, len(present))])

    groups = {obj: labels[i] for i, obj in enumerate(page.object_ids)}
    return GroupingResponse(page_id=page.page_id, worker_id=worker.worker_id, groups=groups)


def simulate_intruder_pick(worker: SimWorker, task: IntruderTask, world: WorldSpec) -> IntruderResponse:
    """Answer one intruder task.

    A faithful evaluator picks the shown object whose planted cluster differs
    from the display's majority planted cluster (the true intruder whenever
    the cluster was recovered correctly); ambiguity is resolved uniformly at
    random among the minority objects. Noisy evaluators answer at random with
    probability p_flip, spammers always do.
    """
    unknown = [o for o in task.shown_objects if o not in world.truth.assignment]
    if unknown:
        raise ValidationError(f"task {task.task_id!r} references unknown objects {unknown}")
    rng = _task_rng(worker, task.task_id)
    shown = list(task.shown_objects)

    random_pick = worker.kind == "spammer" or (
        worker.kind == "noisy" and rng.random() < worker.p_flip
    )
    if random_pick:
        chosen = shown[int(rng.integers(0, len(shown)))]
        return IntruderResponse(task_id=task.task_id, worker_id=worker.worker_id, chosen=chosen)

    planted = [world.truth.assignment[o] for o in shown]
    tally: dict[int, int] = {}
    for cluster in planted:
        tally[cluster] = tally.get(cluster, 0) + 1
    majority = max(tally, key=lambda c: (tally[c], -planted.index(c)))
    minority = [o for o, c in zip(shown, planted) if c != majority]
    if not minority:
        chosen = shown[int(rng.integers(0, len(shown)))]
    elif len(minority) == 1:
        chosen = minority[0]
    else:
        chosen = minority[int(rng.integers(0, len(minority)))]
    return IntruderResponse(task_id=task.task_id, worker_id=worker.worker_id, chosen=chosen)


@dataclass(frozen=True)
class PipelineMetrics:
    """What one end-to-end simulated run produced."""

    ari: float
    cluster_count: int
    intruder_quality: float
    pair_count: int
    sweep_count: int
    page_count: int
    result: ClusteringResult | None = field(compare=False, repr=False, default=None)

    def as_record(self) -> dict:
        return {
            "ari": self.ari,
            "cluster_count": self.cluster_count,
            "intruder_quality": self.intruder_quality,
            "pair_count": self.pair_count,
            "sweep_count": self.sweep_count,
            "page_count": self.page_count,
        }


def assign_workers(n_pages: int, workers: Sequence[SimWorker], replication: int) -> list[list[SimWorker]]:
    """Round-robin assignment of `replication` distinct workers per page."""
    if len(workers) < replication:
        raise ValidationError(
            f"need at least replication={replication} workers, got {len(workers)}"
        )
    return [
        [workers[(p * replication + i) % len(workers)] for i in range(replication)]
        for p in range(n_pages)
    ]


def run_pipeline(
    world: WorldSpec,
    workers: Sequence[SimWorker],
    page_size: int = sampler.DEFAULT_PAGE_SIZE,
    replication: int = sampler.DEFAULT_REPLICATION,
    config: AggregationConfig | None = None,
    evaluators: Sequence[SimWorker] | None = None,
    evaluation_group_size: int = 6,
    tasks_per_cluster: int = 3,
    occurrences: int | None = None,
) -> PipelineMetrics:
    """Plan, simulate responses, aggregate, and evaluate one synthetic world."""
    config = config or AggregationConfig()
    plan = sampler.build_plan(
        world.object_records(), page_size=page_size, occurrences=occurrences,
        replication=replication, seed=world.seed,
    )
    responses = [
        simulate_grouping(worker, page, world)
        for page, graders in zip(plan.pages, assign_workers(plan.page_count, workers, replication))
        for worker in graders
    ]
    pages_by_id = {p.page_id: p for p in plan.pages}
    pairs = expand_responses(responses, pages_by_id)

    sweeps = [0]

    def count_sweeps(record: dict) -> None:
        sweeps[0] += 1

    object_ids = world.object_ids()
    worker_ids = sorted({w.worker_id for w in workers})
    state = fit(pairs, object_ids, worker_ids, config, diagnostics=count_sweeps)
    result = extract_clusters(state)
    ari = adjusted_rand_index(result.assignment, world.truth)

    evaluators = list(evaluators) if evaluators is not None else list(workers)
    tasks = generate_intruder_tasks(
        result, group_size=evaluation_group_size,
        tasks_per_cluster=tasks_per_cluster, seed=world.seed,
    )
    picks = [
        simulate_intruder_pick(worker, task, world)
        for task, judges in zip(tasks, assign_workers(len(tasks), evaluators, replication))
        for worker in judges
    ]
    report = score_intruder(tasks, picks)

    return PipelineMetrics(
        ari=float(ari),
        cluster_count=result.cluster_count,
        intruder_quality=report.overall_quality,
        pair_count=len(pairs),
        sweep_count=sweeps[0],
        page_count=plan.page_count,
        result=result,
    )
