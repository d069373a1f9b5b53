"""JSON codecs for every document the service, CLI, and UI exchange.

One schema per domain type; all files are JSON or JSON Lines. Encoding is
deterministic (sorted keys) so fixed-seed runs are byte-identical.
"""

from __future__ import annotations

import json
from typing import Any

from .aggregation import AggregationConfig, ClusteringResult
from .core import GroupingResponse, ObjectRecord, Page, PairLabel, Partition
from .errors import ValidationError
from .evaluation import ClusterQuality, EvaluationReport, IntruderResponse, IntruderTask
from .qualification import WorkerProfile
from .sampler import SamplingPlan
from .simulation import SimWorker, WorldSpec


def dumps(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def dumps_pretty(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def _require(doc: dict, key: str, context: str):
    if key not in doc:
        raise ValidationError(f"{context}: missing field {key!r}")
    return doc[key]


# --- core types -----------------------------------------------------------

def object_record_to_doc(rec: ObjectRecord) -> dict:
    doc = {"object_id": rec.object_id, "payload_uri": rec.payload_uri}
    if rec.metadata:
        doc["metadata"] = dict(rec.metadata)
    return doc


def object_record_from_doc(doc: dict) -> ObjectRecord:
    return ObjectRecord(
        object_id=str(_require(doc, "object_id", "object")),
        payload_uri=str(_require(doc, "payload_uri", "object")),
        metadata=doc.get("metadata") or {},
    )


def page_to_doc(page: Page) -> dict:
    return {"page_id": page.page_id, "object_ids": list(page.object_ids)}


def page_from_doc(doc: dict) -> Page:
    return Page(page_id=str(_require(doc, "page_id", "page")),
                object_ids=tuple(_require(doc, "object_ids", "page")))


def grouping_response_to_doc(resp: GroupingResponse) -> dict:
    return {"page_id": resp.page_id, "worker_id": resp.worker_id,
            "groups": {k: int(v) for k, v in resp.groups.items()}}


def grouping_response_from_doc(doc: dict) -> GroupingResponse:
    groups = _require(doc, "groups", "grouping response")
    return GroupingResponse(
        page_id=str(_require(doc, "page_id", "grouping response")),
        worker_id=str(_require(doc, "worker_id", "grouping response")),
        groups={str(k): int(v) for k, v in groups.items()},
    )


def pair_label_to_doc(pair: PairLabel) -> dict:
    return {"a": pair.a, "b": pair.b, "worker_id": pair.worker_id,
            "page_id": pair.page_id, "same": pair.same}


def pair_label_from_doc(doc: dict) -> PairLabel:
    return PairLabel(a=doc["a"], b=doc["b"], worker_id=doc["worker_id"],
                     page_id=doc["page_id"], same=bool(doc["same"]))


def partition_to_doc(p: Partition) -> dict:
    return {k: int(v) for k, v in p.assignment.items()}


def partition_from_doc(doc: dict) -> Partition:
    return Partition({str(k): int(v) for k, v in doc.items()})


# --- sampler --------------------------------------------------------------

def plan_to_doc(plan: SamplingPlan) -> dict:
    return {
        "n_objects": plan.n_objects,
        "page_size": plan.page_size,
        "occurrences": plan.occurrences,
        "replication": plan.replication,
        "seed": plan.seed,
        "pages": [page_to_doc(p) for p in plan.pages],
    }


def plan_from_doc(doc: dict) -> SamplingPlan:
    return SamplingPlan(
        n_objects=int(_require(doc, "n_objects", "plan")),
        page_size=int(_require(doc, "page_size", "plan")),
        occurrences=int(_require(doc, "occurrences", "plan")),
        replication=int(_require(doc, "replication", "plan")),
        seed=int(_require(doc, "seed", "plan")),
        pages=tuple(page_from_doc(p) for p in _require(doc, "pages", "plan")),
    )


# --- aggregation ----------------------------------------------------------

def aggregation_config_to_doc(cfg: AggregationConfig) -> dict:
    return {
        "dim": cfg.dim, "max_components": cfg.max_components, "alpha": cfg.alpha,
        "sigma_x": cfg.sigma_x, "sigma_mu": cfg.sigma_mu, "sigma_s": cfg.sigma_s,
        "sigma_tau": cfg.sigma_tau, "max_sweeps": cfg.max_sweeps,
        "rel_tol": cfg.rel_tol, "restarts": cfg.restarts, "seed": cfg.seed,
    }


def aggregation_config_from_doc(doc: dict) -> AggregationConfig:
    known = {f: doc[f] for f in (
        "dim", "max_components", "alpha", "sigma_x", "sigma_mu", "sigma_s",
        "sigma_tau", "max_sweeps", "rel_tol", "restarts", "seed") if f in doc}
    return AggregationConfig(**known)


def clustering_result_to_doc(result: ClusteringResult) -> dict:
    return {
        "assignment": partition_to_doc(result.assignment),
        "cluster_count": result.cluster_count,
        "members": {str(cid): list(objs) for cid, objs in result.members.items()},
        "projection": {obj: [float(x), float(y)] for obj, (x, y) in result.projection.items()},
    }


def clustering_result_from_doc(doc: dict) -> ClusteringResult:
    return ClusteringResult(
        assignment=partition_from_doc(_require(doc, "assignment", "result")),
        cluster_count=int(_require(doc, "cluster_count", "result")),
        members={int(cid): tuple(objs) for cid, objs in _require(doc, "members", "result").items()},
        projection={str(o): (float(xy[0]), float(xy[1]))
                    for o, xy in _require(doc, "projection", "result").items()},
    )


# --- evaluation -----------------------------------------------------------

def intruder_task_to_doc(task: IntruderTask) -> dict:
    return {"task_id": task.task_id, "cluster_id": task.cluster_id,
            "shown_objects": list(task.shown_objects), "intruder": task.intruder,
            "seed": task.seed}


def intruder_task_from_doc(doc: dict) -> IntruderTask:
    return IntruderTask(
        task_id=str(_require(doc, "task_id", "intruder task")),
        cluster_id=int(_require(doc, "cluster_id", "intruder task")),
        shown_objects=tuple(_require(doc, "shown_objects", "intruder task")),
        intruder=str(_require(doc, "intruder", "intruder task")),
        seed=int(doc.get("seed", 0)),
    )


def intruder_response_to_doc(resp: IntruderResponse) -> dict:
    return {"task_id": resp.task_id, "worker_id": resp.worker_id, "chosen": resp.chosen}


def intruder_response_from_doc(doc: dict) -> IntruderResponse:
    return IntruderResponse(
        task_id=str(_require(doc, "task_id", "intruder response")),
        worker_id=str(_require(doc, "worker_id", "intruder response")),
        chosen=str(_require(doc, "chosen", "intruder response")),
    )


def report_to_doc(report: EvaluationReport) -> dict:
    return {
        "overall_quality": report.overall_quality,
        "correct": report.correct,
        "total": report.total,
        "per_cluster": {
            str(cid): {"correct": q.correct, "total": q.total, "quality": q.quality}
            for cid, q in report.per_cluster.items()
        },
        "ci95": [report.ci95[0], report.ci95[1]],
    }


def report_from_doc(doc: dict) -> EvaluationReport:
    per_cluster = {
        int(cid): ClusterQuality(correct=int(q["correct"]), total=int(q["total"]),
                                 quality=float(q["quality"]))
        for cid, q in _require(doc, "per_cluster", "report").items()
    }
    ci = _require(doc, "ci95", "report")
    return EvaluationReport(
        overall_quality=float(_require(doc, "overall_quality", "report")),
        correct=int(_require(doc, "correct", "report")),
        total=int(_require(doc, "total", "report")),
        per_cluster=per_cluster,
        ci95=(float(ci[0]), float(ci[1])),
    )


# --- qualification / simulation -------------------------------------------

def profile_to_doc(profile: WorkerProfile) -> dict:
    return {"worker_id": profile.worker_id, "skill": profile.skill,
            "qualified": profile.qualified, "completed_pages": profile.completed_pages}


def profile_from_doc(doc: dict) -> WorkerProfile:
    return WorkerProfile(
        worker_id=str(_require(doc, "worker_id", "profile")),
        skill=float(_require(doc, "skill", "profile")),
        qualified=bool(_require(doc, "qualified", "profile")),
        completed_pages=int(doc.get("completed_pages", 0)),
    )


def world_to_doc(world: WorldSpec) -> dict:
    return {
        "n_objects": world.n_objects, "true_clusters": world.true_clusters,
        "attribute_count": world.attribute_count, "seed": world.seed,
        "truth": partition_to_doc(world.truth),
        "attributes": {k: int(v) for k, v in world.attributes.items()},
    }


def sim_worker_to_doc(worker: SimWorker) -> dict:
    return {"worker_id": worker.worker_id, "kind": worker.kind,
            "p_flip": worker.p_flip, "seed": worker.seed}


def sim_worker_from_doc(doc: dict) -> SimWorker:
    return SimWorker(
        worker_id=str(_require(doc, "worker_id", "worker")),
        kind=str(doc.get("kind", "faithful")),
        p_flip=float(doc.get("p_flip", 0.0)),
        seed=int(doc.get("seed", 0)),
    )


def read_jsonl(text: str) -> list[dict]:
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def write_jsonl(docs: list[dict]) -> str:
    return "".join(dumps(d) + "\n" for d in docs)
