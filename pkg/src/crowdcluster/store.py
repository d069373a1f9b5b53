"""Event-sourced project state: an append-only JSON Lines log per project.

Commands validate, decide, and append events; a single shared ``_apply``
routine mutates in-memory state both on the live path and during replay, so
replaying the log from empty reconstructs exactly the live state. Snapshot
documents are written for convenience only; the log stays authoritative.
"""

from __future__ import annotations

import json
import os
import threading
import time
from pathlib import Path
from typing import Callable, Iterable

from . import serialize
from .aggregation import extract_clusters, fit
from .core import GroupingResponse, ObjectRecord, Page, expand_responses
from .errors import ConflictError, NotFoundError, ProtocolError, ValidationError
from .evaluation import IntruderResponse, generate_intruder_tasks, score_intruder
from .qualification import (QUALIFICATION_THRESHOLD, TrainingItem, curriculum_to_json,
                            default_curriculum, score_training)
from .sampler import build_plan

DEFAULT_LEASE_SECONDS = 30 * 60

PROJECT_STATES = ("collecting", "aggregating", "aggregated", "evaluating", "done")

Clock = Callable[[], float]


def _training_object_records(item: TrainingItem) -> list[dict]:
    # Training objects are synthetic; the id is self-describing and the UI
    # renders builtin:// URIs as drawn shapes.
    return [{"object_id": oid, "payload_uri": f"builtin://{oid}"}
            for oid in item.page.object_ids]


class ProjectStore:
    """All state and commands for one project; mutations serialized by a lock."""

    def __init__(self, root: Path, clock: Clock = time.time,
                 lease_seconds: int = DEFAULT_LEASE_SECONDS):
        self.root = Path(root)
        self.clock = clock
        self.lease_seconds = lease_seconds
        self.lock = threading.RLock()
        self.project_doc: dict = {}
        self.curriculum: list[TrainingItem] = []
        self._reset_state()

    # -- construction ------------------------------------------------------

    @classmethod
    def create(cls, root: Path, project_id: str, objects: list[ObjectRecord],
               config: dict, clock: Clock = time.time,
               lease_seconds: int = DEFAULT_LEASE_SECONDS) -> "ProjectStore":
        root = Path(root)
        if root.exists():
            raise ConflictError(f"project {project_id!r} already exists")
        sampler_cfg = dict(config.get("sampler") or {})
        plan = build_plan(
            objects,
            page_size=int(sampler_cfg.get("page_size", 6)),
            occurrences=sampler_cfg.get("occurrences"),
            replication=int(sampler_cfg.get("replication", 3)),
            seed=int(sampler_cfg.get("seed", 0)),
        )
        store = cls(root, clock=clock, lease_seconds=lease_seconds)
        store.project_doc = {
            "project_id": project_id,
            "objects": [serialize.object_record_to_doc(o) for o in objects],
            "config": {
                "sampler": {
                    "page_size": plan.page_size, "occurrences": plan.occurrences,
                    "replication": plan.replication, "seed": plan.seed,
                },
                "aggregation": dict(config.get("aggregation") or {}),
                "evaluation": {
                    "group_size": int((config.get("evaluation") or {}).get("group_size", 6)),
                    "tasks_per_cluster": int((config.get("evaluation") or {}).get("tasks_per_cluster", 3)),
                    "seed": int((config.get("evaluation") or {}).get("seed", plan.seed)),
                },
                "qualification": {
                    "threshold": float((config.get("qualification") or {}).get(
                        "threshold", QUALIFICATION_THRESHOLD)),
                },
            },
            "plan": serialize.plan_to_doc(plan),
        }
        curriculum_doc = config.get("curriculum")
        store.curriculum = (
            [_item_from_doc(d) for d in curriculum_doc] if curriculum_doc
            else default_curriculum()
        )
        store.project_doc["curriculum"] = curriculum_to_json(store.curriculum)
        root.mkdir(parents=True)
        (root / "project.json").write_text(serialize.dumps_pretty(store.project_doc))
        (root / "events.jsonl").touch()
        store._index_project()
        return store

    @classmethod
    def load(cls, root: Path, clock: Clock = time.time,
             lease_seconds: int = DEFAULT_LEASE_SECONDS) -> "ProjectStore":
        root = Path(root)
        doc_path = root / "project.json"
        if not doc_path.exists():
            raise NotFoundError(f"no project at {root}")
        store = cls(root, clock=clock, lease_seconds=lease_seconds)
        store.project_doc = json.loads(doc_path.read_text())
        store.curriculum = [_item_from_doc(d) for d in store.project_doc["curriculum"]]
        store._index_project()
        for event in store._read_events():
            store._apply(event)
        return store

    def _index_project(self) -> None:
        self.project_id = self.project_doc["project_id"]
        plan_doc = self.project_doc["plan"]
        self.pages: list[Page] = [serialize.page_from_doc(p) for p in plan_doc["pages"]]
        self.pages_by_id = {p.page_id: p for p in self.pages}
        self.replication = int(plan_doc["replication"])
        self.objects_by_id = {
            d["object_id"]: d for d in self.project_doc["objects"]
        }
        self.training_by_id = {item.page.page_id: item for item in self.curriculum}

    def _reset_state(self) -> None:
        self.seq = 0
        self.state = "collecting"
        self.assignments: dict[str, dict] = {}
        self.training_responses: dict[str, dict[str, dict]] = {}   # worker -> page -> doc
        self.grouping_responses: dict[str, dict[str, dict]] = {}   # page -> worker -> doc
        self.response_seq: dict[tuple[str, str], int] = {}         # (worker, task) -> seq
        self.profiles: dict[str, dict] = {}
        self.jobs: dict[str, dict] = {}
        self.active_job: str | None = None
        self.result_doc: dict | None = None
        self.diagnostics_doc: list[dict] | None = None
        self.eval_tasks: list[dict] = []
        self.eval_responses: dict[str, dict[str, dict]] = {}       # task -> worker -> doc

    # -- event machinery ----------------------------------------------------

    def _read_events(self) -> Iterable[dict]:
        path = self.root / "events.jsonl"
        if not path.exists():
            return []
        return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]

    def _append(self, kind: str, payload: dict) -> dict:
        event = {
            "sequence_number": self.seq + 1,
            "timestamp": self.clock(),
            "kind": kind,
            "payload": payload,
        }
        with open(self.root / "events.jsonl", "a") as fh:
            fh.write(serialize.dumps(event) + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        self._apply(event)
        return event

    def _apply(self, event: dict) -> None:
        """The one mutation path, shared by the live path and replay."""
        seq = int(event["sequence_number"])
        if seq != self.seq + 1:
            raise ValidationError(f"event sequence gap: expected {self.seq + 1}, got {seq}")
        self.seq = seq
        payload = event["payload"]
        kind = event["kind"]
        if kind == "assignment":
            self.assignments[payload["assignment_id"]] = {**payload, "open": True}
        elif kind == "response":
            self._apply_response(payload)
        elif kind == "qualification":
            profile = payload["profile"]
            existing = self.profiles.get(profile["worker_id"], {})
            self.profiles[profile["worker_id"]] = {
                **profile, "completed_pages": existing.get("completed_pages", 0),
            }
        elif kind == "job":
            self._apply_job(payload)
        elif kind == "evaluation_response":
            self._apply_evaluation_response(payload)
        else:
            raise ValidationError(f"unknown event kind {kind!r}")

    def _apply_response(self, payload: dict) -> None:
        assignment = self.assignments.get(payload["assignment_id"])
        if assignment is not None:
            assignment["open"] = False
        doc = payload["response"]
        worker = doc["worker_id"]
        if payload["response_type"] == "training":
            self.training_responses.setdefault(worker, {})[doc["page_id"]] = doc
            self.response_seq[(worker, doc["page_id"])] = self.seq
        else:
            self.grouping_responses.setdefault(doc["page_id"], {})[worker] = doc
            self.response_seq[(worker, doc["page_id"])] = self.seq
            if worker in self.profiles:
                self.profiles[worker]["completed_pages"] += 1

    def _apply_job(self, payload: dict) -> None:
        phase = payload["phase"]
        job_id = payload["job_id"]
        if phase == "started":
            self.jobs[job_id] = {"job_id": job_id, "phase": "running"}
            self.active_job = job_id
            self.state = "aggregating"
        elif phase == "finished":
            self.jobs[job_id] = {"job_id": job_id, "phase": "finished"}
            self.result_doc = payload["result"]
            self.diagnostics_doc = payload.get("diagnostics")
            self.active_job = None
            self.state = "aggregated"
        elif phase == "failed":
            self.jobs[job_id] = {"job_id": job_id, "phase": "failed",
                                 "error": payload.get("error", "")}
            self.active_job = None
            self.state = "aggregated" if self.result_doc is not None else "collecting"
        elif phase == "evaluation_started":
            self.eval_tasks = payload["tasks"]
            self.state = "evaluating"
        else:
            raise ValidationError(f"unknown job phase {phase!r}")

    def _apply_evaluation_response(self, payload: dict) -> None:
        assignment = self.assignments.get(payload["assignment_id"])
        if assignment is not None:
            assignment["open"] = False
        doc = payload["response"]
        self.eval_responses.setdefault(doc["task_id"], {})[doc["worker_id"]] = doc
        self.response_seq[(doc["worker_id"], doc["task_id"])] = self.seq
        if self.eval_tasks and all(
            len(self.eval_responses.get(t["task_id"], {})) >= self.replication
            for t in self.eval_tasks
        ):
            self.state = "done"

    # -- queries -------------------------------------------------------------

    def _open_assignments(self, now: float) -> list[dict]:
        return [a for a in self.assignments.values()
                if a["open"] and a["expires_at"] > now]

    def _worker_open_assignment(self, worker_id: str, now: float) -> dict | None:
        for a in self._open_assignments(now):
            if a["worker_id"] == worker_id:
                return a
        return None

    def _leases_on(self, task_id: str, now: float) -> int:
        return sum(1 for a in self._open_assignments(now) if a["task_id"] == task_id)

    def qualified(self, worker_id: str) -> bool:
        profile = self.profiles.get(worker_id)
        return bool(profile and profile["qualified"])

    def status_doc(self) -> dict:
        grouping_total = sum(len(v) for v in self.grouping_responses.values())
        return {
            "project_id": self.project_id,
            "state": self.state,
            "pages": len(self.pages),
            "grouping_responses": grouping_total,
            "evaluation_tasks": len(self.eval_tasks),
            "evaluation_responses": sum(len(v) for v in self.eval_responses.values()),
            "workers": sorted(self.profiles),
            "active_job": self.active_job,
            "event_count": self.seq,
        }

    def state_snapshot(self) -> dict:
        """Full deterministic dump of mutable state, for replay comparison."""
        return json.loads(serialize.dumps({
            "seq": self.seq,
            "state": self.state,
            "assignments": self.assignments,
            "training_responses": self.training_responses,
            "grouping_responses": self.grouping_responses,
            "profiles": self.profiles,
            "jobs": self.jobs,
            "active_job": self.active_job,
            "result": self.result_doc,
            "eval_tasks": self.eval_tasks,
            "eval_responses": self.eval_responses,
        }))

    # -- commands ------------------------------------------------------------

    def _task_payload(self, kind: str, assignment: dict) -> dict:
        task_id = assignment["task_id"]
        if kind == "training":
            item = self.training_by_id[task_id]
            body = {
                "page": serialize.page_to_doc(item.page),
                "hint": item.hint,
                "objects": _training_object_records(item),
                "index": list(self.training_by_id).index(task_id) + 1,
                "total": len(self.curriculum),
            }
        elif kind == "grouping":
            page = self.pages_by_id[task_id]
            body = {
                "page": serialize.page_to_doc(page),
                "objects": [self.objects_by_id[o] for o in page.object_ids],
            }
        else:
            task = next(t for t in self.eval_tasks if t["task_id"] == task_id)
            body = {
                "task": task if "intruder" not in task else
                        {k: v for k, v in task.items() if k != "intruder"},
                "objects": [self.objects_by_id[o] for o in task["shown_objects"]],
            }
        return {
            "kind": kind,
            "assignment_id": assignment["assignment_id"],
            "lease_expires_at": assignment["expires_at"],
            **body,
        }

    def next_task(self, worker_id: str) -> dict | None:
        with self.lock:
            if not worker_id:
                raise ValidationError("worker_id must be non-empty")
            now = self.clock()
            current = self._worker_open_assignment(worker_id, now)
            if current is not None:
                return self._task_payload(current["task_kind"], current)

            profile = self.profiles.get(worker_id)
            if profile is None:
                answered = self.training_responses.get(worker_id, {})
                for item in self.curriculum:
                    if item.page.page_id not in answered:
                        return self._issue(worker_id, "training", item.page.page_id, now)
                return None
            if not profile["qualified"]:
                return None

            if self.state == "collecting":
                for page in self.pages:
                    responses = self.grouping_responses.get(page.page_id, {})
                    if worker_id in responses:
                        continue
                    if len(responses) + self._leases_on(page.page_id, now) >= self.replication:
                        continue
                    return self._issue(worker_id, "grouping", page.page_id, now)
                return None
            if self.state == "evaluating":
                for task in self.eval_tasks:
                    responses = self.eval_responses.get(task["task_id"], {})
                    if worker_id in responses:
                        continue
                    if len(responses) + self._leases_on(task["task_id"], now) >= self.replication:
                        continue
                    return self._issue(worker_id, "intruder", task["task_id"], now)
                return None
            return None

    def _issue(self, worker_id: str, kind: str, task_id: str, now: float) -> dict:
        assignment = {
            "assignment_id": f"assign-{self.seq + 1:06d}",
            "worker_id": worker_id,
            "task_kind": kind,
            "task_id": task_id,
            "issued_at": now,
            "expires_at": now + self.lease_seconds,
        }
        self._append("assignment", assignment)
        return self._task_payload(kind, {**assignment, "open": True})

    def submit_response(self, doc: dict) -> dict:
        with self.lock:
            if "groups" in doc:
                return self._submit_grouping(serialize.grouping_response_from_doc(doc))
            if "chosen" in doc:
                return self._submit_intruder(serialize.intruder_response_from_doc(doc))
            raise ValidationError("response must carry either 'groups' or 'chosen'")

    def _duplicate_ack(self, worker_id: str, task_id: str) -> dict | None:
        seq = self.response_seq.get((worker_id, task_id))
        if seq is None:
            return None
        return {"accepted": True, "sequence_number": seq, "duplicate": True}

    def _submit_grouping(self, response: GroupingResponse) -> dict:
        now = self.clock()
        duplicate = self._duplicate_ack(response.worker_id, response.page_id)
        if duplicate:
            return duplicate
        assignment = self._worker_open_assignment(response.worker_id, now)
        if assignment is None or assignment["task_id"] != response.page_id:
            raise ConflictError(
                f"worker {response.worker_id!r} holds no open assignment for "
                f"{response.page_id!r} (lease expired or never issued)"
            )
        kind = assignment["task_kind"]
        if kind == "training":
            item = self.training_by_id[response.page_id]
            page = item.page
        elif kind == "grouping":
            page = self.pages_by_id[response.page_id]
        else:
            raise ConflictError("open assignment is an intruder task, not a grouping page")
        got, expected = set(response.groups), set(page.object_ids)
        if got != expected:
            raise ValidationError(
                f"response does not cover page {page.page_id!r} exactly: "
                f"missing={sorted(expected - got)} extra={sorted(got - expected)}"
            )
        event = self._append("response", {
            "assignment_id": assignment["assignment_id"],
            "response_type": "training" if kind == "training" else "grouping",
            "response": serialize.grouping_response_to_doc(response),
        })
        if kind == "training":
            self._maybe_qualify(response.worker_id)
        return {"accepted": True, "sequence_number": event["sequence_number"],
                "duplicate": False}

    def _maybe_qualify(self, worker_id: str) -> None:
        answered = self.training_responses.get(worker_id, {})
        if set(answered) != set(self.training_by_id):
            return
        responses = [serialize.grouping_response_from_doc(answered[page_id])
                     for page_id in self.training_by_id]
        threshold = self.project_doc["config"]["qualification"]["threshold"]
        profile = score_training(responses, self.curriculum, threshold)
        self._append("qualification", {"profile": serialize.profile_to_doc(profile)})

    def _submit_intruder(self, response: IntruderResponse) -> dict:
        now = self.clock()
        duplicate = self._duplicate_ack(response.worker_id, response.task_id)
        if duplicate:
            return duplicate
        assignment = self._worker_open_assignment(response.worker_id, now)
        if (assignment is None or assignment["task_kind"] != "intruder"
                or assignment["task_id"] != response.task_id):
            raise ConflictError(
                f"worker {response.worker_id!r} holds no open assignment for "
                f"task {response.task_id!r}"
            )
        task = next((t for t in self.eval_tasks if t["task_id"] == response.task_id), None)
        if task is None:
            raise ValidationError(f"unknown intruder task {response.task_id!r}")
        if response.chosen not in task["shown_objects"]:
            raise ValidationError(
                f"chosen object {response.chosen!r} is not among the shown objects"
            )
        event = self._append("evaluation_response", {
            "assignment_id": assignment["assignment_id"],
            "response": serialize.intruder_response_to_doc(response),
        })
        return {"accepted": True, "sequence_number": event["sequence_number"],
                "duplicate": False}

    # -- aggregation job ------------------------------------------------------

    def start_aggregation(self, background: bool = False) -> str:
        with self.lock:
            if self.active_job is not None:
                raise ConflictError(f"aggregation job {self.active_job!r} already running")
            if self.state not in ("collecting", "aggregated"):
                raise ConflictError(f"cannot aggregate in state {self.state!r}")
            total = sum(len(v) for v in self.grouping_responses.values())
            if total == 0:
                raise ProtocolError("no grouping responses to aggregate")
            job_id = f"job-{self.seq + 1:06d}"
            self._append("job", {"job_id": job_id, "phase": "started"})
        if background:
            thread = threading.Thread(target=self._run_aggregation, args=(job_id,), daemon=True)
            thread.start()
        else:
            self._run_aggregation(job_id)
        return job_id

    def _run_aggregation(self, job_id: str) -> None:
        try:
            responses = [
                serialize.grouping_response_from_doc(doc)
                for page_id in sorted(self.grouping_responses)
                for _, doc in sorted(self.grouping_responses[page_id].items())
            ]
            pairs = expand_responses(responses, self.pages_by_id)
            config = serialize.aggregation_config_from_doc(
                self.project_doc["config"]["aggregation"])
            object_ids = sorted(self.objects_by_id)
            worker_ids = sorted({r.worker_id for r in responses})
            diagnostics: list[dict] = []
            state = fit(pairs, object_ids, worker_ids, config, diagnostics=diagnostics.append)
            result = extract_clusters(state)
            result_doc = serialize.clustering_result_to_doc(result)
            with self.lock:
                self._append("job", {
                    "job_id": job_id, "phase": "finished", "result": result_doc,
                    "diagnostics": diagnostics[-50:],
                })
                (self.root / "snapshot.json").write_text(
                    serialize.dumps_pretty(self.state_snapshot()))
        except Exception as exc:  # noqa: BLE001 - job failures become events
            with self.lock:
                self._append("job", {"job_id": job_id, "phase": "failed", "error": str(exc)})

    def get_results(self) -> tuple[dict, list[dict] | None]:
        with self.lock:
            if self.result_doc is None:
                if self.active_job is not None:
                    raise ConflictError(f"aggregation job {self.active_job!r} still running")
                raise NotFoundError("no aggregation results yet")
            return self.result_doc, self.diagnostics_doc

    # -- evaluation round ------------------------------------------------------

    def start_evaluation(self) -> int:
        with self.lock:
            if self.state != "aggregated":
                raise ConflictError(f"cannot start evaluation in state {self.state!r}")
            result = serialize.clustering_result_from_doc(self.result_doc)
            eval_cfg = self.project_doc["config"]["evaluation"]
            tasks = generate_intruder_tasks(
                result,
                group_size=int(eval_cfg["group_size"]),
                tasks_per_cluster=int(eval_cfg["tasks_per_cluster"]),
                seed=int(eval_cfg["seed"]),
            )
            self._append("job", {
                "job_id": f"eval-{self.seq + 1:06d}",
                "phase": "evaluation_started",
                "tasks": [serialize.intruder_task_to_doc(t) for t in tasks],
            })
            return len(tasks)

    def report(self) -> dict:
        with self.lock:
            tasks = [serialize.intruder_task_from_doc(t) for t in self.eval_tasks]
            responses = [
                serialize.intruder_response_from_doc(doc)
                for task_id in sorted(self.eval_responses)
                for _, doc in sorted(self.eval_responses[task_id].items())
            ]
            report = score_intruder(tasks, responses)
            return serialize.report_to_doc(report)

    # -- export ----------------------------------------------------------------

    def export_lines(self) -> list[str]:
        with self.lock:
            lines = [serialize.dumps({"kind": "project", "document": self.project_doc})]
            lines.extend(serialize.dumps(e) for e in self._read_events())
            return lines


def _item_from_doc(doc: dict) -> TrainingItem:
    from .core import Partition
    return TrainingItem(
        page=serialize.page_from_doc(doc["page"]),
        gold=Partition({k: int(v) for k, v in doc["gold"].items()}),
        hint=doc["hint"],
    )


class StoreRegistry:
    """Opens and caches per-project stores under one data directory."""

    def __init__(self, data_dir: Path, clock: Clock = time.time,
                 lease_seconds: int = DEFAULT_LEASE_SECONDS):
        self.data_dir = Path(data_dir)
        self.clock = clock
        self.lease_seconds = lease_seconds
        self._stores: dict[str, ProjectStore] = {}
        self._lock = threading.Lock()

    def _project_root(self, project_id: str) -> Path:
        if not project_id or "/" in project_id or project_id.startswith("."):
            raise ValidationError(f"invalid project_id {project_id!r}")
        return self.data_dir / "projects" / project_id

    def create(self, project_id: str, objects: list[ObjectRecord], config: dict) -> ProjectStore:
        with self._lock:
            store = ProjectStore.create(
                self._project_root(project_id), project_id, objects, config,
                clock=self.clock, lease_seconds=self.lease_seconds,
            )
            self._stores[project_id] = store
            return store

    def get(self, project_id: str) -> ProjectStore:
        with self._lock:
            if project_id not in self._stores:
                self._stores[project_id] = ProjectStore.load(
                    self._project_root(project_id),
                    clock=self.clock, lease_seconds=self.lease_seconds,
                )
            return self._stores[project_id]

    def import_lines(self, lines: list[str]) -> ProjectStore:
        """Materialize a project from an export stream and replay it."""
        if not lines:
            raise ValidationError("empty import stream")
        head = json.loads(lines[0])
        if head.get("kind") != "project":
            raise ValidationError("first line of an import stream must be the project document")
        doc = head["document"]
        project_id = doc["project_id"]
        root = self._project_root(project_id)
        if root.exists():
            raise ConflictError(f"project {project_id!r} already exists")
        root.mkdir(parents=True)
        (root / "project.json").write_text(serialize.dumps_pretty(doc))
        with open(root / "events.jsonl", "w") as fh:
            for line in lines[1:]:
                if line.strip():
                    json.loads(line)  # validate before persisting
                    fh.write(line.rstrip("\n") + "\n")
        return self.get(project_id)
