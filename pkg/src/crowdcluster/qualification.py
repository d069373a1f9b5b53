"""Training/exam scoring and the skill gate for workers.

A worker's skill is 100 times their fraction of training pages grouped
correctly, where correctness is label-permutation-invariant. Workers at or
above the threshold (default 80) qualify for live pages.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

from .core import GroupingResponse, Page, Partition, partition_equal
from .errors import ValidationError

QUALIFICATION_THRESHOLD = 80.0


@dataclass(frozen=True)
class TrainingItem:
    """One training page with its intended (gold) grouping and a hint shown to the worker."""

    page: Page
    gold: Partition
    hint: str

    def __post_init__(self) -> None:
        if self.gold.object_ids != frozenset(self.page.object_ids):
            raise ValidationError(
                f"training item {self.page.page_id!r}: gold does not cover the page exactly"
            )


@dataclass
class WorkerProfile:
    """Per-worker skill state; `qualified` is definitionally skill >= threshold."""

    worker_id: str
    skill: float
    qualified: bool
    completed_pages: int = 0


def score_training(
    responses: list[GroupingResponse],
    items: list[TrainingItem],
    threshold: float = QUALIFICATION_THRESHOLD,
) -> WorkerProfile:
    """Score one worker's full training run and derive their profile."""
    if not items:
        raise ValidationError("no training items to score")
    workers = {r.worker_id for r in responses}
    if len(workers) != 1:
        raise ValidationError(f"training responses must come from one worker, got {sorted(workers)}")
    worker_id = responses[0].worker_id

    by_page = {item.page.page_id: item for item in items}
    seen: dict[str, GroupingResponse] = {}
    for response in responses:
        if response.page_id not in by_page:
            raise ValidationError(f"response references unknown training page {response.page_id!r}")
        if response.page_id in seen:
            raise ValidationError(f"duplicate response for training page {response.page_id!r}")
        seen[response.page_id] = response
    missing = sorted(set(by_page) - set(seen))
    if missing:
        raise ValidationError(f"missing responses for training pages {missing}")

    correct = 0
    for page_id, response in seen.items():
        item = by_page[page_id]
        if set(response.groups) != set(item.page.object_ids):
            got, expected = set(response.groups), set(item.page.object_ids)
            raise ValidationError(
                f"response for page {page_id!r} does not cover it exactly: "
                f"missing={sorted(expected - got)} extra={sorted(got - expected)}"
            )
        if partition_equal(Partition.from_groups(response.groups), item.gold):
            correct += 1

    skill = 100.0 * correct / len(items)
    return WorkerProfile(worker_id=worker_id, skill=skill, qualified=skill >= threshold)


def curriculum_from_json(payload: list[dict]) -> list[TrainingItem]:
    """Parse a curriculum file: a JSON list of training items."""
    items = []
    for entry in payload:
        page = Page(page_id=entry["page"]["page_id"],
                    object_ids=tuple(entry["page"]["object_ids"]))
        items.append(TrainingItem(page=page, gold=Partition(
            {k: int(v) for k, v in entry["gold"].items()}), hint=entry["hint"]))
    return items


def curriculum_to_json(items: list[TrainingItem]) -> list[dict]:
    return [
        {
            "page": {"page_id": it.page.page_id, "object_ids": list(it.page.object_ids)},
            "gold": dict(it.gold.assignment),
            "hint": it.hint,
        }
        for it in items
    ]


def default_curriculum() -> list[TrainingItem]:
    """The bundled 5-page synthetic curriculum, escalating from 2 to 6 objects."""
    text = resources.files("crowdcluster.data").joinpath("training_curriculum.json").read_text()
    return curriculum_from_json(json.loads(text))
