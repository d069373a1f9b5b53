"""Domain types, partition arithmetic, and clustering-comparison metrics.

Everything here is immutable after construction and every operation is pure,
so the module is safe to use from any number of threads.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from math import comb
from typing import Iterable, Mapping

from .errors import ValidationError


@dataclass(frozen=True)
class ObjectRecord:
    """One clusterable object. The payload is displayed, never inspected."""

    object_id: str
    payload_uri: str
    metadata: Mapping[str, str] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if not self.object_id:
            raise ValidationError("object_id must be non-empty")
        if not self.payload_uri:
            raise ValidationError(f"object {self.object_id!r}: payload_uri must be non-empty")


@dataclass(frozen=True)
class Page:
    """One unit of crowd work: an ordered display of at least two objects."""

    page_id: str
    object_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "object_ids", tuple(self.object_ids))
        if len(self.object_ids) < 2:
            raise ValidationError(f"page {self.page_id!r}: must show at least 2 objects")
        if len(set(self.object_ids)) != len(self.object_ids):
            dupes = sorted({o for o in self.object_ids if self.object_ids.count(o) > 1})
            raise ValidationError(f"page {self.page_id!r}: duplicate object_ids {dupes}")

    @property
    def size(self) -> int:
        return len(self.object_ids)


@dataclass(frozen=True)
class GroupingResponse:
    """One worker's partition of one page, recorded as arbitrary group labels.

    Group labels are palette indices chosen by the worker; only equality
    between them is meaningful.
    """

    page_id: str
    worker_id: str
    groups: Mapping[str, int]

    def __post_init__(self) -> None:
        object.__setattr__(self, "groups", dict(self.groups))
        if not self.groups:
            raise ValidationError(f"response for page {self.page_id!r}: empty grouping")


@dataclass(frozen=True, order=True)
class PairLabel:
    """The canonical same/different observation for one object pair."""

    a: str
    b: str
    worker_id: str
    page_id: str
    same: bool

    def __post_init__(self) -> None:
        if not self.a < self.b:
            raise ValidationError(f"pair ({self.a!r}, {self.b!r}) not in canonical order")


@dataclass(frozen=True)
class Partition:
    """An object -> cluster-index assignment; indices are labels, not values."""

    assignment: Mapping[str, int]

    def __post_init__(self) -> None:
        object.__setattr__(self, "assignment", dict(self.assignment))
        if not self.assignment:
            raise ValidationError("partition must cover at least one object")

    @property
    def object_ids(self) -> frozenset[str]:
        return frozenset(self.assignment)

    def blocks(self) -> frozenset[frozenset[str]]:
        """The induced equivalence classes, independent of label identity."""
        by_label: dict[int, set[str]] = {}
        for obj, label in self.assignment.items():
            by_label.setdefault(label, set()).add(obj)
        return frozenset(frozenset(members) for members in by_label.values())

    def normalized(self) -> "Partition":
        """Relabel clusters 0..k-1 by first appearance in sorted object order."""
        mapping: dict[int, int] = {}
        out: dict[str, int] = {}
        for obj in sorted(self.assignment):
            label = self.assignment[obj]
            if label not in mapping:
                mapping[label] = len(mapping)
            out[obj] = mapping[label]
        return Partition(out)

    @classmethod
    def from_groups(cls, groups: Mapping[str, int]) -> "Partition":
        return cls(dict(groups))


def canonical_pairs(response: GroupingResponse, page: Page) -> list[PairLabel]:
    """Expand one grouping response into its C(M,2) same/different pair labels.

    Pairs are emitted in lexicographic order of (a, b) with a < b; ``same``
    is true iff both objects carry an equal group label.
    """
    got = set(response.groups)
    expected = set(page.object_ids)
    if got != expected:
        missing = sorted(expected - got)
        extra = sorted(got - expected)
        raise ValidationError(
            f"response for page {page.page_id!r} does not cover it exactly: "
            f"missing={missing} extra={extra}"
        )
    labels = response.groups
    return [
        PairLabel(a=a, b=b, worker_id=response.worker_id, page_id=page.page_id,
                  same=labels[a] == labels[b])
        for a, b in itertools.combinations(sorted(page.object_ids), 2)
    ]


def _check_same_objects(p: Partition, q: Partition) -> None:
    if p.object_ids != q.object_ids:
        only_p = sorted(p.object_ids - q.object_ids)
        only_q = sorted(q.object_ids - p.object_ids)
        raise ValidationError(f"partitions cover different objects: only_p={only_p} only_q={only_q}")


def partition_equal(p: Partition, q: Partition) -> bool:
    """True iff p and q induce the same equivalence relation (labels ignored)."""
    _check_same_objects(p, q)
    return p.blocks() == q.blocks()


def _contingency(p: Partition, q: Partition) -> tuple[list[list[int]], list[int], list[int]]:
    p_blocks = sorted((sorted(b) for b in p.blocks()), key=lambda b: b[0])
    q_blocks = sorted((sorted(b) for b in q.blocks()), key=lambda b: b[0])
    q_index = {obj: j for j, block in enumerate(q_blocks) for obj in block}
    table = [[0] * len(q_blocks) for _ in p_blocks]
    for i, block in enumerate(p_blocks):
        for obj in block:
            table[i][q_index[obj]] += 1
    return table, [len(b) for b in p_blocks], [len(b) for b in q_blocks]


def adjusted_rand_index(p: Partition, q: Partition) -> float:
    """Chance-corrected pair-counting agreement between two partitions."""
    _check_same_objects(p, q)
    n = len(p.assignment)
    if n < 2:
        raise ValidationError("adjusted_rand_index needs at least 2 objects")
    table, row_sizes, col_sizes = _contingency(p, q)
    index = sum(comb(nij, 2) for row in table for nij in row)
    sum_rows = sum(comb(a, 2) for a in row_sizes)
    sum_cols = sum(comb(b, 2) for b in col_sizes)
    expected = sum_rows * sum_cols / comb(n, 2)
    max_index = (sum_rows + sum_cols) / 2
    if max_index == expected:
        # Both partitions trivial (all singletons or all-in-one on each side).
        return 1.0 if partition_equal(p, q) else 0.0
    return (index - expected) / (max_index - expected)


def expand_responses(
    responses: Iterable[GroupingResponse],
    pages_by_id: Mapping[str, Page] | None = None,
) -> list[PairLabel]:
    """Expand grouping responses into the canonical pair-label evidence set.

    When pages are not supplied, each response's own key set defines its page
    (stored responses cover their page exactly by construction). Enforces the
    (a, b, worker, page) uniqueness invariant across the whole collection.
    """
    out: list[PairLabel] = []
    seen: set[tuple[str, str, str, str]] = set()
    for response in responses:
        if pages_by_id is None:
            page = Page(page_id=response.page_id, object_ids=tuple(sorted(response.groups)))
        else:
            if response.page_id not in pages_by_id:
                raise ValidationError(f"response references unknown page {response.page_id!r}")
            page = pages_by_id[response.page_id]
        for pair in canonical_pairs(response, page):
            key = (pair.a, pair.b, pair.worker_id, pair.page_id)
            if key in seen:
                raise ValidationError(f"duplicate pair observation {key}")
            seen.add(key)
            out.append(pair)
    return out


def pair_count(page_size: int) -> int:
    """Number of unordered object pairs induced by one page of the given size."""
    return comb(page_size, 2)


def distinct_objects(pages: Iterable[Page]) -> set[str]:
    seen: set[str] = set()
    for page in pages:
        seen.update(page.object_ids)
    return seen
