"""Page (task) sampling on a logarithmic budget.

Instead of annotating all C(N,2) object pairs, each object is shown on a
page of size M roughly V = log2(N) * log_M(N) times; pairs are then read off
the within-page groupings. Construction is deterministic for a fixed seed.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

from .core import ObjectRecord, Page
from .errors import CrowdClusterError, ValidationError

DEFAULT_PAGE_SIZE = 6
DEFAULT_REPLICATION = 3
PAGE_SIZE_POLICY = (3, 8)

_REPAIR_PASS_LIMIT = 64


@dataclass(frozen=True)
class SamplingPlan:
    """The full set of pages covering every object `occurrences` times (+1 at most)."""

    n_objects: int
    page_size: int
    occurrences: int
    replication: int
    seed: int
    pages: tuple[Page, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "pages", tuple(self.pages))

    @property
    def page_count(self) -> int:
        return len(self.pages)


def occurrences_per_object(n_objects: int, page_size: int) -> int:
    """ceil(log2(N) * log_M(N)), the per-object sampling rate; never below 1."""
    if n_objects < 2:
        raise ValidationError(f"n_objects must be >= 2, got {n_objects}")
    if page_size < 2:
        raise ValidationError(f"page_size must be >= 2, got {page_size}")
    value = math.log2(n_objects) * (math.log(n_objects) / math.log(page_size))
    # Snap values that are integral up to float noise so ceil() stays exact.
    nearest = round(value)
    if abs(value - nearest) < 1e-9:
        value = nearest
    return max(1, math.ceil(value))


def build_plan(
    objects: list[ObjectRecord],
    page_size: int = DEFAULT_PAGE_SIZE,
    occurrences: int | None = None,
    replication: int = DEFAULT_REPLICATION,
    seed: int = 0,
    size_policy: tuple[int, int] | None = PAGE_SIZE_POLICY,
) -> SamplingPlan:
    """Deterministically build a SamplingPlan for the given objects.

    Creates `occurrences` tokens per object, shuffles them with the seed,
    chunks into pages, repairs intra-page duplicates by swapping tokens
    between pages, and pads the final partial page with extra occurrences
    of the least-covered objects.
    """
    n = len(objects)
    if page_size < 2:
        raise ValidationError(f"page_size must be >= 2, got {page_size}")
    if n < page_size:
        raise ValidationError(f"need at least page_size={page_size} objects, got {n}")
    if size_policy is not None and not size_policy[0] <= page_size <= size_policy[1]:
        raise ValidationError(
            f"page_size {page_size} outside policy range {size_policy}; pass size_policy=None to override"
        )
    if replication < 1:
        raise ValidationError(f"replication must be >= 1, got {replication}")
    ids = [o.object_id for o in objects]
    if len(set(ids)) != len(ids):
        raise ValidationError("object_ids must be unique within a project")

    v = occurrences if occurrences is not None else occurrences_per_object(n, page_size)
    if v < 1:
        raise ValidationError(f"occurrences must be >= 1, got {v}")

    rng = random.Random(seed)
    tokens = sorted(ids) * v
    rng.shuffle(tokens)

    page_count = math.ceil(n * v / page_size)
    slots = [tokens[i * page_size:(i + 1) * page_size] for i in range(page_count)]
    _repair_duplicates(slots)
    _pad_last_page(slots, page_size, sorted(ids))

    pages = tuple(
        Page(page_id=f"page-{i:05d}", object_ids=tuple(chunk)) for i, chunk in enumerate(slots)
    )
    return SamplingPlan(
        n_objects=n, page_size=page_size, occurrences=v,
        replication=replication, seed=seed, pages=pages,
    )


def _repair_duplicates(slots: list[list[str]]) -> None:
    """Swap tokens between pages until no page repeats an object.

    First pass only trades with later pages; if anything is left (near-square
    plans), later passes may trade with any page. Every swap strictly lowers
    the global duplicate count, so the loop terminates.
    """
    for attempt in range(_REPAIR_PASS_LIMIT):
        later_only = attempt == 0
        stuck = 0
        for i, page in enumerate(slots):
            while True:
                dup_slot = _find_duplicate_slot(page)
                if dup_slot is None:
                    break
                if not _swap_out(slots, i, dup_slot, later_only):
                    stuck += 1
                    break
        if stuck == 0 and all(_find_duplicate_slot(p) is None for p in slots):
            return
    raise CrowdClusterError("internal: duplicate repair did not converge")


def _find_duplicate_slot(page: list[str]) -> int | None:
    seen: set[str] = set()
    for idx, obj in enumerate(page):
        if obj in seen:
            return idx
        seen.add(obj)
    return None


def _swap_out(slots: list[list[str]], i: int, dup_slot: int, later_only: bool) -> bool:
    page = slots[i]
    obj = page[dup_slot]
    here = set(page)
    candidates = range(i + 1, len(slots)) if later_only else \
        [j for j in range(len(slots)) if j != i]
    for j in candidates:
        other = slots[j]
        if obj in other:
            continue
        for u, swap_obj in enumerate(other):
            if swap_obj != obj and swap_obj not in here:
                page[dup_slot], other[u] = swap_obj, obj
                return True
    return False


def _pad_last_page(slots: list[list[str]], page_size: int, all_ids: list[str]) -> None:
    last = slots[-1]
    if len(last) == page_size:
        return
    counts = {obj: 0 for obj in all_ids}
    for page in slots:
        for obj in page:
            counts[obj] += 1
    exclude = set(last)
    # Least-covered first; lexicographic id as the deterministic tiebreak.
    fill = sorted((obj for obj in all_ids if obj not in exclude),
                  key=lambda o: (counts[o], o))
    need = page_size - len(last)
    if len(fill) < need:
        raise CrowdClusterError("internal: not enough distinct objects to pad final page")
    last.extend(fill[:need])


def validate_plan(plan: SamplingPlan, size_policy: tuple[int, int] | None = PAGE_SIZE_POLICY) -> list[str]:
    """Check every SamplingPlan invariant; returns violations as data, not errors."""
    violations: list[str] = []
    if size_policy is not None and not size_policy[0] <= plan.page_size <= size_policy[1]:
        violations.append(f"plan: page_size {plan.page_size} outside policy range {size_policy}")
    if plan.occurrences < 1:
        violations.append(f"plan: occurrences {plan.occurrences} < 1")
    if plan.replication < 1:
        violations.append(f"plan: replication {plan.replication} < 1")

    expected_pages = math.ceil(plan.n_objects * plan.occurrences / plan.page_size)
    if plan.page_count != expected_pages:
        violations.append(f"plan: page count {plan.page_count} != ceil(N*V/M) = {expected_pages}")

    counts: dict[str, int] = {}
    for page in plan.pages:
        if len(page.object_ids) != plan.page_size:
            violations.append(f"{page.page_id}: size {len(page.object_ids)} != {plan.page_size}")
        dupes = sorted({o for o in page.object_ids if list(page.object_ids).count(o) > 1})
        if dupes:
            violations.append(f"{page.page_id}: duplicate objects {dupes}")
        for obj in set(page.object_ids):
            counts[obj] = counts.get(obj, 0) + 1

    if len(counts) != plan.n_objects:
        violations.append(f"plan: pages cover {len(counts)} objects, expected {plan.n_objects}")
    for obj, c in sorted(counts.items()):
        if not plan.occurrences <= c <= plan.occurrences + 1:
            violations.append(
                f"plan: object {obj!r} occurs in {c} pages, outside "
                f"[{plan.occurrences}, {plan.occurrences + 1}]"
            )
    return violations
