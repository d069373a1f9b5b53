"""Shared independent oracles: brute-force partition machinery kept separate
from the implementations it checks."""

from __future__ import annotations

import itertools
from math import comb

import pytest

from crowdcluster.core import Page, Partition


def all_partitions(items: list[str]):
    """Every partition of `items`, via restricted growth strings."""
    n = len(items)
    if n == 0:
        return
    codes = [0] * n

    def rec(i: int, max_used: int):
        if i == n:
            yield list(codes)
            return
        for label in range(max_used + 2):
            codes[i] = label
            yield from rec(i + 1, max(max_used, label))

    for code in rec(1, 0):
        yield Partition(dict(zip(items, code)))


def pair_same_vector(p: Partition) -> dict[tuple[str, str], bool]:
    objs = sorted(p.assignment)
    return {(a, b): p.assignment[a] == p.assignment[b]
            for a, b in itertools.combinations(objs, 2)}


def partition_equal_oracle(p: Partition, q: Partition) -> bool:
    return pair_same_vector(p) == pair_same_vector(q)


def ari_oracle(p: Partition, q: Partition) -> float:
    """ARI from the 2x2 pair-concordance table, an independent derivation
    from the contingency-table route the implementation uses."""
    vp, vq = pair_same_vector(p), pair_same_vector(q)
    n11 = sum(1 for k in vp if vp[k] and vq[k])
    n00 = sum(1 for k in vp if not vp[k] and not vq[k])
    n10 = sum(1 for k in vp if vp[k] and not vq[k])
    n01 = sum(1 for k in vp if not vp[k] and vq[k])
    denom = (n11 + n10) * (n10 + n00) + (n11 + n01) * (n01 + n00)
    if denom == 0:
        return 1.0 if partition_equal_oracle(p, q) else 0.0
    return 2.0 * (n11 * n00 - n10 * n01) / denom


def max_agreement_partition(object_ids: list[str], same: dict[tuple[str, str], bool]):
    """Brute-force argmax of pairwise agreement over all partitions.

    Returns (best partition, whether the argmax is unique).
    """
    best, best_score, unique = None, -1, True
    for candidate in all_partitions(object_ids):
        vec = pair_same_vector(candidate)
        score = sum(1 for k, s in same.items() if vec[k] == s)
        if score > best_score:
            best, best_score, unique = candidate, score, True
        elif score == best_score:
            unique = False
    return best, unique


def unchecked_page(page_id: str, object_ids: tuple[str, ...]) -> Page:
    """Construct a Page bypassing validation, for invalid-plan counterexamples."""
    page = Page.__new__(Page)
    object.__setattr__(page, "page_id", page_id)
    object.__setattr__(page, "object_ids", tuple(object_ids))
    return page


@pytest.fixture
def fake_clock():
    class Clock:
        def __init__(self):
            self.now = 1_000_000.0

        def __call__(self):
            return self.now

        def advance(self, seconds: float):
            self.now += seconds

    return Clock()
