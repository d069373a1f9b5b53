import collections
import statistics

import numpy as np
import pytest

from crowdcluster.aggregation import AggregationConfig
from crowdcluster.core import Page, Partition, expand_responses
from crowdcluster.errors import ValidationError
from crowdcluster.evaluation import IntruderTask
from crowdcluster.simulation import (SimWorker, WorldSpec, assign_workers, make_world,
                                     run_pipeline, simulate_grouping,
                                     simulate_intruder_pick)


class TestMakeWorld:
    def test_balanced_sizes(self):
        world = make_world(60, 4, seed=0)
        sizes = collections.Counter(world.truth.assignment.values())
        assert sorted(sizes.values()) == [15, 15, 15, 15]

    def test_round_robin_remainders(self):
        world = make_world(7, 3, seed=0)
        sizes = sorted(collections.Counter(world.truth.assignment.values()).values())
        assert sizes == [2, 2, 3]

    def test_deterministic(self):
        assert make_world(20, 3, 2, seed=9) == make_world(20, 3, 2, seed=9)

    def test_too_many_clusters_rejected(self):
        with pytest.raises(ValidationError):
            make_world(3, 4)

    def test_attributes_in_range(self):
        world = make_world(40, 2, attribute_count=3, seed=1)
        assert set(world.attributes.values()) <= {0, 1, 2}


class TestSimWorker:
    def test_unknown_kind_rejected(self):
        with pytest.raises(ValidationError):
            SimWorker(worker_id="w", kind="helpful")

    def test_faithful_must_have_zero_flip(self):
        with pytest.raises(ValidationError):
            SimWorker(worker_id="w", kind="faithful", p_flip=0.2)


def page_of(world: WorldSpec, object_ids, page_id="p0"):
    return Page(page_id=page_id, object_ids=tuple(object_ids))


class TestSimulateGrouping:
    def test_faithful_reproduces_truth_restriction(self):
        world = make_world(12, 3, seed=0)
        ids = world.object_ids()[:6]
        page = page_of(world, ids)
        worker = SimWorker(worker_id="w", kind="faithful", seed=1)
        response = simulate_grouping(worker, page, world)
        for a in ids:
            for b in ids:
                same_truth = world.truth.assignment[a] == world.truth.assignment[b]
                assert (response.groups[a] == response.groups[b]) == same_truth

    def test_splitter_splits_cluster_spanning_attributes(self):
        truth = {f"o{i}": 0 for i in range(4)}
        attrs = {"o0": 0, "o1": 0, "o2": 1, "o3": 1}
        world = WorldSpec(n_objects=4, true_clusters=1, attribute_count=2, seed=0,
                          truth=Partition(truth), attributes=attrs)
        page = page_of(world, sorted(truth))
        response = simulate_grouping(SimWorker(worker_id="w", kind="splitter"), page, world)
        assert response.groups["o0"] == response.groups["o1"]
        assert response.groups["o2"] == response.groups["o3"]
        assert response.groups["o0"] != response.groups["o2"]

    def test_noisy_with_zero_flip_equals_faithful(self):
        world = make_world(12, 3, seed=0)
        page = page_of(world, world.object_ids()[:6])
        faithful = simulate_grouping(SimWorker(worker_id="w", kind="faithful", seed=4), page, world)
        noisy = simulate_grouping(SimWorker(worker_id="w", kind="noisy", p_flip=0.0, seed=4),
                                  page, world)
        assert faithful.groups == noisy.groups

    def test_deterministic_per_worker_seed_and_page(self):
        world = make_world(12, 3, seed=0)
        page = page_of(world, world.object_ids()[:6])
        w = SimWorker(worker_id="w", kind="spammer", seed=7)
        assert simulate_grouping(w, page, world) == simulate_grouping(w, page, world)
        other_page = page_of(world, world.object_ids()[:6], page_id="p1")
        assert (simulate_grouping(w, page, world).groups
                != simulate_grouping(w, other_page, world).groups)

    def test_unknown_object_rejected(self):
        world = make_world(6, 2, seed=0)
        page = Page(page_id="p", object_ids=("obj-0000", "ghost"))
        with pytest.raises(ValidationError, match="unknown"):
            simulate_grouping(SimWorker(worker_id="w"), page, world)

    def test_responses_pass_core_validation(self):
        world = make_world(12, 3, seed=0)
        pages = [page_of(world, world.object_ids()[i:i + 4], page_id=f"p{i}")
                 for i in range(0, 8, 4)]
        responses = [simulate_grouping(SimWorker(worker_id=f"w{k}", kind="spammer", seed=k),
                                       page, world)
                     for k, page in enumerate(pages)]
        pairs = expand_responses(responses, {p.page_id: p for p in pages})
        assert len(pairs) == 2 * 6


class TestSimulateIntruderPick:
    def _task(self, world, cluster, intruder, n_members=5, task_id="t0"):
        members = [o for o, c in world.truth.assignment.items() if c == cluster][:n_members]
        shown = tuple(members + [intruder])
        return IntruderTask(task_id=task_id, cluster_id=cluster,
                            shown_objects=shown, intruder=intruder, seed=0)

    def test_faithful_picks_the_planted_intruder(self):
        world = make_world(30, 3, seed=0)
        outsider = next(o for o, c in world.truth.assignment.items() if c == 1)
        task = self._task(world, cluster=0, intruder=outsider)
        pick = simulate_intruder_pick(SimWorker(worker_id="w", kind="faithful", seed=3),
                                      task, world)
        assert pick.chosen == outsider

    def test_spammer_long_run_accuracy_one_sixth(self):
        world = make_world(30, 3, seed=0)
        outsider = next(o for o, c in world.truth.assignment.items() if c == 1)
        hits = 0
        n = 12000
        for i in range(n):
            task = self._task(world, 0, outsider, task_id=f"t{i}")
            pick = simulate_intruder_pick(SimWorker(worker_id="w", kind="spammer", seed=8),
                                          task, world)
            hits += pick.chosen == outsider
        assert hits / n == pytest.approx(1 / 6, abs=0.01)

    def test_noisy_accuracy_matches_closed_form(self):
        world = make_world(30, 3, seed=0)
        outsider = next(o for o, c in world.truth.assignment.items() if c == 1)
        p_flip = 0.1
        hits = 0
        n = 12000
        for i in range(n):
            task = self._task(world, 0, outsider, task_id=f"n{i}")
            pick = simulate_intruder_pick(
                SimWorker(worker_id="w", kind="noisy", p_flip=p_flip, seed=9), task, world)
            hits += pick.chosen == outsider
        expected = (1 - p_flip) + p_flip / 6
        assert hits / n == pytest.approx(expected, abs=0.01)

    def test_deterministic_per_seeds(self):
        world = make_world(30, 3, seed=0)
        outsider = next(o for o, c in world.truth.assignment.items() if c == 1)
        task = self._task(world, 0, outsider)
        w = SimWorker(worker_id="w", kind="spammer", seed=5)
        assert (simulate_intruder_pick(w, task, world)
                == simulate_intruder_pick(w, task, world))


class TestAssignWorkers:
    def test_three_distinct_workers_per_page(self):
        workers = [SimWorker(worker_id=f"w{i}") for i in range(5)]
        for graders in assign_workers(12, workers, 3):
            assert len({w.worker_id for w in graders}) == 3

    def test_too_few_workers_rejected(self):
        with pytest.raises(ValidationError):
            assign_workers(3, [SimWorker(worker_id="w0")], 3)


class TestRunPipeline:
    def test_noiseless_end_to_end_recovers_truth(self):
        world = make_world(24, 3, seed=2)
        workers = [SimWorker(worker_id=f"w{i}", kind="faithful", seed=40 + i)
                   for i in range(6)]
        metrics = run_pipeline(world, workers, page_size=6, replication=3,
                               config=AggregationConfig(seed=2))
        assert metrics.ari == pytest.approx(1.0)
        assert metrics.cluster_count == 3
        assert metrics.pair_count == metrics.page_count * 15 * 3
        assert metrics.sweep_count > 0

    def test_all_spammer_crowd_has_no_signal(self):
        aris = []
        for seed in range(5):
            world = make_world(30, 3, seed=seed)
            workers = [SimWorker(worker_id=f"s{i}", kind="spammer", seed=70 + i)
                       for i in range(6)]
            try:
                metrics = run_pipeline(world, workers, page_size=6, replication=3,
                                       config=AggregationConfig(seed=seed))
                aris.append(metrics.ari)
            except Exception:
                aris.append(0.0)  # degenerate single-cluster recovery has no signal either
        assert all(abs(a) < 0.1 for a in aris)

    def test_noise_degrades_monotonically(self):
        def median_ari(p_flip):
            values = []
            for seed in range(5):
                world = make_world(30, 3, seed=seed)
                kind = "faithful" if p_flip == 0 else "noisy"
                workers = [SimWorker(worker_id=f"w{i}", kind=kind,
                                     p_flip=p_flip if kind == "noisy" else 0.0,
                                     seed=100 + i) for i in range(6)]
                try:
                    metrics = run_pipeline(world, workers, page_size=6, replication=3,
                                           config=AggregationConfig(seed=seed))
                    values.append(metrics.ari)
                except Exception:
                    values.append(0.0)
            return statistics.median(values)

        medians = [median_ari(p) for p in (0.0, 0.1, 0.3, 0.5)]
        assert all(medians[i] >= medians[i + 1] - 1e-9 for i in range(len(medians) - 1)), medians

    def test_splitter_mix_brackets_cluster_count(self):
        world = make_world(24, 3, attribute_count=2, seed=4)
        workers = ([SimWorker(worker_id=f"f{i}", kind="faithful", seed=20 + i) for i in range(3)]
                   + [SimWorker(worker_id=f"s{i}", kind="splitter", seed=30 + i) for i in range(3)])
        metrics = run_pipeline(world, workers, page_size=6, replication=3,
                               config=AggregationConfig(seed=4))
        assert 3 <= metrics.cluster_count <= 3 * 2
