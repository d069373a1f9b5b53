import itertools
import math

import numpy as np
import pytest
from scipy import stats
from scipy.special import gammaln

from conftest import max_agreement_partition, pair_same_vector
from crowdcluster.aggregation import (AggregationConfig, ModelState, PairData,
                                      _estep, _init_state, active_components, em_step,
                                      extract_clusters, fit, objective, pair_probability,
                                      project_2d)
from crowdcluster.core import PairLabel, Partition, partition_equal
from crowdcluster.errors import ValidationError


def complete_pairs(truth: dict[str, int], worker="w0"):
    return [PairLabel(a=a, b=b, worker_id=worker, page_id="p", same=truth[a] == truth[b])
            for a, b in itertools.combinations(sorted(truth), 2)]


def random_state(seed, n=10, dim=3, workers=2, n_pairs=30, config=None):
    rng = np.random.default_rng(seed)
    cfg = config or AggregationConfig(dim=dim, seed=0)
    ids = [f"o{i}" for i in range(n)]
    wids = [f"w{j}" for j in range(workers)]
    a = rng.integers(0, n, n_pairs * 2)
    b = rng.integers(0, n, n_pairs * 2)
    keep = a != b
    lo, hi = np.minimum(a[keep], b[keep])[:n_pairs], np.maximum(a[keep], b[keep])[:n_pairs]
    pd = PairData(a=lo, b=hi, w=rng.integers(0, workers, len(lo)),
                  y=rng.integers(0, 2, len(lo)).astype(float))
    X = rng.normal(0, 1, (n, cfg.dim))
    means = rng.normal(0, 1, (cfg.max_components, cfg.dim))
    raw = rng.uniform(0.5, 1.5, cfg.max_components)
    weights = raw / raw.sum()
    state = ModelState(
        config=cfg, object_ids=tuple(ids), worker_ids=tuple(wids),
        embeddings=X, worker_scale=rng.normal(1, 0.4, workers),
        worker_bias=rng.normal(0, 0.4, workers), means=means, weights=weights,
        responsibilities=_estep(X, means, weights, cfg.sigma_x),
    )
    return state, pd


def reference_free_energy(state: ModelState, pd: PairData) -> float:
    """Straightforward reimplementation of the objective from its definition,
    using scipy.stats densities; the implementation must agree with it."""
    cfg = state.config
    X, s, t = state.embeddings, state.worker_scale, state.worker_bias
    total = 0.0
    for a, b, w, y in zip(pd.a, pd.b, pd.w, pd.y):
        z = s[w] * float(X[a] @ X[b]) + t[w]
        p = 1.0 / (1.0 + math.exp(-z))
        total += math.log(p) if y else math.log(1.0 - p)
    r = state.responsibilities
    for i in range(len(state.object_ids)):
        for k in range(cfg.max_components):
            if r[i, k] <= 0:
                continue
            log_n = stats.multivariate_normal.logpdf(
                X[i], mean=state.means[k], cov=cfg.sigma_x**2 * np.eye(cfg.dim))
            total += r[i, k] * (math.log(state.weights[k]) + log_n - math.log(r[i, k]))
    total += float(np.sum(stats.norm.logpdf(s, 1.0, cfg.sigma_s)))
    total += float(np.sum(stats.norm.logpdf(t, 0.0, cfg.sigma_tau)))
    total += float(np.sum(stats.norm.logpdf(state.means, 0.0, cfg.sigma_mu)))
    conc = 1.0 + cfg.alpha / cfg.max_components
    total += float(gammaln(cfg.max_components * conc) - cfg.max_components * gammaln(conc)
                   + (conc - 1.0) * np.sum(np.log(state.weights)))
    return total


class TestPairProbability:
    def test_zero_embedding_gives_half(self):
        state, _ = random_state(0)
        state.embeddings[0] = 0.0
        state.worker_bias[0] = 0.0
        assert pair_probability(state, 0, 1, 0) == pytest.approx(0.5, abs=1e-12)

    def test_unit_inner_product_gives_logistic_of_one(self):
        state, _ = random_state(1)
        state.embeddings[0] = np.array([1.0, 0.0, 0.0])
        state.embeddings[1] = np.array([1.0, 0.0, 0.0])
        state.worker_scale[0], state.worker_bias[0] = 1.0, 0.0
        assert pair_probability(state, 0, 1, 0) == pytest.approx(0.7310585786, abs=1e-9)

    def test_symmetric_in_objects(self):
        state, _ = random_state(2)
        assert pair_probability(state, 3, 7, 1) == pair_probability(state, 7, 3, 1)


class TestObjective:
    def test_matches_reference_implementation(self):
        for seed in range(3):
            state, pd = random_state(seed)
            assert objective(state, pd) == pytest.approx(
                reference_free_energy(state, pd), rel=1e-9)

    def test_zero_embeddings_pay_log_half_per_pair(self):
        state, pd = random_state(3)
        state.embeddings[:] = 0.0
        state.worker_bias[:] = 0.0
        with_pairs = objective(state, pd)
        without = objective(state, PairData(a=pd.a[:0], b=pd.b[:0], w=pd.w[:0], y=pd.y[:0]))
        assert with_pairs - without == pytest.approx(len(pd) * math.log(0.5), abs=1e-9)

    def test_empty_pair_list_leaves_priors_and_mixture(self):
        state, pd = random_state(4)
        empty = PairData(a=pd.a[:0], b=pd.b[:0], w=pd.w[:0], y=pd.y[:0])
        assert objective(state, empty) == pytest.approx(
            reference_free_energy(state, empty), rel=1e-9)

    def test_deterministic(self):
        state, pd = random_state(5)
        assert objective(state, pd) == objective(state, pd)


class TestEmStep:
    def test_objective_never_decreases(self):
        for seed in range(10):
            state, pd = random_state(seed, n=8, n_pairs=20)
            previous = objective(state, pd)
            for _ in range(15):
                state = em_step(state, pd)
                assert state.objective >= previous - 1e-9
                previous = state.objective

    def test_responsibility_rows_sum_to_one(self):
        state, pd = random_state(11)
        state = em_step(state, pd)
        assert np.allclose(state.responsibilities.sum(axis=1), 1.0, atol=1e-9)
        assert state.weights.sum() == pytest.approx(1.0, abs=1e-12)

    def test_fixed_point_stays_put(self):
        truth = {f"o{i}": i % 2 for i in range(6)}
        pairs = complete_pairs(truth)
        ids, wids = sorted(truth), ["w0"]
        cfg = AggregationConfig(seed=0, restarts=1, max_sweeps=300)
        state = fit(pairs, ids, wids, cfg)
        pd = PairData.from_labels(pairs, ids, wids)
        # sweep all the way down to the local maximum, then one more step
        # must not move the objective beyond float noise
        previous = state.objective
        at_maximum = False
        for _ in range(20000):
            state = em_step(state, pd)
            if abs(state.objective - previous) <= 1e-9:
                at_maximum = True
                break
            previous = state.objective
        assert at_maximum, "never reached a local maximum"
        settled = em_step(state, pd)
        assert abs(settled.objective - state.objective) <= 1e-9

    def test_line_search_diagnostics_present(self):
        state, pd = random_state(12)
        record = {}
        em_step(state, pd, diagnostics=record)
        assert set(record["line_search_halvings"]) == {
            "embeddings", "worker_scale", "worker_bias"}
        assert isinstance(record["skipped_blocks"], list)


class TestGradients:
    def test_analytic_matches_central_differences(self):
        from crowdcluster.aggregation import _free_energy, _gradients
        h = 1e-5
        for seed in range(3):
            state, pd = random_state(seed, n=12, dim=3, workers=3, n_pairs=40)
            cfg = state.config
            gx, gs, gt = _gradients(state.embeddings, state.worker_scale,
                                    state.worker_bias, state.means,
                                    state.responsibilities, pd, cfg)

            def f(X=None, s=None, t=None):
                return _free_energy(
                    state.embeddings if X is None else X,
                    state.worker_scale if s is None else s,
                    state.worker_bias if t is None else t,
                    state.means, state.weights, state.responsibilities, pd, cfg)

            for grad, theta, wrap in [
                (gx, state.embeddings, lambda v: f(X=v)),
                (gs, state.worker_scale, lambda v: f(s=v)),
                (gt, state.worker_bias, lambda v: f(t=v)),
            ]:
                flat = theta.reshape(-1)
                for idx in range(flat.size):
                    plus, minus = theta.copy(), theta.copy()
                    plus.reshape(-1)[idx] += h
                    minus.reshape(-1)[idx] -= h
                    fd = (wrap(plus) - wrap(minus)) / (2 * h)
                    an = grad.reshape(-1)[idx]
                    assert abs(fd - an) <= 1e-4 * max(1.0, abs(fd), abs(an))


class TestFit:
    def test_planted_two_cluster_split_is_recovered(self):
        truth = {"o0": 0, "o1": 1, "o2": 0, "o3": 1}
        result = extract_clusters(fit(complete_pairs(truth), sorted(truth), ["w0"],
                                      AggregationConfig(seed=0)))
        assert result.cluster_count == 2
        assert partition_equal(result.assignment, Partition(truth))

    def test_all_same_collapses_to_one_cluster(self):
        truth = {f"o{i}": 0 for i in range(5)}
        pairs = [PairLabel(a=a, b=b, worker_id="w0", page_id="p", same=True)
                 for a, b in itertools.combinations(sorted(truth), 2)]
        result = extract_clusters(fit(pairs, sorted(truth), ["w0"], AggregationConfig(seed=0)))
        assert result.cluster_count == 1

    def test_deterministic_for_fixed_config(self):
        truth = {f"o{i}": i % 3 for i in range(9)}
        pairs = complete_pairs(truth)
        cfg = AggregationConfig(seed=42)
        one = fit(pairs, sorted(truth), ["w0"], cfg)
        two = fit(pairs, sorted(truth), ["w0"], cfg)
        assert one.objective == two.objective
        assert np.array_equal(one.embeddings, two.embeddings)
        assert partition_equal(extract_clusters(one).assignment,
                               extract_clusters(two).assignment)

    def test_no_pairs_rejected(self):
        with pytest.raises(ValidationError):
            fit([], ["a", "b"], ["w0"], AggregationConfig())

    def test_unknown_ids_rejected(self):
        pairs = [PairLabel(a="a", b="b", worker_id="w9", page_id="p", same=True)]
        with pytest.raises(ValidationError):
            fit(pairs, ["a", "b"], ["w0"], AggregationConfig())

    def test_worker_permutation_leaves_assignment_invariant(self):
        truth = {f"o{i}": i % 2 for i in range(8)}
        pairs = (complete_pairs(truth, worker="wa") + complete_pairs(truth, worker="wb")
                 + complete_pairs(truth, worker="wc"))
        cfg = AggregationConfig(seed=3)
        order1 = ["wa", "wb", "wc"]
        order2 = ["wc", "wa", "wb"]
        fit1 = fit(pairs, sorted(truth), order1, cfg)
        fit2 = fit(pairs, sorted(truth), order2, cfg)
        assert partition_equal(extract_clusters(fit1).assignment,
                               extract_clusters(fit2).assignment)
        lookup2 = dict(zip(order2, fit2.worker_scale))
        for wid, s1 in zip(order1, fit1.worker_scale):
            assert s1 == pytest.approx(lookup2[wid], rel=1e-6, abs=1e-8)

    def test_small_instance_oracle(self):
        # Clustering-shaped planted partitions of up to 6 objects: the engine
        # must land on the brute-force max-agreement partition.
        shapes = [
            [0, 1, 0, 1], [0, 1, 1, 1], [0, 1, 0, 1, 1], [0, 1, 2, 0, 1, 2],
            [0, 1, 0, 1, 0, 1], [0, 1, 0, 1, 1, 1], [0] * 6, [0, 1, 1, 1, 1, 1],
        ]
        for labels in shapes:
            ids = [f"o{i}" for i in range(len(labels))]
            truth = dict(zip(ids, labels))
            pairs = complete_pairs(truth)
            same = {(p.a, p.b): p.same for p in pairs}
            expected, unique = max_agreement_partition(ids, same)
            assert unique, "planted oracle must be unique for noiseless pairs"
            result = extract_clusters(fit(pairs, ids, ["w0"], AggregationConfig(seed=0)))
            assert partition_equal(result.assignment, expected), labels


class TestExtractClusters:
    def _state_with_resp(self, resp):
        n, k = resp.shape
        cfg = AggregationConfig(dim=2, max_components=k, seed=0)
        return ModelState(
            config=cfg, object_ids=tuple(f"o{i}" for i in range(n)),
            worker_ids=("w0",), embeddings=np.zeros((n, 2)),
            worker_scale=np.ones(1), worker_bias=np.zeros(1),
            means=np.zeros((k, 2)), weights=np.full(k, 1.0 / k),
            responsibilities=resp,
        )

    def test_relabeled_by_decreasing_size(self):
        resp = np.zeros((6, 20))
        resp[0, 7] = resp[1, 7] = resp[2, 7] = 1.0   # size 3 -> label 0
        resp[3, 2] = resp[4, 2] = 1.0                # size 2 -> label 1
        resp[5, 13] = 1.0                            # size 1 -> label 2
        result = extract_clusters(self._state_with_resp(resp))
        assert result.cluster_count == 3
        assignment = result.assignment.assignment
        assert [assignment[f"o{i}"] for i in range(6)] == [0, 0, 0, 1, 1, 2]
        assert result.members[0] == ("o0", "o1", "o2")

    def test_single_peaked_component(self):
        resp = np.zeros((4, 20))
        resp[:, 5] = 1.0
        assert extract_clusters(self._state_with_resp(resp)).cluster_count == 1

    def test_tie_goes_to_lower_component_index(self):
        resp = np.zeros((2, 20))
        resp[0, 3] = resp[0, 9] = 0.5
        resp[1, 9] = 1.0
        result = extract_clusters(self._state_with_resp(resp))
        # object 0 ties between components 3 and 9 -> takes 3
        assert result.assignment.assignment["o0"] != result.assignment.assignment["o1"]


class TestProject2d:
    def _state(self, X):
        n, d = X.shape
        cfg = AggregationConfig(dim=d, seed=0)
        k = cfg.max_components
        return ModelState(
            config=cfg, object_ids=tuple(f"o{i}" for i in range(n)), worker_ids=("w0",),
            embeddings=X, worker_scale=np.ones(1), worker_bias=np.zeros(1),
            means=np.zeros((k, d)), weights=np.full(k, 1.0 / k),
            responsibilities=np.full((n, k), 1.0 / k),
        )

    def test_two_dimensional_embeddings_pass_through(self):
        X = np.random.default_rng(0).normal(size=(7, 2))
        assert np.array_equal(project_2d(self._state(X)), X)

    def test_one_dimensional_padded_with_zeros(self):
        X = np.random.default_rng(0).normal(size=(5, 1))
        coords = project_2d(self._state(X))
        assert np.array_equal(coords[:, 0], X[:, 0]) and np.all(coords[:, 1] == 0)

    def test_identical_embeddings_project_identically(self):
        X = np.ones((6, 4))
        coords = project_2d(self._state(X))
        assert np.allclose(coords, coords[0])

    def test_rank_one_data_zeroes_second_axis(self):
        direction = np.array([1.0, 2.0, -1.0, 0.5])
        X = np.outer(np.arange(8, dtype=float), direction)
        diagnostics = []
        coords = project_2d(self._state(X), diagnostics=diagnostics)
        assert np.all(coords[:, 1] == 0.0)
        assert any("rank" in msg for msg in diagnostics)

    def test_output_count_matches_objects(self):
        X = np.random.default_rng(1).normal(size=(9, 5))
        assert project_2d(self._state(X)).shape == (9, 2)

    def test_variance_ordering_and_sign_convention(self):
        rng = np.random.default_rng(2)
        X = np.column_stack([rng.normal(0, 5, 40), rng.normal(0, 1, 40),
                             rng.normal(0, 0.1, 40)])
        coords = project_2d(self._state(X))
        assert coords[:, 0].var() >= coords[:, 1].var()


class TestActiveComponents:
    def test_counts_argmax_winners(self):
        state, pd = random_state(7)
        assert 1 <= active_components(state) <= state.config.max_components
