"""Cluster recovery from sparse, noisy pairwise grouping evidence.

The model places every object at a latent point in Euclidean space and gives
every worker a logistic same/different classifier over pairs of points,

    p(same | a, b, worker j) = sigmoid(scale_j * <x_a, x_b> + bias_j),

so a worker who groups by a finer personal criterion (large scale, negative
bias) and a coarse one can both be explained by the same embedding. A
truncated mixture prior with closed-form MAP updates supplies the clusters;
components left empty after fitting are pruned, which is what makes the
recovered cluster count dynamic rather than a fixed hyperparameter.

Fitting maximizes a single free-energy objective by coordinate ascent:
exact responsibility and mixture updates, then backtracking gradient ascent
on embeddings and worker parameters. The objective never decreases, which
the test suite checks to 1e-9 per sweep.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import expit, gammaln, logsumexp, xlogy

from .core import PairLabel, Partition
from .errors import NumericalError, ValidationError

_ARMIJO_C = 1e-4
_HALVING_LIMIT = 50
_INNER_ASCENT_LIMIT = 25
DiagnosticsSink = Callable[[dict], None]


@dataclass(frozen=True)
class AggregationConfig:
    """Model sizes, prior scales, and the fitting schedule."""

    dim: int = 4                # embedding dimension
    max_components: int = 20    # mixture truncation; effective count is pruned after the fit
    alpha: float = 0.05         # concentration of the truncated Dirichlet prior
    sigma_x: float = 0.3        # within-component spread of embeddings
    sigma_mu: float = 4.0       # prior scale of component means
    sigma_s: float = 0.3        # prior sd of worker scales around 1
    sigma_tau: float = 0.25     # prior sd of worker biases around 0
    max_sweeps: int = 500
    rel_tol: float = 1e-6
    restarts: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValidationError(f"dim must be >= 1, got {self.dim}")
        if self.max_components < 2:
            raise ValidationError(f"max_components must be >= 2, got {self.max_components}")
        for name in ("sigma_x", "sigma_mu", "sigma_s", "sigma_tau"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if self.alpha <= 0:
            raise ValidationError("alpha must be positive")
        if self.max_sweeps < 1 or self.restarts < 1:
            raise ValidationError("max_sweeps and restarts must be >= 1")
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")


@dataclass(frozen=True)
class PairData:
    """Index-array form of the pair evidence, ready for vectorized math."""

    a: np.ndarray  # (P,) object index of the lexicographically smaller id
    b: np.ndarray  # (P,) object index
    w: np.ndarray  # (P,) worker index
    y: np.ndarray  # (P,) 1.0 for "same", 0.0 for "different"

    @classmethod
    def from_labels(
        cls,
        pairs: Sequence[PairLabel],
        object_ids: Sequence[str],
        worker_ids: Sequence[str],
    ) -> "PairData":
        obj_index = {o: i for i, o in enumerate(object_ids)}
        w_index = {w: i for i, w in enumerate(worker_ids)}
        if len(obj_index) != len(object_ids):
            raise ValidationError("object_ids contain duplicates")
        if len(w_index) != len(worker_ids):
            raise ValidationError("worker_ids contain duplicates")
        a = np.empty(len(pairs), dtype=np.int64)
        b = np.empty(len(pairs), dtype=np.int64)
        w = np.empty(len(pairs), dtype=np.int64)
        y = np.empty(len(pairs), dtype=np.float64)
        for i, p in enumerate(pairs):
            try:
                a[i], b[i], w[i] = obj_index[p.a], obj_index[p.b], w_index[p.worker_id]
            except KeyError as exc:
                raise ValidationError(f"pair references unknown id {exc.args[0]!r}") from exc
            y[i] = 1.0 if p.same else 0.0
        return cls(a=a, b=b, w=w, y=y)

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class ModelState:
    """All latent quantities of one fit; treated as immutable between sweeps."""

    config: AggregationConfig
    object_ids: tuple[str, ...]
    worker_ids: tuple[str, ...]
    embeddings: np.ndarray        # (N, D)
    worker_scale: np.ndarray      # (W,)
    worker_bias: np.ndarray       # (W,)
    means: np.ndarray             # (K, D)
    weights: np.ndarray           # (K,) on the simplex
    responsibilities: np.ndarray  # (N, K), rows on the simplex
    objective: float = float("-inf")


@dataclass(frozen=True)
class ClusteringResult:
    """Final object -> cluster assignment plus a 2-D projection for display."""

    assignment: Partition
    cluster_count: int
    members: Mapping[int, tuple[str, ...]]
    projection: Mapping[str, tuple[float, float]]


def _log_sigmoid(z: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -z)


def pair_probability(state: ModelState, a: int, b: int, j: int) -> float:
    """Probability the model assigns to worker j calling objects a and b "same"."""
    z = state.worker_scale[j] * float(state.embeddings[a] @ state.embeddings[b]) + state.worker_bias[j]
    return float(expit(z))


def _pair_loglik(X, scale, bias, pd: PairData) -> float:
    z = scale[pd.w] * np.einsum("ij,ij->i", X[pd.a], X[pd.b]) + bias[pd.w]
    return float(np.sum(pd.y * _log_sigmoid(z) + (1.0 - pd.y) * _log_sigmoid(-z)))


def _sq_dists(X, means) -> np.ndarray:
    d2 = (X * X).sum(axis=1)[:, None] + (means * means).sum(axis=1)[None, :] - 2.0 * X @ means.T
    return np.maximum(d2, 0.0)


def _log_gauss(X, means, sigma_x) -> np.ndarray:
    dim = X.shape[1]
    return -0.5 * dim * np.log(2.0 * np.pi * sigma_x**2) - _sq_dists(X, means) / (2.0 * sigma_x**2)


def _mixture_bound(X, means, weights, resp, cfg: AggregationConfig) -> float:
    # xlogy keeps the 0 * log 0 entropy terms exact when responsibilities underflow.
    gain = resp * (np.log(weights)[None, :] + _log_gauss(X, means, cfg.sigma_x))
    return float(np.sum(gain) - np.sum(xlogy(resp, resp)))


def _log_priors(scale, bias, means, weights, cfg: AggregationConfig) -> float:
    def gauss(x, mean, sd):
        return float(np.sum(-0.5 * np.log(2.0 * np.pi * sd**2) - (x - mean) ** 2 / (2.0 * sd**2)))

    k = cfg.max_components
    conc = 1.0 + cfg.alpha / k
    dirichlet = float(gammaln(k * conc) - k * gammaln(conc) + (conc - 1.0) * np.sum(np.log(weights)))
    return (
        gauss(scale, 1.0, cfg.sigma_s)
        + gauss(bias, 0.0, cfg.sigma_tau)
        + float(np.sum(-0.5 * np.log(2.0 * np.pi * cfg.sigma_mu**2) - means**2 / (2.0 * cfg.sigma_mu**2)))
        + dirichlet
    )


def _free_energy(X, scale, bias, means, weights, resp, pd: PairData, cfg: AggregationConfig) -> float:
    terms = {
        "pair log-likelihood": _pair_loglik(X, scale, bias, pd),
        "mixture bound": _mixture_bound(X, means, weights, resp, cfg),
        "log-priors": _log_priors(scale, bias, means, weights, cfg),
    }
    for name, value in terms.items():
        if not np.isfinite(value):
            raise NumericalError(f"non-finite objective term: {name} = {value}")
    return sum(terms.values())


def _as_pair_data(state: ModelState, pairs) -> PairData:
    if isinstance(pairs, PairData):
        return pairs
    return PairData.from_labels(pairs, state.object_ids, state.worker_ids)


def objective(state: ModelState, pairs) -> float:
    """Free energy of the state given the pair evidence. Deterministic."""
    pd = _as_pair_data(state, pairs)
    return _free_energy(
        state.embeddings, state.worker_scale, state.worker_bias,
        state.means, state.weights, state.responsibilities, pd, state.config,
    )


def _estep(X, means, weights, sigma_x) -> np.ndarray:
    # The shared Gaussian normalizer cancels in the row normalization.
    logits = np.log(weights)[None, :] - _sq_dists(X, means) / (2.0 * sigma_x**2)
    resp = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
    return resp / resp.sum(axis=1, keepdims=True)


def _map_means(X, resp, cfg: AggregationConfig) -> np.ndarray:
    mass = resp.sum(axis=0)
    return (resp.T @ X) / (mass + cfg.sigma_x**2 / cfg.sigma_mu**2)[:, None]


def _map_weights(resp, cfg: AggregationConfig) -> np.ndarray:
    mass = resp.sum(axis=0)
    weights = mass + cfg.alpha / cfg.max_components
    return weights / weights.sum()


def _pair_grad_x(X, scale, bias, pd: PairData) -> np.ndarray:
    dots = np.einsum("ij,ij->i", X[pd.a], X[pd.b])
    residual = pd.y - expit(scale[pd.w] * dots + bias[pd.w])
    coeff = (residual * scale[pd.w])[:, None]
    contrib_a = coeff * X[pd.b]
    contrib_b = coeff * X[pd.a]
    n = X.shape[0]
    grad = np.empty_like(X)
    for col in range(X.shape[1]):
        grad[:, col] = (np.bincount(pd.a, weights=contrib_a[:, col], minlength=n)
                        + np.bincount(pd.b, weights=contrib_b[:, col], minlength=n))
    return grad


def _gradients(X, scale, bias, means, resp, pd: PairData, cfg: AggregationConfig):
    dots = np.einsum("ij,ij->i", X[pd.a], X[pd.b])
    z = scale[pd.w] * dots + bias[pd.w]
    residual = pd.y - expit(z)

    grad_x = _pair_grad_x(X, scale, bias, pd) - (X - resp @ means) / cfg.sigma_x**2

    n_workers = len(scale)
    grad_scale = np.bincount(pd.w, weights=residual * dots, minlength=n_workers)
    grad_scale -= (scale - 1.0) / cfg.sigma_s**2
    grad_bias = np.bincount(pd.w, weights=residual, minlength=n_workers)
    grad_bias -= bias / cfg.sigma_tau**2
    return grad_x, grad_scale, grad_bias


def _line_search(value_fn, theta: np.ndarray, grad: np.ndarray, f0: float):
    """Backtracking ascent step; returns (theta, f, halvings, failed)."""
    gnorm2 = float(np.sum(grad * grad))
    if not np.isfinite(gnorm2):
        raise NumericalError("non-finite gradient in line search")
    if gnorm2 == 0.0:
        return theta, f0, 0, False
    step = 1.0
    for halvings in range(_HALVING_LIMIT + 1):
        candidate = theta + step * grad
        f = value_fn(candidate)
        if np.isfinite(f) and f >= f0 + _ARMIJO_C * step * gnorm2:
            return candidate, f, halvings, False
        step *= 0.5
    return theta, f0, _HALVING_LIMIT, True


def _ascend_block(value_fn, grad_fn, theta: np.ndarray, f0: float, rel_tol: float):
    """Gradient-ascend one parameter block to conditional near-convergence.

    Repeated backtracking steps until the accepted improvement stalls below
    the sweep tolerance. The block counts as skipped only when the very
    first line search fails, i.e. the block did not move at all this sweep.
    """
    total_halvings = 0
    theta_cur, f_cur = theta, f0
    for iteration in range(_INNER_ASCENT_LIMIT):
        grad = grad_fn(theta_cur)
        theta_new, f_new, halvings, failed = _line_search(value_fn, theta_cur, grad, f_cur)
        total_halvings += halvings
        if failed:
            return theta_cur, f_cur, total_halvings, iteration == 0
        gain = f_new - f_cur
        theta_cur, f_cur = theta_new, f_new
        if gain <= rel_tol * max(1.0, abs(f_cur)):
            break
    return theta_cur, f_cur, total_halvings, False


def _prior_gauss(x, mean, sd) -> float:
    return float(np.sum(-0.5 * np.log(2.0 * np.pi * sd**2) - (x - mean) ** 2 / (2.0 * sd**2)))


def em_step(state: ModelState, pairs, diagnostics: dict | None = None) -> ModelState:
    """One coordinate-ascent sweep; the returned objective never drops below
    the incoming one by more than float noise (1e-9).

    Each M2 block evaluates only the objective terms its parameters touch
    and adds the rest back as precomputed constants, so line searches stay
    cheap; the totals equal the full free energy to float precision.
    """
    pd = _as_pair_data(state, pairs)
    cfg = state.config
    X = state.embeddings
    scale, bias = state.worker_scale, state.worker_bias

    resp = _estep(X, state.means, state.weights, cfg.sigma_x)
    means = _map_means(X, resp, cfg)
    weights = _map_weights(resp, cfg)

    # Terms fixed for the whole sweep (responsibilities, means, weights frozen).
    k = cfg.max_components
    conc = 1.0 + cfg.alpha / k
    prior_mu_dir = (
        float(np.sum(-0.5 * np.log(2.0 * np.pi * cfg.sigma_mu**2) - means**2 / (2.0 * cfg.sigma_mu**2)))
        + float(gammaln(k * conc) - k * gammaln(conc) + (conc - 1.0) * np.sum(np.log(weights)))
    )
    resp_fixed = float(np.sum(resp * np.log(weights)[None, :]) - np.sum(xlogy(resp, resp)))
    gauss_norm = -0.5 * X.shape[1] * np.log(2.0 * np.pi * cfg.sigma_x**2) * X.shape[0]
    resp_mu = resp @ means                                    # (N, D)
    resp_mu2 = float(np.sum(resp * (means * means).sum(axis=1)[None, :]))

    def mixture_of(cand_x: np.ndarray) -> float:
        # sum_ik r_ik ||x_i - mu_k||^2 expands around the fixed responsibilities.
        quad = float(np.sum(cand_x * cand_x)) - 2.0 * float(np.sum(cand_x * resp_mu)) + resp_mu2
        return gauss_norm - quad / (2.0 * cfg.sigma_x**2) + resp_fixed

    halvings: dict[str, int] = {}
    skipped: list[str] = []

    const_x = prior_mu_dir + _prior_gauss(scale, 1.0, cfg.sigma_s) + _prior_gauss(bias, 0.0, cfg.sigma_tau)
    f = _pair_loglik(X, scale, bias, pd) + mixture_of(X) + const_x
    X, f, h, skip = _ascend_block(
        lambda cand: _pair_loglik(cand, scale, bias, pd) + mixture_of(cand) + const_x,
        lambda cand: _pair_grad_x(cand, scale, bias, pd) - (cand - resp_mu) / cfg.sigma_x**2,
        X, f, cfg.rel_tol,
    )
    halvings["embeddings"] = h
    if skip:
        skipped.append("embeddings")

    dots = np.einsum("ij,ij->i", X[pd.a], X[pd.b])
    mixture_final = mixture_of(X)

    def pair_ll_scale(cand_s: np.ndarray) -> float:
        z = cand_s[pd.w] * dots + bias[pd.w]
        return float(np.sum(pd.y * _log_sigmoid(z) + (1.0 - pd.y) * _log_sigmoid(-z)))

    const_s = prior_mu_dir + mixture_final + _prior_gauss(bias, 0.0, cfg.sigma_tau)
    f = pair_ll_scale(scale) + _prior_gauss(scale, 1.0, cfg.sigma_s) + const_s

    def grad_scale(cand_s: np.ndarray) -> np.ndarray:
        residual = pd.y - expit(cand_s[pd.w] * dots + bias[pd.w])
        g = np.bincount(pd.w, weights=residual * dots, minlength=len(cand_s))
        return g - (cand_s - 1.0) / cfg.sigma_s**2

    scale, f, h, skip = _ascend_block(
        lambda cand: pair_ll_scale(cand) + _prior_gauss(cand, 1.0, cfg.sigma_s) + const_s,
        grad_scale, scale, f, cfg.rel_tol,
    )
    halvings["worker_scale"] = h
    if skip:
        skipped.append("worker_scale")

    scaled_dots = scale[pd.w] * dots

    def pair_ll_bias(cand_b: np.ndarray) -> float:
        z = scaled_dots + cand_b[pd.w]
        return float(np.sum(pd.y * _log_sigmoid(z) + (1.0 - pd.y) * _log_sigmoid(-z)))

    const_b = prior_mu_dir + mixture_final + _prior_gauss(scale, 1.0, cfg.sigma_s)
    f = pair_ll_bias(bias) + _prior_gauss(bias, 0.0, cfg.sigma_tau) + const_b

    def grad_bias(cand_b: np.ndarray) -> np.ndarray:
        residual = pd.y - expit(scaled_dots + cand_b[pd.w])
        g = np.bincount(pd.w, weights=residual, minlength=len(cand_b))
        return g - cand_b / cfg.sigma_tau**2

    bias, f, h, skip = _ascend_block(
        lambda cand: pair_ll_bias(cand) + _prior_gauss(cand, 0.0, cfg.sigma_tau) + const_b,
        grad_bias, bias, f, cfg.rel_tol,
    )
    halvings["worker_bias"] = h
    if skip:
        skipped.append("worker_bias")

    if diagnostics is not None:
        diagnostics["line_search_halvings"] = halvings
        diagnostics["skipped_blocks"] = skipped

    return ModelState(
        config=cfg, object_ids=state.object_ids, worker_ids=state.worker_ids,
        embeddings=X, worker_scale=scale, worker_bias=bias,
        means=means, weights=weights, responsibilities=resp, objective=f,
    )


def _init_state(object_ids, worker_ids, config: AggregationConfig, restart: int, pd: PairData) -> ModelState:
    rng = np.random.default_rng([config.seed, restart])
    n, k = len(object_ids), config.max_components
    embeddings = rng.normal(0.0, 0.1, size=(n, config.dim))
    means = rng.normal(0.0, config.sigma_mu, size=(k, config.dim))
    weights = np.full(k, 1.0 / k)
    scale = np.ones(len(worker_ids))
    bias = np.zeros(len(worker_ids))
    resp = _estep(embeddings, means, weights, config.sigma_x)
    f = _free_energy(embeddings, scale, bias, means, weights, resp, pd, config)
    return ModelState(
        config=config, object_ids=tuple(object_ids), worker_ids=tuple(worker_ids),
        embeddings=embeddings, worker_scale=scale, worker_bias=bias,
        means=means, weights=weights, responsibilities=resp, objective=f,
    )


def active_components(state: ModelState) -> int:
    """Components that win the argmax for at least one object."""
    labels = np.argmax(state.responsibilities, axis=1)
    return int(len(np.unique(labels)))


def _component_directions(count: int, dim: int, seed: int) -> np.ndarray:
    """Deterministic well-spread unit vectors: signed axes first, then seeded draws."""
    dirs = np.zeros((count, dim))
    for c in range(count):
        if c < 2 * dim:
            dirs[c, c % dim] = 1.0 if c < dim else -1.0
        else:
            rng = np.random.default_rng([seed, 7919, c])
            v = rng.normal(size=dim)
            dirs[c] = v / np.linalg.norm(v)
    return dirs


def _majority_components(pd: PairData, n_objects: int) -> list[int]:
    """Union objects connected by majority-"same" pair votes; returns labels."""
    votes: dict[tuple[int, int], list[int]] = {}
    for a, b, y in zip(pd.a, pd.b, pd.y):
        key = (int(a), int(b))
        total = votes.setdefault(key, [0, 0])
        total[0] += int(y)
        total[1] += 1
    parent = list(range(n_objects))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for (a, b), (same, total) in sorted(votes.items()):
        if 2 * same > total:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
    roots = [find(i) for i in range(n_objects)]
    order: dict[int, int] = {}
    sizes = {r: roots.count(r) for r in set(roots)}
    for r in sorted(set(roots), key=lambda r: (-sizes[r], r)):
        order[r] = len(order)
    return [order[r] for r in roots]


_GRAPH_INIT_RADIUS = 1.7


def _graph_init(object_ids, worker_ids, config: AggregationConfig, pd: PairData) -> ModelState:
    """Initialization from the majority-vote agreement graph.

    Connected components of the majority-"same" graph become provisional
    clusters placed on well-spread directions. With noiseless evidence this
    starts in the planted basin the cold start provably cannot reach; with
    noisy evidence it simply competes with the random restarts on objective.
    """
    n, k = len(object_ids), config.max_components
    labels = _majority_components(pd, n)
    n_comp = min(max(labels) + 1, k)
    dirs = _component_directions(n_comp, config.dim, config.seed) * _GRAPH_INIT_RADIUS
    comp_of = [min(lab, n_comp - 1) for lab in labels]
    embeddings = np.array([dirs[c] for c in comp_of])
    means = np.zeros((k, config.dim))
    means[:n_comp] = dirs
    counts = np.bincount(comp_of, minlength=k).astype(float)
    weights = (counts + config.alpha / k) / (n + config.alpha)
    weights = weights / weights.sum()
    scale = np.ones(len(worker_ids))
    bias = np.zeros(len(worker_ids))
    resp = _estep(embeddings, means, weights, config.sigma_x)
    f = _free_energy(embeddings, scale, bias, means, weights, resp, pd, config)
    return ModelState(
        config=config, object_ids=tuple(object_ids), worker_ids=tuple(worker_ids),
        embeddings=embeddings, worker_scale=scale, worker_bias=bias,
        means=means, weights=weights, responsibilities=resp, objective=f,
    )


def _sweep_until_stall(
    state: ModelState,
    pd: PairData,
    max_sweeps: int,
    diagnostics: DiagnosticsSink | None = None,
    label: str | None = None,
    restart: int | None = None,
) -> ModelState:
    previous = state.objective
    for sweep in range(max_sweeps):
        record: dict = {"sweep": sweep}
        if restart is not None:
            record["restart"] = restart
        if label is not None:
            record["phase"] = label
        state = em_step(state, pd, diagnostics=record)
        if diagnostics is not None:
            record["objective"] = state.objective
            record["active_components"] = active_components(state)
            diagnostics(record)
        if abs(state.objective - previous) < state.config.rel_tol * max(1.0, abs(previous)):
            break
        previous = state.objective
    return state


_PROPOSAL_SWEEP_BUDGET = 60
_REFINE_MOVE_LIMIT = 8


def _component_members(state: ModelState) -> dict[int, np.ndarray]:
    labels = np.argmax(state.responsibilities, axis=1)
    return {int(k): np.nonzero(labels == k)[0] for k in np.unique(labels)}


def _split_candidates(state: ModelState) -> list[ModelState]:
    """Reseat an unused component onto the worst-fit member of each crowded one.

    This is the standard escape from the uniform-responsibility fixed point
    that cold-started EM cannot leave on its own: a relocated mean with a
    share of the donor's weight lets the next E-step adopt it if the data
    support a split.
    """
    members = _component_members(state)
    used = set(members)
    free = [k for k in range(state.config.max_components) if k not in used]
    if not free:
        return []
    candidates = []
    order = sorted(members, key=lambda k: (-len(members[k]), k))
    for donor in order:
        idx = members[donor]
        if len(idx) < 2:
            continue
        target = free[0]
        dist = np.linalg.norm(state.embeddings[idx] - state.means[donor], axis=1)
        worst = idx[int(np.argmax(dist))]
        means = state.means.copy()
        weights = state.weights.copy()
        means[target] = state.embeddings[worst]
        weights[target] = weights[donor] = state.weights[donor] / 2.0
        candidates.append(replace(state, means=means, weights=weights))
    return candidates


def _merge_candidates(state: ModelState) -> list[ModelState]:
    """Pool the two closest populated components and let the sweeps re-fit."""
    members = _component_members(state)
    used = sorted(members)
    if len(used) < 2:
        return []
    pairs_by_distance = sorted(
        ((float(np.linalg.norm(state.means[k1] - state.means[k2])), k1, k2)
         for i, k1 in enumerate(used) for k2 in used[i + 1:]),
    )
    candidates = []
    for _, k1, k2 in pairs_by_distance[:3]:
        w1, w2 = state.weights[k1], state.weights[k2]
        means = state.means.copy()
        weights = state.weights.copy()
        means[k1] = (w1 * state.means[k1] + w2 * state.means[k2]) / (w1 + w2)
        floor = min(state.weights.min(), 1e-6)
        means[k2] = np.zeros_like(means[k2])
        weights[k1] = w1 + w2 - floor
        weights[k2] = floor
        candidates.append(replace(state, means=means, weights=weights))
    return candidates


def _refine(
    state: ModelState,
    pd: PairData,
    diagnostics: DiagnosticsSink | None = None,
) -> ModelState:
    """Deterministic split/merge proposals, each kept only if the objective improves."""
    cfg = state.config
    for move in range(_REFINE_MOVE_LIMIT):
        accepted = None
        for candidate in _split_candidates(state) + _merge_candidates(state):
            trial = _sweep_until_stall(candidate, pd, _PROPOSAL_SWEEP_BUDGET,
                                       diagnostics, label=f"refine-{move}")
            if trial.objective > state.objective + cfg.rel_tol * max(1.0, abs(state.objective)):
                accepted = trial
                break
        if accepted is None:
            return state
        state = accepted
    return state


def fit(
    pairs: Sequence[PairLabel] | PairData,
    object_ids: Sequence[str],
    worker_ids: Sequence[str],
    config: AggregationConfig | None = None,
    diagnostics: DiagnosticsSink | None = None,
) -> ModelState:
    """Run seeded restarts of the coordinate ascent and keep the best state.

    Deterministic for a fixed config: restart r is seeded with
    (config.seed, r), and ties in the final objective go to the earliest
    restart, bit-identical to sequential execution. After the restarts, the
    best state goes through deterministic split/merge refinement (kept only
    when the objective strictly improves) and a final convergence run.
    """
    config = config or AggregationConfig()
    pd = pairs if isinstance(pairs, PairData) else PairData.from_labels(pairs, object_ids, worker_ids)
    if len(pd) == 0:
        raise ValidationError("at least one pair observation is required")
    if max(pd.a.max(), pd.b.max()) >= len(object_ids) or pd.w.max() >= len(worker_ids):
        raise ValidationError("pair indices out of range")
    if len(object_ids) != len(set(object_ids)) or len(worker_ids) != len(set(worker_ids)):
        raise ValidationError("object_ids and worker_ids must be unique")

    best: ModelState | None = None
    for restart in range(config.restarts):
        state = _init_state(object_ids, worker_ids, config, restart, pd)
        state = _sweep_until_stall(state, pd, config.max_sweeps, diagnostics, restart=restart)
        if best is None or state.objective > best.objective:
            best = state
    assert best is not None
    graph_state = _sweep_until_stall(
        _graph_init(object_ids, worker_ids, config, pd), pd, config.max_sweeps,
        diagnostics, label="graph-init",
    )
    if graph_state.objective > best.objective:
        best = graph_state
    best = _refine(best, pd, diagnostics)
    return _sweep_until_stall(best, pd, config.max_sweeps, diagnostics, label="final")


def extract_clusters(state: ModelState) -> ClusteringResult:
    """Argmax assignment with empty components dropped and labels renumbered
    contiguously by decreasing cluster size (component index breaks ties)."""
    labels = np.argmax(state.responsibilities, axis=1)  # ties resolve to the lowest k
    counts = np.bincount(labels, minlength=state.config.max_components)
    surviving = sorted((k for k in range(len(counts)) if counts[k] > 0),
                       key=lambda k: (-counts[k], k))
    rank = {k: i for i, k in enumerate(surviving)}

    assignment = {obj: rank[int(labels[i])] for i, obj in enumerate(state.object_ids)}
    members: dict[int, tuple[str, ...]] = {
        i: tuple(obj for j, obj in enumerate(state.object_ids) if rank[int(labels[j])] == i)
        for i in range(len(surviving))
    }
    coords = project_2d(state)
    projection = {obj: (float(coords[i, 0]), float(coords[i, 1]))
                  for i, obj in enumerate(state.object_ids)}
    return ClusteringResult(
        assignment=Partition(assignment),
        cluster_count=len(surviving),
        members=members,
        projection=projection,
    )


def project_2d(state: ModelState, diagnostics: list[str] | None = None) -> np.ndarray:
    """Top-2 principal components of the embeddings, (N, 2).

    For dim <= 2 the embeddings are returned as-is, padded with zeros. Axes
    are ordered by variance and the sign is fixed so each component's first
    nonzero loading is positive. A rank-deficient covariance zeroes the
    missing axes and flags the fact in the diagnostics.
    """
    X = state.embeddings
    n, dim = X.shape
    if dim <= 2:
        out = np.zeros((n, 2))
        out[:, :dim] = X
        return out

    centered = X - X.mean(axis=0, keepdims=True)
    _, singular, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:2].copy()
    for row in components:
        nonzero = np.nonzero(np.abs(row) > 1e-12)[0]
        if len(nonzero) and row[nonzero[0]] < 0:
            row *= -1.0
    coords = centered @ components.T

    tol = max(singular[0], 1.0) * 1e-12
    if singular[0] <= tol:
        coords[:] = 0.0
        if diagnostics is not None:
            diagnostics.append("projection degenerate: zero variance, all axes zeroed")
    elif singular[1] <= tol:
        coords[:, 1] = 0.0
        if diagnostics is not None:
            diagnostics.append("projection degenerate: rank < 2, second axis zeroed")
    return coords
