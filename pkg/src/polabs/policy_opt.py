"""Metric-constrained policy optimization and diversity-guided evolution strategies."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import mdp as M
from . import nn
from . import point_env as P
from .kernels import kernel_sums
from .metrics import MetricKind, jeffreys_metric
from .mmd import KernelSpec, median_bandwidth, mmd2_weighted, unique_rows

# per-metric threshold search grids
SIGMA_GRID = {
    MetricKind.DIST: (0.05, 0.1, 0.2, 0.3, 0.4, 0.5),
    MetricKind.INFL: (0.05, 0.1, 0.2, 0.3, 0.4, 0.5),
    MetricKind.VALUE: (0.05, 0.1, 0.5, 1.0, 2.0, 5.0),
}


def auc(curve) -> float:
    """Trapezoidal area under ``[(step, value), ...]``."""
    arr = np.asarray(curve, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("empty curve")
    arr = arr.reshape(-1, 2)
    if arr.shape[0] == 1:
        return 0.0
    x, y = arr[:, 0], arr[:, 1]
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


def _one_hot(idx, n):
    out = np.zeros((idx.shape[0], n))
    out[np.arange(idx.shape[0]), idx] = 1.0
    return out


# --- trust-region policy optimization on tabular worlds ---------------------------------


@dataclass(frozen=True)
class TrustRegionConfig:
    metric: MetricKind | None = MetricKind.DIST   # None runs the unconstrained baseline
    sigma: float = math.inf
    sample_size: int = 4096
    minibatches: int = 100
    minibatch_size: int = 64
    eval_rollouts: int = 5
    iterations: int = 15
    hidden: int = 16
    lr: float = 1e-2
    estimator: str = "mmd"    # or "jeffreys"
    kernel: KernelSpec = KernelSpec()

    def __post_init__(self):
        if self.metric is not None:
            object.__setattr__(self, "metric", MetricKind(self.metric))
            if not self.metric.has_mmd:
                raise ValueError(f"no trust-region estimator for metric {self.metric.value}")
        if not self.sigma >= 0:
            raise ValueError(f"invalid threshold {self.sigma}")
        if self.estimator not in ("mmd", "jeffreys"):
            raise ValueError(f"unknown estimator {self.estimator!r}")


@dataclass
class TrustRegionResult:
    curve: list                  # (env steps, mean episode return) per outer iteration
    log: list                    # one dict per applied minibatch update
    trips: list                  # (iteration, update index) of each constraint trip
    net: nn.DenseNet = field(repr=False, default=None)


def tabular_policy_net(n_states, n_actions, hidden, rng) -> nn.DenseNet:
    return nn.DenseNet.init([n_states, hidden, hidden, n_actions], ["tanh", "tanh", "softmax"], rng)


def _policy_table(net, n_states):
    return M.TabularPolicy(net(np.eye(n_states)))


def _episodes(mdp, pi, n_episodes, horizon, rng):
    s, a, r, s2, lengths = M.rollout_batch(mdp, pi, horizon, n_episodes, rng)
    mask = np.arange(horizon)[None, :] < lengths[:, None]
    G = np.zeros_like(r)
    acc = np.zeros(n_episodes)
    for t in range(horizon - 1, -1, -1):
        acc = np.where(mask[:, t], r[:, t] + mdp.discount * acc, 0.0)
        G[:, t] = acc
    return s[mask], a[mask], s2[mask], G[mask], r.sum(axis=1)


def _tabular_samples(kind, s, a, s2, G):
    other = {MetricKind.DIST: a, MetricKind.INFL: s2, MetricKind.VALUE: G}[kind]
    return np.column_stack([s, other])


def _tabular_features(mdp, kind, rows):
    # one-hot state, then one-hot action / next state, or the raw return
    S = mdp.n_states
    s = rows[:, 0].astype(np.int64)
    if kind is MetricKind.VALUE:
        return np.hstack([_one_hot(s, S), rows[:, 1:]])
    width = mdp.n_actions if kind is MetricKind.DIST else S
    return np.hstack([_one_hot(s, S), _one_hot(rows[:, 1].astype(np.int64), width)])


def estimate_tabular_metric(mdp, pi_a, pi_b, cfg: TrustRegionConfig, horizon, rng) -> float:
    """Sample-based distance between two tabular policies from ``cfg.eval_rollouts`` episodes each."""
    rng = np.random.default_rng(rng)
    sides = []
    for pi in (pi_a, pi_b):
        s, a, s2, G, _ = _episodes(mdp, pi, cfg.eval_rollouts, horizon, rng)
        sides.append(_tabular_samples(cfg.metric, s, a, s2, G))
    if cfg.estimator == "jeffreys":
        if cfg.metric is MetricKind.VALUE:
            sides = [np.column_stack([x[:, 0], np.round(x[:, 1], 1)]) for x in sides]
        return jeffreys_metric(sides[0], sides[1], cfg.metric)
    # duplicate rows are collapsed before one-hot encoding; the estimate is unchanged
    (ux, cx), (uy, cy) = (unique_rows(x) for x in sides)
    return mmd2_weighted(_tabular_features(mdp, cfg.metric, ux), cx,
                         _tabular_features(mdp, cfg.metric, uy), cy, cfg.kernel)


def _pg_grads(net, S, states, actions, adv):
    probs, tape = net.forward(np.eye(S)[states])
    up = np.zeros_like(probs)
    rows = np.arange(states.shape[0])
    up[rows, actions] = -adv / (probs[rows, actions] * states.shape[0])
    return nn.backward(tape, up)[0]


def trpo_run(cfg: TrustRegionConfig, env: M.TabularMdp, seed: int, on_iteration=None) -> TrustRegionResult:
    """REINFORCE updates whose inner loop halts once the policy moves farther than ``sigma``.

    Training and metric-estimation draws use separate random streams, so an
    inactive constraint reproduces the unconstrained run exactly.
    ``on_iteration(it, net)`` is called after every outer iteration.
    """
    S, A = env.n_states, env.n_actions
    horizon = int(env.info.get("horizon", 4 * S))
    train_rng, metric_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    net = tabular_policy_net(S, A, cfg.hidden, train_rng)
    opt = nn.AdamState(net.params(), lr=cfg.lr)
    n_episodes = -(-cfg.sample_size // horizon)
    steps = 0
    curve, log, trips = [], [], []
    for it in range(cfg.iterations):
        pi_old = _policy_table(net, S)
        s, a, _, G, ep_returns = _episodes(env, pi_old, n_episodes, horizon, train_rng)
        steps += s.shape[0]
        curve.append((steps, float(ep_returns.mean())))
        adv = G - G.mean()
        order = np.zeros(0, dtype=np.int64)
        for k in range(cfg.minibatches):
            if order.size < cfg.minibatch_size:
                order = np.concatenate([order, train_rng.permutation(s.shape[0])])
            mb, order = order[:cfg.minibatch_size], order[cfg.minibatch_size:]
            nn.adam_step(opt, _pg_grads(net, S, s[mb], a[mb], adv[mb]), [net])
            entry = {"iteration": it, "update": k, "estimate": None, "tripped": False}
            log.append(entry)
            if cfg.metric is None or math.isinf(cfg.sigma):
                continue
            est = estimate_tabular_metric(env, _policy_table(net, S), pi_old, cfg, horizon, metric_rng)
            entry["estimate"] = est
            if est > cfg.sigma:
                entry["tripped"] = True
                trips.append((it, k))
                break
        if on_iteration is not None:
            on_iteration(it, net)
    final = _policy_table(net, S)
    _, _, _, _, ep_returns = _episodes(env, final, n_episodes, horizon, train_rng)
    curve.append((steps, float(ep_returns.mean())))
    return TrustRegionResult(curve, log, trips, net)


def post_trip_updates(log) -> int:
    """Number of updates logged after a trip within the same outer iteration (should be 0)."""
    tripped, bad = set(), 0
    for entry in log:
        if entry["iteration"] in tripped:
            bad += 1
        if entry["tripped"]:
            tripped.add(entry["iteration"])
    return bad


# --- evolution strategies on the point task ----------------------------------------------

POINT_POLICY_SIZES = [P.STATE_DIM, 32, 32, P.ACTION_DIM]
POINT_POLICY_ACTS = ["relu", "relu", "tanh"]


def point_policy_spec():
    return [(i, o, a) for i, o, a in zip(POINT_POLICY_SIZES[:-1], POINT_POLICY_SIZES[1:], POINT_POLICY_ACTS)]


def stacked_forward(thetas, spec, obs):
    """Evaluate ``K`` flat-parameter policies on ``K`` observation batches ``(K, n, d)``."""
    h = obs
    pos = 0
    for fan_in, fan_out, act in spec:
        W = thetas[:, pos:pos + fan_in * fan_out].reshape(-1, fan_in, fan_out)
        pos += fan_in * fan_out
        b = thetas[:, pos:pos + fan_out]
        pos += fan_out
        h = nn._apply(nn.Act(act), np.einsum("knd,kde->kne", h, W) + b[:, None, :])
    return h


def run_population(env: P.PointEnv, thetas, spec, episodes: int, rng) -> P.PointBatch:
    """Roll out every parameter vector for ``episodes`` episodes; results are member-major."""
    K = thetas.shape[0]

    def policy(obs):
        return stacked_forward(thetas, spec, obs.reshape(K, episodes, -1)).reshape(K * episodes, -1)

    return P.run(env, policy, K * episodes, rng)


def point_samples(batch: P.PointBatch, kind: MetricKind, member: int, episodes: int = 1, return_scale: float = 1.0):
    sl = slice(member * episodes, (member + 1) * episodes)
    s = batch.states[sl].reshape(-1, P.STATE_DIM)
    if kind is MetricKind.DIST:
        return np.hstack([s, batch.actions[sl].reshape(-1, P.ACTION_DIM)])
    if kind is MetricKind.INFL:
        return np.hstack([s, batch.next_states[sl].reshape(-1, P.STATE_DIM)])
    return np.hstack([s, batch.returns[sl].reshape(-1, 1) / return_scale])


@dataclass(frozen=True)
class EsConfig:
    population: int = 50
    noise_std: float = 0.05
    lr: float = 0.01
    beta: float = 0.0
    archive: int = 50
    metric: MetricKind = MetricKind.INFL
    generations: int = 120
    metric_episodes: int = 1
    kernel: KernelSpec = KernelSpec()
    return_scale: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "metric", MetricKind(self.metric))
        if not self.metric.has_mmd:
            raise ValueError(f"no sample estimator for metric {self.metric.value}")
        if self.beta < 0:
            raise ValueError("diversity weight beta must be nonnegative")
        if self.population < 2:
            raise ValueError("population must be at least 2")
        if self.archive < 1:
            raise ValueError("archive capacity must be at least 1")


@dataclass
class EsResult:
    curve: list          # (generation, mean return, final distance to goal) of the mean policy
    thetas: list         # mean parameters after each generation
    final_distance: float


def centered_ranks(x) -> np.ndarray:
    """Ranks mapped to [-0.5, 0.5]; ties are broken by index for determinism."""
    x = np.asarray(x)
    ranks = np.empty(x.size)
    ranks[np.argsort(x, kind="stable")] = np.arange(x.size)
    return ranks / (x.size - 1) - 0.5


class _Archive:
    """FIFO of ancestor sample sets."""

    def __init__(self, capacity):
        self.items = deque(maxlen=capacity)

    def add(self, points):
        self.items.append(points)

    def __len__(self):
        return len(self.items)

    def diversity(self, members, bandwidths) -> np.ndarray:
        """Summed squared MMD of each member sample set to every archived ancestor."""
        anc_self = [kernel_sums(a, a, bandwidths) / (a.shape[0] ** 2) for a in self.items]
        out = np.zeros(len(members))
        for k, pts in enumerate(members):
            n = pts.shape[0]
            kxx = kernel_sums(pts, pts, bandwidths) / (n * n)
            for anc, kyy in zip(self.items, anc_self):
                kxy = kernel_sums(pts, anc, bandwidths) / (n * anc.shape[0])
                out[k] += float(np.mean(kxx + kyy - 2.0 * kxy))
        return out


def diversity_fitness(returns, diversity, beta: float) -> np.ndarray:
    returns = np.asarray(returns, dtype=np.float64)
    if beta == 0.0:
        return returns
    return returns + beta * np.asarray(diversity, dtype=np.float64)


def dges_run(cfg: EsConfig, env: P.PointEnv, seed: int, fitness_fn=None, on_generation=None) -> EsResult:
    """Evolution strategy whose fitness adds ``beta`` times the summed distance to archived ancestors.

    With ``beta == 0`` no diversity rollouts are made and the run is plain ES.
    ``fitness_fn(thetas, rng)`` replaces the episode return when given.
    """
    spec = point_policy_spec()
    es_rng, eval_rng, div_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
    theta = nn.flatten(nn.DenseNet.init(POINT_POLICY_SIZES, POINT_POLICY_ACTS, es_rng))
    opt = nn.AdamState([theta], lr=cfg.lr)
    archive = _Archive(cfg.archive)
    curve, history = [], []
    N = cfg.population
    for gen in range(cfg.generations):
        eps = es_rng.standard_normal((N, theta.size))
        members = theta[None, :] + cfg.noise_std * eps
        if fitness_fn is None:
            batch = run_population(env, members, spec, 1, es_rng)
            returns = batch.episode_returns
        else:
            returns = np.asarray(fitness_fn(members, es_rng), dtype=np.float64)
        diversity = np.zeros(N)
        if cfg.beta > 0:
            div_batch = run_population(env, members, spec, cfg.metric_episodes, div_rng)
            pts = [point_samples(div_batch, cfg.metric, k, cfg.metric_episodes, cfg.return_scale)
                   for k in range(N)]
            if len(archive):
                # one bandwidth per generation keeps the members' bonuses comparable
                base = cfg.kernel.base_bandwidth or median_bandwidth(
                    np.vstack(pts[: N // 2]), np.vstack(pts[N // 2:]))
                diversity = archive.diversity(pts, cfg.kernel.bandwidths(base))
        fitness = diversity_fitness(returns, diversity, cfg.beta)
        grad = centered_ranks(fitness) @ eps / (N * cfg.noise_std)
        nn.adam_step(opt, [-grad])
        if cfg.beta > 0:
            anc = run_population(env, theta[None, :], spec, cfg.metric_episodes, div_rng)
            archive.add(point_samples(anc, cfg.metric, 0, cfg.metric_episodes, cfg.return_scale))
        ev = run_population(env, theta[None, :], spec, 5, eval_rng)
        curve.append((gen + 1, float(ev.episode_returns.mean()), float(P.final_distance(env, ev).mean())))
        history.append(theta.copy())
        if on_generation is not None:
            on_generation(gen, theta.copy(), curve[-1])
    return EsResult(curve, history, curve[-1][2] if curve else math.nan)
