import math

import numpy as np
import pytest

from polabs import mdp as M
from polabs import nn
from polabs import point_env as P
from polabs import policy_opt as PO
from polabs.metrics import MetricKind

from oracles import vanilla_es_oracle

FAST = dict(iterations=3, sample_size=512, minibatches=20)


def corridor():
    return M.build_gridworld("n_direction", n_directions=5, length=10, horizon=10)


def test_auc_cases():
    assert PO.auc([(0, 2.0), (10, 2.0)]) == 20.0
    assert PO.auc([(0, 0.0), (10, 4.0)]) == 20.0
    with pytest.raises(ValueError):
        PO.auc([])


def test_sigma_grid_matches_table():
    assert PO.SIGMA_GRID[MetricKind.DIST] == (0.05, 0.1, 0.2, 0.3, 0.4, 0.5)
    assert PO.SIGMA_GRID[MetricKind.INFL] == (0.05, 0.1, 0.2, 0.3, 0.4, 0.5)
    assert PO.SIGMA_GRID[MetricKind.VALUE] == (0.05, 0.1, 0.5, 1.0, 2.0, 5.0)


def test_infinite_threshold_equals_vanilla():
    env = corridor()
    van = PO.trpo_run(PO.TrustRegionConfig(metric=None, **FAST), env, 3)
    inf = PO.trpo_run(PO.TrustRegionConfig(metric="pi", sigma=math.inf, **FAST), env, 3)
    assert van.curve == inf.curve
    assert van.net == inf.net


@pytest.mark.parametrize("kind", ["pi", "ppi", "vpi"])
def test_zero_threshold_allows_one_update(kind):
    res = PO.trpo_run(PO.TrustRegionConfig(metric=kind, sigma=0.0, **FAST), corridor(), 0)
    per_iter = np.bincount([e["iteration"] for e in res.log], minlength=3)
    assert np.all(per_iter <= 1)
    assert PO.post_trip_updates(res.log) == 0


def test_jeffreys_estimator_runs():
    res = PO.trpo_run(PO.TrustRegionConfig(metric="ppi", sigma=0.5, estimator="jeffreys", **FAST), corridor(), 1)
    assert all(e["estimate"] >= 0 for e in res.log)


def test_post_trip_counter():
    log = [{"iteration": 0, "tripped": True}, {"iteration": 0, "tripped": False},
           {"iteration": 1, "tripped": False}]
    assert PO.post_trip_updates(log) == 1


def test_tabular_metric_estimate_separates_policies():
    env = corridor()
    pi = M.TabularPolicy.uniform(env.n_states, env.n_actions)
    cfg = PO.TrustRegionConfig(metric="ppi", sample_size=256)
    assert PO.estimate_tabular_metric(env, pi, pi, cfg, 10, np.random.default_rng(0)) >= 0.0
    other = M.TabularPolicy.deterministic(np.zeros(env.n_states, dtype=int), env.n_actions)
    assert PO.estimate_tabular_metric(env, pi, other, cfg, 10, np.random.default_rng(0)) > 0.01


def test_beta_zero_is_vanilla_es_bitwise():
    res = PO.dges_run(PO.EsConfig(beta=0.0, generations=4), P.PointEnv(), 5)
    oracle = vanilla_es_oracle(5, 4)
    assert all(np.array_equal(a, b) for a, b in zip(res.thetas, oracle))


def test_population_default():
    assert PO.EsConfig().population == 50
    with pytest.raises(ValueError):
        PO.EsConfig(beta=-1.0)


def test_flat_reward_ordering_comes_from_diversity():
    rets = np.full(6, -3.0)
    div = np.array([0.3, 0.1, 0.9, 0.0, 0.5, 0.2])
    fit = PO.diversity_fitness(rets, div, 2.0)
    assert np.array_equal(np.argsort(fit), np.argsort(div))

    flat = lambda thetas, rng: np.zeros(thetas.shape[0])  # noqa: E731
    plain = PO.dges_run(PO.EsConfig(beta=0.0, generations=3, population=8), P.PointEnv(), 0, fitness_fn=flat)
    diverse = PO.dges_run(PO.EsConfig(beta=1.0, generations=3, population=8, archive=3), P.PointEnv(), 0,
                          fitness_fn=flat)
    assert np.array_equal(plain.thetas[0], diverse.thetas[0])   # empty archive in generation 1
    assert not np.array_equal(plain.thetas[-1], diverse.thetas[-1])


def test_centered_ranks():
    assert np.allclose(PO.centered_ranks([3.0, 1.0, 2.0]), [0.5, -0.5, 0.0])


def test_stacked_forward_matches_dense_net():
    rng = np.random.default_rng(0)
    nets = [nn.DenseNet.init(PO.POINT_POLICY_SIZES, PO.POINT_POLICY_ACTS, rng) for _ in range(3)]
    thetas = np.stack([nn.flatten(n) for n in nets])
    obs = rng.normal(size=(3, 4, 6))
    out = PO.stacked_forward(thetas, PO.point_policy_spec(), obs)
    for k, net in enumerate(nets):
        assert np.allclose(out[k], net(obs[k]), atol=1e-14)
