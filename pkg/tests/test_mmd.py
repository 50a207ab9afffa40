import math
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from polabs import _accel, kernels, mmd
from polabs import mdp as M
from polabs.metrics import MetricKind, d_ppi_exact
from polabs.mmd import KernelSpec, SampleSet, SampleTag

ONE = KernelSpec(base_bandwidth=2.0, count=1)


def test_gaussian_kernel():
    assert mmd.gaussian_kernel([1.0, 2.0], [1.0, 2.0], 0.7) == 1.0
    assert mmd.gaussian_kernel([0.0], [2.0], 2.0) == pytest.approx(math.exp(-0.5), abs=1e-15)
    rng = np.random.default_rng(0)
    for _ in range(20):
        x, y = rng.normal(size=3), rng.normal(size=3)
        assert mmd.gaussian_kernel(x, y, 1.3) == mmd.gaussian_kernel(y, x, 1.3)
    with pytest.raises(ValueError):
        mmd.gaussian_kernel([0.0], [1.0], 0.0)


def test_hand_example():
    val = mmd.mmd2_empirical(np.array([[0.0]]), np.array([[2.0]]), ONE)
    assert val == pytest.approx(2.0 - 2.0 * math.exp(-0.5), abs=1e-15)
    assert abs(val - 0.78694) <= 1e-5


def test_identical_sets_give_exact_zero():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(50, 3))
    assert mmd.mmd2_empirical(X, X) == 0.0
    assert mmd.mmd2_empirical(X, X[::-1]) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 30), st.integers(1, 30))
def test_symmetric_and_nonnegative(seed, n, m):
    rng = np.random.default_rng(seed)
    X, Y = rng.normal(size=(n, 2)), rng.normal(size=(m, 2)) + 0.5
    a, b = mmd.mmd2_empirical(X, Y), mmd.mmd2_empirical(Y, X)
    assert a == b
    assert a >= -1e-12


def test_ladder_bandwidths():
    assert np.allclose(KernelSpec().bandwidths(1.0), [0.25, 0.5, 1.0, 2.0, 4.0])
    with pytest.raises(ValueError):
        KernelSpec(count=0)


def test_kernel_sum_matches_naive():
    rng = np.random.default_rng(2)
    X, Y = rng.normal(size=(64, 3)), rng.normal(size=(64, 3))
    naive = kernels.kernel_sum_naive(X, Y, 0.9)
    # the numpy path uses vectorized exp: a few ulp from the naive loop
    fallback = kernels._kernel_sums_np(X, Y, np.array([2 * 0.9 ** 2]))[0]
    assert fallback == pytest.approx(naive, rel=1e-12)
    if _accel.HAS_NUMBA:
        assert kernels.kernel_sums(X, Y, [0.9])[0] == naive


@pytest.mark.skipif(not _accel.HAS_NUMBA, reason="numba path disabled")
def test_numba_kernels_match_python_loops():
    rng = np.random.default_rng(3)
    X, Y = rng.normal(size=(40, 2)), rng.normal(size=(30, 2))
    wx, wy = rng.random(40), rng.random(30)
    two_s2 = np.array([0.5, 2.0])
    assert np.allclose(kernels._weighted_sums_nb(X, wx, Y, wy, two_s2),
                       kernels._weighted_sums_np(X, wx, Y, wy, two_s2), rtol=1e-12)
    mdp = M.random_mdp(5, 3, rng)
    pi = M.TabularPolicy.random(5, 3, rng)
    args = (kernels.categorical_cdf(mdp.transition), kernels.categorical_cdf(pi.probs), mdp.reward_sa(),
            mdp.terminal, rng.integers(5, size=8), rng.random((8, 12)), rng.random((8, 12)))
    for a, b in zip(kernels._rollout_nb(*args), kernels._rollout_np(*args)):
        assert np.array_equal(a, b)


def test_disable_flag_selects_numpy():
    code = "from polabs import _accel; print(_accel.backend())"
    out = subprocess.run([sys.executable, "-c", code], env={"POLABS_DISABLE_NUMBA": "1", "PATH": ""},
                         capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


def test_same_distribution_scores_lower_than_shift():
    wins = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        a = rng.integers(5, size=(200, 1)).astype(float)
        b = rng.integers(5, size=(200, 1)).astype(float)
        c = rng.integers(5, size=(200, 1)).astype(float) + 1.0
        wins += mmd.mmd2_empirical(a, b) < mmd.mmd2_empirical(a, c)
    assert wins == 20


def test_std_decreases_with_sample_size():
    stds = []
    for n in (50, 100, 200, 400, 800):
        vals = []
        for seed in range(30):
            rng = np.random.default_rng(seed)
            vals.append(mmd.mmd2_empirical(rng.normal(size=(n, 2)), rng.normal(size=(n, 2)) + 0.5))
        stds.append(np.std(vals))
    assert all(a > b for a, b in zip(stds, stds[1:]))


def test_compressed_and_pairwise_agree_with_plain():
    rng = np.random.default_rng(4)
    X = np.eye(4)[rng.integers(4, size=120)]
    Y = np.eye(4)[rng.integers(4, size=90)]
    assert mmd.mmd2_compressed(X, Y) == pytest.approx(mmd.mmd2_empirical(X, Y), rel=1e-10, abs=1e-14)
    sets = [rng.normal(size=(k, 2)) for k in (10, 15, 12)]
    mat = mmd.pairwise_mmd2(sets, base_bandwidth=0.8)
    for i in range(3):
        for j in range(3):
            if i != j:
                assert mat[i, j] == mmd.mmd2_empirical(sets[i], sets[j], base_bandwidth=0.8)


def test_weighted_median_matches_expanded():
    rng = np.random.default_rng(5)
    rows = rng.integers(3, size=(60, 2)).astype(float)
    U, c = mmd.unique_rows(rows)
    assert mmd.weighted_median_bandwidth(U, c) == pytest.approx(mmd.median_bandwidth(rows[:30], rows[30:]))


def test_sample_tags_and_dimensions_checked():
    a = SampleSet(np.zeros((3, 2)), SampleTag.STATE_ACTION)
    b = SampleSet(np.zeros((3, 2)), SampleTag.STATE_NEXT)
    with pytest.raises(ValueError):
        mmd.mmd2_empirical(a, b)
    with pytest.raises(ValueError):
        mmd.mmd2_empirical(np.zeros((3, 2)), np.zeros((3, 3)))
    with pytest.raises(mmd.InsufficientSamples):
        mmd.subsample(np.zeros((5, 2)), 10, 0)


class _Rec:
    def __init__(self, samples):
        self.samples = samples


def _record(mdp, pi, seed, n=60):
    s, a, _, s2, lengths = M.rollout_batch(mdp, pi, 10, n, seed)
    mask = np.arange(s.shape[1])[None, :] < lengths[:, None]
    pts = np.stack([s[mask], s2[mask]], axis=1).astype(float)
    return _Rec({SampleTag.STATE_NEXT: SampleSet(pts, SampleTag.STATE_NEXT)})


def test_estimate_metric_same_record_is_zero():
    mdp = M.random_mdp(4, 2, np.random.default_rng(6))
    rec = _record(mdp, M.TabularPolicy.uniform(4, 2), 0)
    assert mmd.estimate_metric(rec, rec, MetricKind.INFL, m=200, seed=3) == 0.0


def test_estimate_metric_preserves_exact_ordering():
    g = M.build_gridworld("doorway")
    base = M.TabularPolicy.deterministic(np.full(25, 0), 4)
    others = [M.TabularPolicy(0.8 * base.probs + 0.2 * M.TabularPolicy.uniform(25, 4).probs),
              M.TabularPolicy(0.4 * base.probs + 0.6 * M.TabularPolicy.uniform(25, 4).probs),
              M.TabularPolicy.deterministic(np.full(25, 3), 4)]
    exact = [d_ppi_exact(g, base, o) for o in others]
    assert exact == sorted(exact)
    for seed in range(10):
        ref = _record(g, base, 100 + seed, n=100)
        est = [mmd.estimate_metric(ref, _record(g, o, 200 + seed, n=100), "ppi", m=500, seed=seed)
               for o in others]
        assert est == sorted(est)


def test_defaults_match_table():
    spec = KernelSpec()
    assert (spec.multiplier, spec.count) == (2.0, 5)
    import inspect
    assert inspect.signature(mmd.estimate_metric).parameters["m"].default == 1000
