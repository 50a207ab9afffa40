"""Acceptance criteria 1-11. Each test records one pass/fail line via ``report``."""
import pathlib
import subprocess
import sys
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from polabs import _accel, fixtures, kernels, lpe, mmd, nn
from polabs import mdp as M
from polabs import metrics as X
from polabs import ope as O
from polabs import point_env as P
from polabs import policy_opt as PO
from polabs import repr_learn as RL
from polabs.metrics import MetricKind

from oracles import vanilla_es_oracle

pytestmark = pytest.mark.acceptance

GRIDWORLDS = ("distinct_policies", "doorway", "key_action")
EPS_GRID = [round(0.1 * k, 1) for k in range(10)]


def dirichlet_policy(n_states, n_actions, rng):
    return M.TabularPolicy(rng.dirichlet(np.full(n_actions, 0.5), n_states))


def test_1_metric_axioms(report):
    start = time.perf_counter()
    worst = 0.0
    for kind in GRIDWORLDS + ("n_direction",):
        mdp = M.build_gridworld(kind, slip=0.1) if kind != "n_direction" else M.build_gridworld(kind)
        rng = np.random.default_rng(11)
        for _ in range(100):
            a, b, c = (dirichlet_policy(mdp.n_states, mdp.n_actions, rng) for _ in range(3))
            for fn in X.EXACT.values():
                ab, ba, aa = fn(mdp, a, b), fn(mdp, b, a), fn(mdp, a, a)
                ac, bc = fn(mdp, a, c), fn(mdp, b, c)
                worst = max(worst, -min(ab, ac, bc), abs(aa), abs(ab - ba), ac - ab - bc)
    elapsed = time.perf_counter() - start
    report(1, worst <= 1e-9 and elapsed < 10.0,
           f"worst axiom violation {worst:.3g} (tol 1e-9), {elapsed:.1f}s (limit 10s)")


def duplicate_action_mdp(rng):
    """Random state-reward MDP whose actions 0 and 1 share transition rows."""
    T = rng.dirichlet(np.ones(5), size=(5, 3))
    T[:, 1] = T[:, 0]
    return M.TabularMdp(T, rng.normal(size=5), 0.9, rng.dirichlet(np.ones(5)))


def test_2_fineness_chain(report):
    start = time.perf_counter()
    rng = np.random.default_rng(12)
    pairs = []
    for _ in range(200):   # unrelated random pairs
        mdp = M.random_mdp(5, 3, rng)
        pairs.append((mdp, M.TabularPolicy.random(5, 3, rng), M.TabularPolicy.random(5, 3, rng)))
    for _ in range(100):   # identical pairs
        mdp = M.random_mdp(5, 3, rng)
        pi = M.TabularPolicy.random(5, 3, rng)
        pairs.append((mdp, pi, M.TabularPolicy(pi.probs.copy())))
    for _ in range(200):   # mass moved between transition-identical actions
        mdp = duplicate_action_mdp(rng)
        pi = M.TabularPolicy.random(5, 3, rng)
        probs = pi.probs.copy()
        shared = probs[:, 0] + probs[:, 1]
        split = rng.random(5)
        probs[:, 0], probs[:, 1] = split * shared, (1 - split) * shared
        pairs.append((mdp, pi, M.TabularPolicy(probs)))

    violations, realized = 0, 0
    for mdp, a, b in pairs:
        assert mdp.state_reward
        flags = X.extended_fineness_oracle(mdp, a, b)
        violations += len(X.chain_violations(flags, state_reward=True))
        realized += (flags.pi, flags.ppi, flags.vpi) == (False, True, True)
    elapsed = time.perf_counter() - start
    report(2, len(pairs) == 500 and violations == 0 and realized >= 1 and elapsed < 30.0,
           f"{len(pairs)} pairs, {violations} violations, {realized} realize (false,true,true), "
           f"{elapsed:.1f}s (limit 30s)")


def test_3_gridworld_sweep(report):
    start = time.perf_counter()
    problems = []
    min_ppi = np.inf
    for kind in GRIDWORLDS:
        base = M.build_gridworld(kind)
        pa, pb = M.reference_policies(base)
        rows = [X.all_exact_metrics(M.apply_stochasticity(base, eps), pa, pb) for eps in EPS_GRID]
        ppi = [r[MetricKind.INFL] for r in rows]
        min_ppi = min(min_ppi, min(ppi))
        if min(ppi) <= 1e-4:
            problems.append(f"{kind}: d_ppi min {min(ppi):.3g}")
        if len({r[MetricKind.DIST] for r in rows}) != 1:
            problems.append(f"{kind}: d_pi varies with eps")
        if kind == "distinct_policies" and not rows[-1][MetricKind.VALUE] < rows[0][MetricKind.VALUE]:
            problems.append("distinct_policies: d_vpi(0.9) >= d_vpi(0)")
    elapsed = time.perf_counter() - start
    report(3, not problems and elapsed < 60.0,
           f"min d_ppi {min_ppi:.3g} (> 1e-4), {'; '.join(problems) or 'd_pi constant, d_vpi falls'}, "
           f"{elapsed:.1f}s (limit 60s)")


def transition_samples(mdp, pi, n, rng):
    """``n`` one-hot (s, s') transitions drawn from fresh episodes of ``pi``."""
    states, _, _, nxt, lengths = M.rollout_batch(mdp, pi, 25, 2 * n, rng)
    mask = np.arange(states.shape[1])[None, :] < lengths[:, None]
    s, s2 = states[mask], nxt[mask]
    keep = rng.choice(s.size, size=n, replace=False)
    eye = np.eye(mdp.n_states)
    return np.hstack([eye[s[keep]], eye[s2[keep]]])


def test_4_mmd_correctness(report):
    hand = mmd.mmd2_empirical(np.array([[0.0]]), np.array([[2.0]]), mmd.KernelSpec(base_bandwidth=2.0, count=1))
    rng = np.random.default_rng(13)
    Xs = rng.normal(size=(50, 3))
    self_zero = mmd.mmd2_empirical(Xs, Xs.copy())

    A, B = rng.normal(size=(64, 4)), rng.normal(size=(64, 4))
    blocked = kernels.kernel_sums(A, B, np.array([0.9]))[0]
    naive = kernels.kernel_sum_naive(A, B, 0.9)

    mdp = M.apply_stochasticity(M.build_gridworld("distinct_policies"), 0.3)
    pa, pb = M.reference_policies(mdp)
    stds = []
    for n in (50, 100, 200, 400, 800):
        vals = []
        for seed in range(30):
            r = np.random.default_rng([seed, n])
            vals.append(mmd.mmd2_compressed(transition_samples(mdp, pa, n, r), transition_samples(mdp, pb, n, r)))
        stds.append(float(np.std(vals)))
    decreasing = all(a > b for a, b in zip(stds, stds[1:]))

    ok = abs(hand - 0.78694) <= 1e-5 and self_zero == 0.0 and blocked == naive and decreasing
    report(4, ok, f"hand {hand:.6f}, self {self_zero!r}, blocked==naive {bool(blocked == naive)} "
                  f"({_accel.backend()}), std {[round(s, 5) for s in stds]}")


SMOOTH = ("tanh", "identity")


def test_5_gradients(report):
    worst_net = worst_align = worst_eval = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        depth = int(rng.integers(1, 4))
        sizes = [int(k) for k in rng.integers(2, 7, size=depth + 1)]
        acts = [str(rng.choice(SMOOTH)) for _ in range(depth - 1)] + [str(rng.choice(SMOOTH + ("softmax",)))]
        net = nn.DenseNet.init(sizes, acts, rng)
        for layer in net.layers:
            layer.b[...] = rng.normal(size=layer.b.shape)
        x = rng.normal(size=(4, sizes[0]))
        target = rng.normal(size=(4, sizes[-1]))

        def mse(y):
            r = y - target
            return float((r ** 2).mean()), 2.0 * r / r.size

        worst_net = max(worst_net, nn.grad_check(net, mse, x))

        spec = [(3, 4, "tanh"), (4, 2, "softmax")]
        model = lpe.LpeModel.init(spec, rng, repr_dim=6, hidden=5, hidden_act="tanh")
        thetas = rng.normal(size=(5, nn.param_count(spec)))
        t = np.abs(rng.normal(size=(5, 5)))
        t = t + t.T
        np.fill_diagonal(t, 0.0)
        eta = float(rng.uniform(0.3, 2.0))
        _, analytic = RL.alignment_loss(model, thetas, t, eta)
        numeric = nn.numeric_grad(lambda: RL.alignment_loss(model, thetas, t, eta)[0], model.params(), 1e-5)
        worst_align = max(worst_align, max(nn.relative_error(a, b) for a, b in zip(analytic, numeric)))

        head = nn.DenseNet.init([model.dim, 5, 1], ["tanh", "identity"], rng)
        targets = rng.random(5)
        _, hg, eg = RL.eval_loss(head, model, thetas, targets)
        params = head.params() + model.params()
        numeric = nn.numeric_grad(lambda: RL.eval_loss(head, model, thetas, targets)[0], params, 1e-5)
        worst_eval = max(worst_eval, max(nn.relative_error(a, b) for a, b in zip(hg + eg, numeric)))
    worst = max(worst_net, worst_align, worst_eval)
    report(5, worst <= 1e-4, f"max relative error nets {worst_net:.2g}, alignment {worst_align:.2g}, "
                             f"evaluation {worst_eval:.2g} (tol 1e-4)")


def test_6_lpe_invariance(report):
    spec = PO.point_policy_spec()
    model = lpe.LpeModel.init(spec, 0)
    rng = np.random.default_rng(16)
    worst = 0.0
    for _ in range(100):
        net = nn.DenseNet.init(PO.POINT_POLICY_SIZES, PO.POINT_POLICY_ACTS, rng)
        for layer in net.layers:
            layer.b[...] = rng.normal(size=layer.b.shape)
        before = lpe.encode(model, net)
        for _ in range(10):
            for layer in net.layers:
                perm = rng.permutation(layer.b.size)
                layer.W, layer.b = layer.W[:, perm], layer.b[perm]
            worst = max(worst, float(np.abs(lpe.encode(model, net) - before).max()))
    report(6, worst <= 1e-9, f"max embedding change {worst:.3g} over 1000 permutations (tol 1e-9)")


@pytest.mark.slow
def test_7_alignment_efficacy(report):
    start = time.perf_counter()
    mdp, spec, thetas = fixtures.tabular_policy_family()
    policies = [fixtures.table_policy(t, spec, mdp.n_states) for t in thetas]
    train, held = np.arange(45), np.arange(45, 60)
    iu, ju = np.triu_indices(held.size, 1)
    summary, ok = [], True
    for kind in ("pi", "ppi", "vpi"):
        fn = X.EXACT[MetricKind(kind)]
        cache = RL.PairCache.build(len(thetas), kind, lambda i, j: fn(mdp, policies[i], policies[j]))
        eta = 1.0 / float(np.median(list(cache.values.values())))
        rhos = []
        for seed in range(5):
            res = RL.train(thetas[train], np.zeros(train.size), RL.Align(kind, eta), spec, 1000,
                           seed=seed, pairs=cache, index=train, train_value=False)
            emb = lpe.encode_batch(res.model, thetas[held])[0]
            dist = np.linalg.norm(emb[iu] - emb[ju], axis=1)
            rhos.append(spearmanr(dist, cache.matrix(held)[iu, ju]).statistic)
        passed = sum(r >= 0.8 for r in rhos)
        ok &= passed >= 4
        summary.append(f"{kind} {passed}/5 (min {min(rhos):.3f})")
    elapsed = time.perf_counter() - start
    report(7, ok and elapsed < 300.0, f"held-out Spearman >= 0.8: {', '.join(summary)}, "
                                      f"{elapsed:.0f}s (limit 300s)")


@pytest.mark.slow
def test_8_trpo(report):
    start = time.perf_counter()
    env = M.build_gridworld("n_direction", n_directions=5)
    seeds = range(10)
    vanilla = [PO.auc(PO.trpo_run(PO.TrustRegionConfig(metric=None), env, s).curve) for s in seeds]
    ok, summary, post = True, [], 0
    for kind, grid in PO.SIGMA_GRID.items():
        aucs = {}
        for sigma in grid:
            runs = [PO.trpo_run(PO.TrustRegionConfig(metric=kind, sigma=sigma), env, s) for s in seeds]
            post += sum(PO.post_trip_updates(r.log) for r in runs)
            aucs[sigma] = [PO.auc(r.curve) for r in runs]
        best = max(grid, key=lambda s: np.mean(aucs[s]))
        wins = sum(a >= b for a, b in zip(aucs[best], vanilla))
        ok &= wins >= 7
        summary.append(f"{kind.value} sigma={best} wins {wins}/10 mean AUC {np.mean(aucs[best]):.0f}")
    elapsed = time.perf_counter() - start
    report(8, ok and post == 0 and elapsed < 900.0,
           f"vanilla mean AUC {np.mean(vanilla):.0f}; {'; '.join(summary)}; post-trip updates {post}; "
           f"{elapsed:.0f}s (limit 900s)")


@pytest.mark.slow
def test_9_dges(report):
    start = time.perf_counter()
    env = P.PointEnv()
    vanilla, diverse, bitwise = [], [], True
    for seed in range(5):
        plain = PO.dges_run(PO.EsConfig(beta=0.0, generations=120), env, seed)
        vanilla.append(plain.final_distance)
        oracle = vanilla_es_oracle(seed, len(plain.thetas))
        bitwise &= all(np.array_equal(a, b) for a, b in zip(plain.thetas, oracle))
        diverse.append(PO.dges_run(PO.EsConfig(beta=10.0, metric="ppi", generations=120, archive=10), env, seed).final_distance)
    ratio = float(np.median(diverse) / np.median(vanilla))
    elapsed = time.perf_counter() - start
    report(9, ratio <= 0.8 and bitwise and elapsed < 900.0,
           f"median final distance beta=10 {np.median(diverse):.3f} vs vanilla {np.median(vanilla):.3f} "
           f"(ratio {ratio:.2f}, limit 0.80), beta=0 bitwise {bitwise}, {elapsed:.0f}s (limit 900s)")


@pytest.mark.slow
def test_10_ope_pipeline(report, tmp_path):
    start = time.perf_counter()
    collected = O.collect_dataset(P.PointEnv(), "es", intervals=10, K=4, B=30, m=500, seeds=(0, 1, 2),
                                  train_steps=120, beta=10.0, archive=50)
    collected.save(tmp_path / "dataset")
    ds = O.Dataset.load(tmp_path / "dataset")   # frozen on disk, checked by content hash
    assert ds.content_hash() == collected.content_hash()
    caches = {kind: O.pair_cache(ds, kind) for kind in ("pi", "ppi", "vpi")}

    strong = O.make_split(ds.returns, "strong", 0.2)
    ordered = ds.returns[strong.train].max() <= ds.returns[strong.test].min()

    definitional, completed = True, []
    for row, obj in RL.ROWS.items():
        pairs = caches[obj.kind.value] if isinstance(obj, RL.Align) else None
        out = O.run_ope(ds, obj, "strong", 0.2, trials=1, pairs=pairs)
        final = out["trials"][0].final
        definitional &= final.g_gap == final.t_error - final.train_error
        completed.append(row)

    improvements = []
    for seed in range(5):
        split = O.make_split(ds.returns, "weak", 0.4, seed)
        res = O.run_trial(ds, RL.ROWS["f_vpi"], split, O.epochs_for(0.4, 200), seed, caches["vpi"])
        definitional &= res.final.g_gap == res.final.t_error - res.final.train_error
        improvements.append(1.0 - res.final.t_error / res.initial.t_error)
    elapsed = time.perf_counter() - start
    ok = (len(ds) == 40 and ordered and len(completed) == 7 and definitional
          and min(improvements) >= 0.5 and elapsed < 1200.0)
    report(10, ok, f"{len(ds)} policies, strong split ordered {ordered}, rows run {len(completed)}/7, "
                   f"f_vpi weak-40% T_error improvement {[round(v, 2) for v in improvements]} (>= 0.5), "
                   f"G_gap definitional {definitional}, {elapsed:.0f}s (limit 1200s)")


CONFIGS = {
    "gridworld": 'experiment = "gridworld-metrics"\n[gridworld]\neps = [0.0, 0.3, 0.9]\n',
    "trpo": ('experiment = "trpo"\nseeds = [0, 1]\n[trpo]\nmetrics = ["none", "ppi"]\n'
             'iterations = 2\nsample_size = 512\nminibatches = 10\n[trpo.sigmas]\nppi = [0.1]\n'),
    "dges": 'experiment = "dges"\nseeds = [0]\n[dges]\ngenerations = 3\npopulation = 8\narchive = 3\n',
    "ope": ('seeds = [0]\n[ope]\nintervals = 3\nK = 2\nB = 3\nm = 30\ntrain_steps = 6\n'
            'rows = ["f_theta", "f_cl", "f_vpi"]\nmodes = ["weak"]\nratio = 0.4\ntrials = 1\nbase_epochs = 2\n'),
}
OPE_STAGES = ("ope-collect", "ope-train", "ope-eval", "ope-table", "ope-embed")


def _cli(*args):
    res = subprocess.run([sys.executable, "-m", "polabs.cli", *args], capture_output=True, text=True)
    assert res.returncode == 0, res.stdout + res.stderr


def _run_all(root: pathlib.Path, configs: pathlib.Path):
    _cli("selftest", "--out", str(root / "selftest"))
    for name in ("gridworld", "trpo", "dges"):
        _cli("run", str(configs / f"{name}.toml"), "--out", str(root / name))
    for stage in OPE_STAGES:
        _cli("run", str(configs / f"{stage}.toml"), "--out", str(root / "ope"))


@pytest.mark.slow
def test_11_determinism(report, tmp_path):
    configs = tmp_path / "configs"
    configs.mkdir()
    for name in ("gridworld", "trpo", "dges"):
        (configs / f"{name}.toml").write_text(CONFIGS[name])
    for stage in OPE_STAGES:
        (configs / f"{stage}.toml").write_text(f'experiment = "{stage}"\n' + CONFIGS["ope"])
    first, second = tmp_path / "a", tmp_path / "b"
    _run_all(first, configs)
    _run_all(second, configs)
    csvs = sorted(p.relative_to(first) for p in first.rglob("*.csv"))
    differing = [str(p) for p in csvs if (first / p).read_bytes() != (second / p).read_bytes()]
    missing = [str(p) for p in csvs if not (second / p).exists()]
    extra = sorted(str(p.relative_to(second)) for p in second.rglob("*.csv") if not (first / p.relative_to(second)).exists())
    experiments = {p.parts[0] for p in csvs}
    ok = not differing and not missing and not extra and experiments == {"selftest", "gridworld", "trpo", "dges", "ope"}
    report(11, ok, f"{len(csvs)} CSV artifacts over {len(experiments)} experiment groups, "
                   f"differing {differing or 'none'}")
