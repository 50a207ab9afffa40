"""Fast invariant checks run by ``polabs selftest``.

Each check returns ``(passed, detail)``; results land in ``selftest.csv``.
The checks are small versions of the test-suite properties, meant to catch a
broken install or a miscompiled kernel in a few seconds.
"""
from __future__ import annotations

import csv
import itertools
import os

import numpy as np

from . import _accel, config as C, kernels, lpe, metrics as X, mmd, nn
from . import mdp as M
from . import repr_learn as RL

TOL = 1e-9


def check_metric_axioms():
    worst = 0.0
    for kind in ("distinct_policies", "doorway", "key_action"):
        mdp = M.build_gridworld(kind, slip=0.1)
        rng = np.random.default_rng(0)
        for _ in range(5):
            pis = [M.TabularPolicy.random(mdp.n_states, mdp.n_actions, rng) for _ in range(3)]
            for fn in X.EXACT.values():
                d = {(i, j): fn(mdp, pis[i], pis[j]) for i, j in itertools.product(range(3), repeat=2)}
                worst = max(worst, -min(d.values()), d[0, 0],
                            abs(d[0, 1] - d[1, 0]), d[0, 2] - d[0, 1] - d[1, 2])
    return worst <= TOL, f"worst violation {worst:.3g}"


def check_fineness_chain():
    bad = 0
    rng = np.random.default_rng(1)
    for _ in range(20):
        mdp = M.random_mdp(6, 3, rng)
        a = M.TabularPolicy.random(6, 3, rng)
        for b in (a, M.TabularPolicy.random(6, 3, rng)):
            bad += len(X.chain_violations(X.extended_fineness_oracle(mdp, a, b), mdp.state_reward))
    return bad == 0, f"{bad} violations"


def check_mmd_hand_example():
    spec = mmd.KernelSpec(base_bandwidth=2.0, count=1)
    val = mmd.mmd2_empirical(np.array([[0.0]]), np.array([[2.0]]), spec)
    same = mmd.mmd2_empirical(np.arange(6.0).reshape(3, 2), np.arange(6.0).reshape(3, 2), spec)
    return abs(val - 0.78694) <= 1e-5 and same == 0.0, f"D2={val:.6f} self={same!r}"


def check_kernel_sum():
    rng = np.random.default_rng(2)
    Xp, Yp = rng.normal(size=(64, 3)), rng.normal(size=(64, 3))
    fast = kernels.kernel_sums(Xp, Yp, np.array([1.3]))[0]
    naive = kernels.kernel_sum_naive(Xp, Yp, 1.3)
    if _accel.backend() == "numba":
        return fast == naive, f"numba {float(fast)!r} vs naive {float(naive)!r}"
    rel = abs(fast - naive) / abs(naive)
    return rel <= 1e-12, f"numpy relative difference {rel:.3g}"


def check_gradients():
    rng = np.random.default_rng(3)
    net = nn.DenseNet.init([4, 8, 3], ["tanh", "identity"], rng)
    x = rng.normal(size=(5, 4))
    target = rng.normal(size=(5, 3))

    def loss(y):
        r = y - target
        return float((r ** 2).mean()), 2.0 * r / r.size

    err = nn.grad_check(net, loss, x)
    return err <= 1e-4, f"max relative error {err:.3g}"


def check_lpe_invariance():
    rng = np.random.default_rng(4)
    spec = [(3, 5, "tanh"), (5, 2, "identity")]
    model = lpe.LpeModel.init(spec, rng, repr_dim=16, hidden=8)
    net = nn.DenseNet.init([3, 5, 2], ["tanh", "identity"], rng)
    before = lpe.encode(model, net)
    # rows of [W ; b]^T are (W[:, j], b[j]); reorder them independently per layer
    for layer in net.layers:
        perm = rng.permutation(layer.b.size)
        layer.W, layer.b = layer.W[:, perm], layer.b[perm]
    after = lpe.encode(model, net)
    change = float(np.abs(before - after).max())
    return change <= TOL, f"embedding change {change:.3g}"


def check_alignment_loss():
    rng = np.random.default_rng(5)
    emb, targets = rng.normal(size=(4, 3)), np.abs(rng.normal(size=(4, 4)))
    targets = (targets + targets.T) / 2
    np.fill_diagonal(targets, 0.0)
    _, g = RL.alignment_terms(emb, targets)
    num = nn.numeric_grad(lambda: RL.alignment_terms(emb, targets)[0], [emb], 1e-6)[0]
    err = nn.relative_error(g, num)
    return err <= 1e-4, f"max relative error {err:.3g}"


CHECKS = {
    "metric_axioms": check_metric_axioms,
    "fineness_chain": check_fineness_chain,
    "mmd_hand_example": check_mmd_hand_example,
    "kernel_sum_vs_naive": check_kernel_sum,
    "network_gradients": check_gradients,
    "alignment_gradient": check_alignment_loss,
    "lpe_permutation_invariance": check_lpe_invariance,
}


def run_selftest(out: str) -> bool:
    """Run every check, write ``<out>/selftest.csv`` and return overall success."""
    os.makedirs(out, exist_ok=True)
    tag = C.git_blob_hash(C.canonical_json({"experiment": "selftest", "backend": _accel.backend()}).encode())
    rows, ok = [], True
    for name, fn in CHECKS.items():
        try:
            passed, detail = fn()
        except Exception as exc:  # noqa: BLE001 - a crash is a failed check
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        ok &= bool(passed)
        rows.append([name, "pass" if passed else "FAIL", detail, tag])
        print(f"{'pass' if passed else 'FAIL'}  {name}: {detail}")
    with open(os.path.join(out, "selftest.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["check", "status", "detail", "config_hash"])
        w.writerows(rows)
    return ok
