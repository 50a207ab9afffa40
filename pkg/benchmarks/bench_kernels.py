"""Time the hot kernels under numba and under the pure-numpy fallback.

Each backend runs in its own interpreter because the choice is made at import
time from ``POLABS_DISABLE_NUMBA``. Usage::

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, timeit
import numpy as np
from polabs import _accel, kernels, mdp as M
from polabs.mmd import KernelSpec, mmd2_empirical

repeat = int(sys.argv[1])
rng = np.random.default_rng(0)
X, Y = rng.normal(size=(800, 4)), rng.normal(size=(800, 4)) + 0.3
bw = KernelSpec().bandwidths(1.0)
wx, wy = rng.integers(1, 5, 800).astype(float), rng.integers(1, 5, 800).astype(float)
env = M.build_gridworld("n_direction")
pi = M.TabularPolicy.uniform(env.n_states, env.n_actions)

cases = {
    "kernel_sums_800x800x5": lambda: kernels.kernel_sums(X, Y, bw),
    "weighted_kernel_sums_800x800x5": lambda: kernels.weighted_kernel_sums(X, wx, Y, wy, bw),
    "mmd2_empirical_800": lambda: mmd2_empirical(X, Y),
    "rollout_batch_165_episodes": lambda: M.rollout_batch(env, pi, 25, 165, np.random.default_rng(1)),
}
out = {"backend": _accel.backend()}
for name, fn in cases.items():
    fn()  # compile / warm caches
    out[name] = min(timeit.repeat(fn, number=1, repeat=repeat))
print(json.dumps(out))
"""


def measure(disable: bool, repeat: int) -> dict:
    env = dict(os.environ)
    env.pop("POLABS_DISABLE_NUMBA", None)
    if disable:
        env["POLABS_DISABLE_NUMBA"] = "1"
    res = subprocess.run([sys.executable, "-c", WORKER, str(repeat)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    fast, slow = measure(False, args.repeat), measure(True, args.repeat)
    print(f"{'case':34s} {fast['backend']:>10s} {slow['backend']:>10s} {'speedup':>8s}")
    for name in fast:
        if name == "backend":
            continue
        print(f"{name:34s} {fast[name] * 1e3:9.2f}ms {slow[name] * 1e3:9.2f}ms {slow[name] / fast[name]:7.1f}x")


if __name__ == "__main__":
    main()
