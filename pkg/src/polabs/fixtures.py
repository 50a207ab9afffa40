"""Deterministic policy families used by the tests, the self-test and examples."""
from __future__ import annotations

import numpy as np

from . import mdp as M
from . import nn


def tabular_policy_family(n: int = 60, seed: int = 7, kind: str = "distinct_policies"):
    """Softmax-table policies on a gridworld as single-layer one-hot networks.

    Logits are random convex mixtures of four anchors (the two reference
    policies, the uniform policy and one random table) at random
    temperatures, plus small noise. Returns ``(mdp, spec, thetas)``.
    """
    mdp = M.build_gridworld(kind)
    S, A = mdp.n_states, mdp.n_actions
    spec = [(S, A, "softmax")]
    rng = np.random.default_rng(seed)
    pa, pb = M.reference_policies(mdp)
    anchors = np.stack([np.log(pa.probs + 1e-3), np.log(pb.probs + 1e-3),
                        np.zeros((S, A)), rng.normal(size=(S, A))])
    weights = rng.dirichlet(np.full(4, 0.7), n)
    temps = rng.uniform(0.3, 1.5, n)
    logits = np.einsum("nk,ksa->nsa", weights, anchors) * temps[:, None, None]
    logits += 0.05 * rng.normal(size=(n, S, A))
    thetas = np.concatenate([logits.reshape(n, S * A), np.zeros((n, A))], axis=1)
    return mdp, spec, thetas


def table_policy(theta, spec, n_states) -> M.TabularPolicy:
    return M.TabularPolicy(nn.unflatten(theta, spec)(np.eye(n_states)))
