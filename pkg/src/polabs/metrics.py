"""Exact policy metrics on tabular MDPs and the Jeffreys-divergence estimator."""
from __future__ import annotations

import enum
from collections import Counter
from typing import NamedTuple

import numpy as np

from .mdp import (
    TabularMdp,
    TabularPolicy,
    _check_shapes,
    policy_transition,
    value_dp,
    visitation_dp,
)

EQ_TOL = 1e-9


class MetricKind(str, enum.Enum):
    DIST = "pi"      # action distributions
    INFL = "ppi"     # induced state-transition kernels
    VALUE = "vpi"    # value functions / return distributions
    VISIT = "dpi"    # discounted state visitation
    RETURN = "jpi"   # expected return from the initial distribution

    @property
    def has_mmd(self) -> bool:
        return self in (MetricKind.DIST, MetricKind.INFL, MetricKind.VALUE)


def d_pi_exact(mdp: TabularMdp, pi1: TabularPolicy, pi2: TabularPolicy) -> float:
    _check_shapes(mdp, pi1)
    _check_shapes(mdp, pi2)
    return float(np.mean(np.abs(pi1.probs - pi2.probs)))


def d_ppi_exact(mdp, pi1, pi2) -> float:
    return float(np.mean(np.abs(policy_transition(mdp, pi1) - policy_transition(mdp, pi2))))


def d_vpi_exact(mdp, pi1, pi2, tol: float = 1e-10) -> float:
    return float(np.mean(np.abs(value_dp(mdp, pi1, tol) - value_dp(mdp, pi2, tol))))


def d_dpi_exact(mdp, pi1, pi2, tol: float = 1e-12) -> float:
    return float(np.mean(np.abs(visitation_dp(mdp, pi1, tol) - visitation_dp(mdp, pi2, tol))))


def d_jpi_exact(mdp, pi1, pi2, tol: float = 1e-10) -> float:
    rho0 = mdp.initial_dist
    return float(abs(rho0 @ value_dp(mdp, pi1, tol) - rho0 @ value_dp(mdp, pi2, tol)))


EXACT = {
    MetricKind.DIST: d_pi_exact,
    MetricKind.INFL: d_ppi_exact,
    MetricKind.VALUE: d_vpi_exact,
    MetricKind.VISIT: d_dpi_exact,
    MetricKind.RETURN: d_jpi_exact,
}


def exact_metric(mdp, pi1, pi2, kind) -> float:
    return EXACT[MetricKind(kind)](mdp, pi1, pi2)


def all_exact_metrics(mdp, pi1, pi2) -> dict:
    return {kind: fn(mdp, pi1, pi2) for kind, fn in EXACT.items()}


# --- Jeffreys divergence -----------------------------------------------------

_JEFFREYS_WIDTH = {
    MetricKind.DIST: 2,
    MetricKind.INFL: 2,
    MetricKind.VALUE: 2,
    MetricKind.VISIT: 1,
    MetricKind.RETURN: 1,
}


def _symbols(samples, width):
    arr = np.asarray(samples)
    if arr.size == 0:
        raise ValueError("empty sample set")
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.shape[1] != width:
        raise ValueError(f"expected samples with {width} column(s), got {arr.shape[1]}")
    return [tuple(row) for row in arr.tolist()]


def frequencies(symbols, support, smoothing):
    counts = Counter(symbols)
    freq = np.array([counts.get(sym, 0) for sym in support], dtype=np.float64) + smoothing
    return freq / freq.sum()


def jeffreys_metric(samples1, samples2, kind, support=None, smoothing: float = 1e-6) -> float:
    """Symmetrized KL divergence between smoothed empirical distributions.

    ``samples`` are rows of discrete symbols matching ``kind``: ``(s, a)``,
    ``(s, s')`` or ``(s, binned G)`` pairs, or single states / binned returns
    for the visitation and return kinds.
    """
    kind = MetricKind(kind)
    width = _JEFFREYS_WIDTH[kind]
    sym1 = _symbols(samples1, width)
    sym2 = _symbols(samples2, width)
    if support is None:
        support = sorted(set(sym1) | set(sym2))
    else:
        support = [tuple(np.atleast_1d(s).tolist()) for s in support]
        unknown = (set(sym1) | set(sym2)) - set(support)
        if unknown:
            raise ValueError(f"samples outside the declared support: {sorted(unknown)[:5]}")
    p = frequencies(sym1, support, smoothing)
    q = frequencies(sym2, support, smoothing)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = (p - q) * (np.log(p) - np.log(q))
    terms = np.where((p == 0) & (q == 0), 0.0, terms)
    return float(np.sum(terms))


def jeffreys_from_distributions(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return float(np.sum(p * np.log(p / q)) + np.sum(q * np.log(q / p)))


# --- fineness ------------------------------------------------------------------


class Fineness(NamedTuple):
    pi: bool
    ppi: bool
    vpi: bool


class ExtendedFineness(NamedTuple):
    pi: bool
    ppi: bool
    vpi: bool
    dpi: bool
    jpi: bool


def fineness_oracle(mdp, pi1, pi2, tol: float = EQ_TOL) -> Fineness:
    """Equivalence flags: which exact metrics vanish (within ``tol``) for the pair."""
    return Fineness(
        d_pi_exact(mdp, pi1, pi2) <= tol,
        d_ppi_exact(mdp, pi1, pi2) <= tol,
        d_vpi_exact(mdp, pi1, pi2) <= tol,
    )


def extended_fineness_oracle(mdp, pi1, pi2, tol: float = EQ_TOL) -> ExtendedFineness:
    flags = fineness_oracle(mdp, pi1, pi2, tol)
    return ExtendedFineness(
        *flags,
        d_dpi_exact(mdp, pi1, pi2) <= tol,
        d_jpi_exact(mdp, pi1, pi2) <= tol,
    )


def chain_violations(flags: ExtendedFineness, state_reward: bool = True) -> list[str]:
    """Implications of the fineness ordering that ``flags`` break.

    The implications from influence equivalence onwards to value or return
    equivalence are only guaranteed for state-based rewards.
    """
    out = []
    if flags.pi and not flags.ppi:
        out.append("pi => ppi")
    if flags.ppi and not flags.dpi:
        out.append("ppi => dpi")
    if flags.vpi and not flags.jpi:
        out.append("vpi => jpi")
    if state_reward:
        if flags.ppi and not flags.vpi:
            out.append("ppi => vpi")
        if flags.dpi and not flags.jpi:
            out.append("dpi => jpi")
    return out
