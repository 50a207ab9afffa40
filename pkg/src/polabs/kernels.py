"""Hot inner loops: Gaussian kernel sums and tabular episode sampling.

Each kernel has a numba loop implementation and a vectorized numpy one;
``_accel.HAS_NUMBA`` picks which one the public wrappers call. Both tabular
samplers consume the same pre-drawn uniforms, so they return identical
episodes. The numba kernel sum accumulates in plain (i, j) order with libm
``exp`` and therefore reproduces a naive Python double loop bit for bit; the
numpy kernel sum uses vectorized ``exp`` and pairwise summation and agrees
to a few ulp.
"""
import math

import numpy as np

from . import _accel
from ._accel import njit

_BLOCK = 256


@njit
def _kernel_sums_nb(X, Y, two_s2):
    n, d = X.shape
    m = Y.shape[0]
    k = two_s2.shape[0]
    out = np.zeros(k)
    for i in range(n):
        for j in range(m):
            d2 = 0.0
            for t in range(d):
                diff = X[i, t] - Y[j, t]
                d2 += diff * diff
            for b in range(k):
                out[b] += math.exp(-d2 / two_s2[b])
    return out


def _kernel_sums_np(X, Y, two_s2):
    out = np.zeros(two_s2.shape[0])
    for start in range(0, X.shape[0], _BLOCK):
        xb = X[start:start + _BLOCK]
        d2 = np.zeros((xb.shape[0], Y.shape[0]))
        for t in range(X.shape[1]):
            diff = xb[:, t, None] - Y[None, :, t]
            d2 += diff * diff
        for b in range(two_s2.shape[0]):
            out[b] += np.exp(-d2 / two_s2[b]).sum()
    return out


def kernel_sums(X, Y, bandwidths):
    """Sum of ``exp(-|x-y|^2 / (2 s^2))`` over all (x, y) pairs, one entry per bandwidth."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    bw = np.asarray(bandwidths, dtype=np.float64)
    two_s2 = np.ascontiguousarray(2.0 * bw * bw)
    if _accel.HAS_NUMBA:
        return _kernel_sums_nb(X, Y, two_s2)
    return _kernel_sums_np(X, Y, two_s2)


@njit
def _weighted_sums_nb(X, wx, Y, wy, two_s2):
    n, d = X.shape
    m = Y.shape[0]
    k = two_s2.shape[0]
    out = np.zeros(k)
    for i in range(n):
        for j in range(m):
            d2 = 0.0
            for t in range(d):
                diff = X[i, t] - Y[j, t]
                d2 += diff * diff
            w = wx[i] * wy[j]
            for b in range(k):
                out[b] += w * math.exp(-d2 / two_s2[b])
    return out


def _weighted_sums_np(X, wx, Y, wy, two_s2):
    out = np.zeros(two_s2.shape[0])
    for start in range(0, X.shape[0], _BLOCK):
        xb = X[start:start + _BLOCK]
        d2 = np.zeros((xb.shape[0], Y.shape[0]))
        for t in range(X.shape[1]):
            diff = xb[:, t, None] - Y[None, :, t]
            d2 += diff * diff
        w = wx[start:start + _BLOCK, None] * wy[None, :]
        for b in range(two_s2.shape[0]):
            out[b] += (w * np.exp(-d2 / two_s2[b])).sum()
    return out


def weighted_kernel_sums(X, wx, Y, wy, bandwidths):
    """Like :func:`kernel_sums` with each pair weighted by ``wx[i] * wy[j]``."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    wx = np.ascontiguousarray(wx, dtype=np.float64)
    wy = np.ascontiguousarray(wy, dtype=np.float64)
    bw = np.asarray(bandwidths, dtype=np.float64)
    two_s2 = np.ascontiguousarray(2.0 * bw * bw)
    if _accel.HAS_NUMBA:
        return _weighted_sums_nb(X, wx, Y, wy, two_s2)
    return _weighted_sums_np(X, wx, Y, wy, two_s2)


def kernel_sum_naive(X, Y, bandwidth):
    """Reference double loop in pure Python; slow, used as a test oracle."""
    two_s2 = 2.0 * bandwidth * bandwidth
    total = 0.0
    for x in np.asarray(X, dtype=np.float64).tolist():
        for y in np.asarray(Y, dtype=np.float64).tolist():
            d2 = 0.0
            for a, b in zip(x, y):
                diff = a - b
                d2 += diff * diff
            total += math.exp(-d2 / two_s2)
    return total


def categorical_cdf(probs):
    """Row-wise cumulative distribution with the last positive entry pinned to 1.

    Pinning keeps zero-probability trailing outcomes unreachable under rounding.
    """
    probs = np.asarray(probs, dtype=np.float64)
    cdf = np.cumsum(probs, axis=-1)
    k = probs.shape[-1]
    last = k - 1 - np.argmax(probs[..., ::-1] > 0, axis=-1)
    cdf[np.arange(k) >= last[..., None]] = 1.0
    return np.ascontiguousarray(cdf)


@njit
def _draw(cdf_row, u):
    for k in range(cdf_row.shape[0]):
        if u < cdf_row[k]:
            return k
    return cdf_row.shape[0] - 1


@njit
def _rollout_nb(trans_cdf, pi_cdf, reward_sa, terminal, s0, u_act, u_next):
    n_ep, horizon = u_act.shape
    states = np.full((n_ep, horizon), -1, dtype=np.int64)
    actions = np.full((n_ep, horizon), -1, dtype=np.int64)
    next_states = np.full((n_ep, horizon), -1, dtype=np.int64)
    rewards = np.zeros((n_ep, horizon))
    lengths = np.zeros(n_ep, dtype=np.int64)
    for e in range(n_ep):
        s = s0[e]
        for t in range(horizon):
            a = _draw(pi_cdf[s], u_act[e, t])
            if terminal[s]:
                s2 = s
            else:
                s2 = _draw(trans_cdf[s, a], u_next[e, t])
            states[e, t] = s
            actions[e, t] = a
            next_states[e, t] = s2
            rewards[e, t] = reward_sa[s, a]
            lengths[e] = t + 1
            if terminal[s]:
                break
            s = s2
    return states, actions, rewards, next_states, lengths


def _first_below(cdf_rows, u):
    # index of the first cdf entry strictly above u, matching _draw
    return np.argmax(u[:, None] < cdf_rows, axis=1)


def _rollout_np(trans_cdf, pi_cdf, reward_sa, terminal, s0, u_act, u_next):
    n_ep, horizon = u_act.shape
    states = np.full((n_ep, horizon), -1, dtype=np.int64)
    actions = np.full((n_ep, horizon), -1, dtype=np.int64)
    next_states = np.full((n_ep, horizon), -1, dtype=np.int64)
    rewards = np.zeros((n_ep, horizon))
    lengths = np.zeros(n_ep, dtype=np.int64)
    s = s0.astype(np.int64).copy()
    alive = np.ones(n_ep, dtype=bool)
    for t in range(horizon):
        idx = np.nonzero(alive)[0]
        if idx.size == 0:
            break
        cur = s[idx]
        a = _first_below(pi_cdf[cur], u_act[idx, t])
        s2 = _first_below(trans_cdf[cur, a], u_next[idx, t])
        term = terminal[cur]
        s2 = np.where(term, cur, s2)
        states[idx, t] = cur
        actions[idx, t] = a
        next_states[idx, t] = s2
        rewards[idx, t] = reward_sa[cur, a]
        lengths[idx] = t + 1
        s[idx] = s2
        alive[idx[term]] = False
    return states, actions, rewards, next_states, lengths


def sample_episodes(trans_cdf, pi_cdf, reward_sa, terminal, s0, u_act, u_next):
    """Run episodes in a tabular MDP from pre-drawn uniforms.

    Returns padded ``(states, actions, rewards, next_states, lengths)``;
    entries past each episode's length are -1 (or 0 for rewards).
    """
    args = (
        np.ascontiguousarray(trans_cdf, dtype=np.float64),
        np.ascontiguousarray(pi_cdf, dtype=np.float64),
        np.ascontiguousarray(reward_sa, dtype=np.float64),
        np.ascontiguousarray(terminal, dtype=np.bool_),
        np.ascontiguousarray(s0, dtype=np.int64),
        np.ascontiguousarray(u_act, dtype=np.float64),
        np.ascontiguousarray(u_next, dtype=np.float64),
    )
    if _accel.HAS_NUMBA:
        return _rollout_nb(*args)
    return _rollout_np(*args)
