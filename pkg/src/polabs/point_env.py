"""Deceptive 2-D point-mass task: a wall blocks the straight path to the goal.

Dynamics are a damped double integrator ``v <- damping * v + gain * a``,
``p <- p + v`` with actions clipped to the unit box. Each step pays
``-|p - goal|``. Episodes always last ``horizon`` steps, so batches of
episodes run in lockstep.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STATE_DIM = 6
ACTION_DIM = 2


@dataclass(frozen=True)
class PointEnv:
    start: tuple = (0.0, 0.0)
    goal: tuple = (0.0, 8.0)
    wall_y: float = 3.0
    wall_x: tuple = (-4.0, 4.0)
    horizon: int = 50
    damping: float = 0.75
    gain: float = 0.25
    start_jitter: float = 0.1
    discount: float = 0.99
    info: dict = field(default_factory=dict, compare=False)

    @property
    def initial_distance(self) -> float:
        return float(np.hypot(self.goal[0] - self.start[0], self.goal[1] - self.start[1]))

    def reset(self, n: int, rng):
        rng = np.random.default_rng(rng)
        pos = np.asarray(self.start, dtype=np.float64) + rng.uniform(
            -self.start_jitter, self.start_jitter, (n, 2))
        return pos, np.zeros((n, 2))

    def observe(self, pos, vel):
        return np.concatenate([pos, vel, np.asarray(self.goal) - pos], axis=1)

    def step(self, pos, vel, action):
        action = np.clip(action, -1.0, 1.0)
        vel = self.damping * vel + self.gain * action
        new = pos + vel
        lo, hi = self.wall_x
        # a move that crosses the wall line within its span stops just short of it
        crosses = (pos[:, 1] - self.wall_y) * (new[:, 1] - self.wall_y) <= 0
        crosses &= pos[:, 1] != self.wall_y
        with np.errstate(divide="ignore", invalid="ignore"):
            frac = (self.wall_y - pos[:, 1]) / (new[:, 1] - pos[:, 1])
        x_hit = pos[:, 0] + frac * (new[:, 0] - pos[:, 0])
        hit = crosses & (x_hit >= lo) & (x_hit <= hi)
        if hit.any():
            side = np.sign(pos[hit, 1] - self.wall_y)
            new[hit, 1] = self.wall_y + 1e-3 * side
            vel[hit, 1] = 0.0
        reward = -np.linalg.norm(new - np.asarray(self.goal), axis=1)
        return new, vel, reward


@dataclass
class PointBatch:
    states: np.ndarray       # (n, horizon, 6)
    actions: np.ndarray      # (n, horizon, 2)
    next_states: np.ndarray  # (n, horizon, 6)
    rewards: np.ndarray      # (n, horizon)
    final_pos: np.ndarray    # (n, 2)
    returns: np.ndarray      # (n, horizon) discounted return-to-go

    @property
    def episode_returns(self) -> np.ndarray:
        """Undiscounted episode return per episode."""
        return self.rewards.sum(axis=1)


def run(env: PointEnv, policy, n_episodes: int, rng) -> PointBatch:
    """Roll out ``policy`` (a callable mapping ``(n, 6)`` states to ``(n, 2)`` actions)."""
    pos, vel = env.reset(n_episodes, rng)
    H = env.horizon
    states = np.zeros((n_episodes, H, STATE_DIM))
    next_states = np.zeros_like(states)
    actions = np.zeros((n_episodes, H, ACTION_DIM))
    rewards = np.zeros((n_episodes, H))
    for t in range(H):
        obs = env.observe(pos, vel)
        act = np.clip(np.asarray(policy(obs), dtype=np.float64).reshape(n_episodes, ACTION_DIM), -1, 1)
        pos, vel, r = env.step(pos, vel, act)
        states[:, t], actions[:, t], rewards[:, t] = obs, act, r
        next_states[:, t] = env.observe(pos, vel)
    returns = np.zeros_like(rewards)
    acc = np.zeros(n_episodes)
    for t in range(H - 1, -1, -1):
        acc = rewards[:, t] + env.discount * acc
        returns[:, t] = acc
    return PointBatch(states, actions, next_states, rewards, pos.copy(), returns)


def final_distance(env: PointEnv, batch: PointBatch) -> np.ndarray:
    return np.linalg.norm(batch.final_pos - np.asarray(env.goal), axis=1)


# --- scripted controllers ---------------------------------------------------------------


def _seek(obs, target, kp=1.0, kd=2.0):
    pos, vel = obs[:, :2], obs[:, 2:4]
    return np.clip(kp * (target - pos) - kd * vel, -1.0, 1.0)


def greedy_controller(env: PointEnv):
    """Heads straight for the goal."""
    goal = np.asarray(env.goal, dtype=np.float64)
    return lambda obs: _seek(obs, goal)


def detour_controller(env: PointEnv, margin: float = 1.0):
    """Walks around the wall's right end through two waypoints, then to the goal."""
    x_out = env.wall_x[1] + margin
    below = np.array([x_out, env.wall_y - margin])
    above = np.array([x_out, env.wall_y + margin])
    goal = np.asarray(env.goal, dtype=np.float64)

    def act(obs):
        pos = obs[:, :2]
        target = np.where((pos[:, 1] < env.wall_y)[:, None],
                          np.where((pos[:, 0] < x_out - 0.3)[:, None], below, above),
                          goal)
        return _seek(obs, target)

    return act
