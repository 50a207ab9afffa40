"""Finite MDPs, the benchmark gridworlds, dynamic programming and sampling."""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .kernels import categorical_cdf, sample_episodes

SIMPLEX_TOL = 1e-9
_MAX_DOUBLINGS = 64

UP, DOWN, LEFT, RIGHT = 0, 1, 2, 3
ACTION_NAMES = ("up", "down", "left", "right")
_MOVES = {UP: (0, 1), DOWN: (0, -1), LEFT: (-1, 0), RIGHT: (1, 0)}


class ConvergenceError(RuntimeError):
    pass


def _check_simplex(arr, what):
    if np.any(arr < -SIMPLEX_TOL):
        raise ValueError(f"{what} has negative entries")
    sums = arr.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > SIMPLEX_TOL):
        worst = float(np.max(np.abs(sums - 1.0)))
        raise ValueError(f"{what} rows do not sum to 1 (max deviation {worst:.3e})")


@dataclass
class TabularMdp:
    """Finite MDP with a transition tensor ``T[s, a, s']``.

    ``reward`` is either a state reward vector ``R[s]`` or a state-action
    matrix ``R[s, a]``. ``terminal`` marks absorbing states where an episode
    ends after collecting that state's reward.
    """

    transition: np.ndarray
    reward: np.ndarray
    discount: float
    initial_dist: np.ndarray
    terminal: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.reward = np.asarray(self.reward, dtype=np.float64)
        self.initial_dist = np.asarray(self.initial_dist, dtype=np.float64)
        if self.transition.ndim != 3 or self.transition.shape[0] != self.transition.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {self.transition.shape}")
        S, A, _ = self.transition.shape
        if S < 1 or A < 1:
            raise ValueError("need at least one state and one action")
        if self.reward.shape not in ((S,), (S, A)):
            raise ValueError(f"reward must have shape ({S},) or ({S}, {A}), got {self.reward.shape}")
        if self.initial_dist.shape != (S,):
            raise ValueError("initial_dist length must equal n_states")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError(f"discount must lie in [0, 1), got {self.discount}")
        self.discount = float(self.discount)
        if self.terminal is None:
            self.terminal = np.zeros(S, dtype=bool)
        self.terminal = np.asarray(self.terminal, dtype=bool)
        if self.terminal.shape != (S,):
            raise ValueError("terminal mask length must equal n_states")
        _check_simplex(self.transition, "transition")
        _check_simplex(self.initial_dist, "initial_dist")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def state_reward(self) -> bool:
        return self.reward.ndim == 1

    def reward_sa(self) -> np.ndarray:
        if self.state_reward:
            return np.repeat(self.reward[:, None], self.n_actions, axis=1)
        return self.reward

    def replace(self, **changes) -> "TabularMdp":
        fields = dict(
            transition=self.transition,
            reward=self.reward,
            discount=self.discount,
            initial_dist=self.initial_dist,
            terminal=self.terminal,
            info=dict(self.info),
        )
        fields.update(changes)
        return TabularMdp(**fields)

    def to_json(self) -> str:
        return json.dumps(
            {
                "n_states": self.n_states,
                "n_actions": self.n_actions,
                "discount": self.discount,
                "reward_kind": "state" if self.state_reward else "state_action",
                "transition": self.transition.ravel().tolist(),
                "reward": self.reward.ravel().tolist(),
                "initial_dist": self.initial_dist.tolist(),
                "terminal": self.terminal.astype(int).tolist(),
                "info": self.info,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "TabularMdp":
        doc = json.loads(text)
        S, A = doc["n_states"], doc["n_actions"]
        reward = np.asarray(doc["reward"], dtype=np.float64)
        if doc["reward_kind"] == "state_action":
            reward = reward.reshape(S, A)
        return cls(
            transition=np.asarray(doc["transition"], dtype=np.float64).reshape(S, A, S),
            reward=reward,
            discount=doc["discount"],
            initial_dist=np.asarray(doc["initial_dist"], dtype=np.float64),
            terminal=np.asarray(doc["terminal"], dtype=bool),
            info=doc.get("info", {}),
        )


@dataclass
class TabularPolicy:
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2:
            raise ValueError("policy probs must be a (S, A) matrix")
        _check_simplex(self.probs, "policy")

    @classmethod
    def deterministic(cls, actions, n_actions: int) -> "TabularPolicy":
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros((actions.size, n_actions))
        probs[np.arange(actions.size), actions] = 1.0
        return cls(probs)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "TabularPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def random(cls, n_states: int, n_actions: int, rng) -> "TabularPolicy":
        return cls(rng.dirichlet(np.ones(n_actions), size=n_states))


def _check_shapes(mdp: TabularMdp, pi: TabularPolicy):
    if pi.probs.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(
            f"policy shape {pi.probs.shape} does not match MDP ({mdp.n_states}, {mdp.n_actions})"
        )


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    discount: float
    returns: np.ndarray = None

    def __post_init__(self):
        if self.returns is None:
            self.returns = discounted_returns(self.rewards, self.discount)

    def __len__(self):
        return len(self.rewards)

    def to_record(self) -> dict:
        return {
            "states": np.asarray(self.states).tolist(),
            "actions": np.asarray(self.actions).tolist(),
            "rewards": np.asarray(self.rewards).tolist(),
            "next_states": np.asarray(self.next_states).tolist(),
            "returns": np.asarray(self.returns).tolist(),
            "discount": self.discount,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Trajectory":
        return cls(
            states=np.asarray(rec["states"]),
            actions=np.asarray(rec["actions"]),
            rewards=np.asarray(rec["rewards"], dtype=np.float64),
            next_states=np.asarray(rec["next_states"]),
            discount=rec["discount"],
            returns=np.asarray(rec["returns"], dtype=np.float64),
        )


def discounted_returns(rewards, discount):
    """Return-to-go ``G_t = r_t + discount * G_{t+1}`` with ``G_T = r_T``."""
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(rewards)
    g = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        g = rewards[t] + discount * g
        out[t] = g
    return out


def write_trajectories(path, trajectories):
    with open(path, "w", encoding="utf-8") as fh:
        for traj in trajectories:
            fh.write(json.dumps(traj.to_record(), sort_keys=True) + "\n")


def read_trajectories(path):
    with open(path, encoding="utf-8") as fh:
        return [Trajectory.from_record(json.loads(line)) for line in fh if line.strip()]


# --- gridworlds -----------------------------------------------------------


class GridKind(str, enum.Enum):
    DISTINCT_POLICIES = "distinct_policies"
    DOORWAY = "doorway"
    KEY_ACTION = "key_action"
    N_DIRECTION = "n_direction"


@dataclass
class GridParams:
    side: int = 5
    slip: float = 0.0
    discount: float = 0.95
    n_directions: int = 5
    length: int = 25
    horizon: int = 25
    layout_seed: int = 0


def _grid_index(x, y, side):
    return y * side + x


def _grid_moves(side, walls=()):
    """Deterministic 4-action transitions on a side x side grid; bumps stay put."""
    S = side * side
    T = np.zeros((S, 4, S))
    blocked = set(walls)
    for y in range(side):
        for x in range(side):
            s = _grid_index(x, y, side)
            for a, (dx, dy) in _MOVES.items():
                nx, ny = x + dx, y + dy
                if (
                    s in blocked
                    or not (0 <= nx < side and 0 <= ny < side)
                    or _grid_index(nx, ny, side) in blocked
                ):
                    T[s, a, s] = 1.0
                else:
                    T[s, a, _grid_index(nx, ny, side)] = 1.0
    return T


def _goal_only_grid(side, walls, discount, kind):
    T = _grid_moves(side, walls)
    S = side * side
    start = _grid_index(0, 0, side)
    goal = _grid_index(side - 1, side - 1, side)
    T[goal] = 0.0
    T[goal, :, goal] = 1.0
    rho0 = np.zeros(S)
    rho0[start] = 1.0
    terminal = np.zeros(S, dtype=bool)
    terminal[goal] = True
    info = {"kind": kind.value, "side": side, "start": start, "goal": goal, "walls": sorted(walls)}
    return T, rho0, terminal, info


def build_gridworld(kind, params: GridParams | None = None, **overrides) -> TabularMdp:
    """Build one of the benchmark gridworlds.

    Grid states are indexed ``y * side + x`` with ``y = 0`` the bottom row.
    The start is the lower-left cell and the goal the upper-right cell, which
    is terminal. The N-direction world is a corridor of ``length`` cells where
    exactly one of ``n_directions`` actions per cell advances and pays +1.
    """
    kind = GridKind(kind)
    params = params or GridParams()
    if overrides:
        params = GridParams(**{**params.__dict__, **overrides})
    if not 0.0 <= params.slip <= 1.0:
        raise ValueError(f"slip probability must lie in [0, 1], got {params.slip}")

    if kind is GridKind.N_DIRECTION:
        mdp = _n_direction(params)
    else:
        side = params.side
        if side < 2:
            raise ValueError(f"grid side must be at least 2, got {side}")
        walls = ()
        if kind is GridKind.DOORWAY:
            if side < 3:
                raise ValueError("doorway grid needs side >= 3")
            wall_y, door_x = side // 2, side // 2
            walls = tuple(_grid_index(x, wall_y, side) for x in range(side) if x != door_x)
        T, rho0, terminal, info = _goal_only_grid(side, walls, params.discount, kind)
        if kind is GridKind.KEY_ACTION:
            key = _grid_index(0, side // 2, side)
            R = np.zeros((side * side, 4))
            R[key, RIGHT] = 1.0
            info["key_state"] = key
        else:
            R = np.zeros(side * side)
            R[info["goal"]] = 1.0
        if kind is GridKind.DOORWAY:
            info["door"] = _grid_index(side // 2, side // 2, side)
        info["horizon"] = 4 * side * side
        mdp = TabularMdp(T, R, params.discount, rho0, terminal, info)
    if params.slip > 0.0:
        mdp = apply_stochasticity(mdp, params.slip)
    mdp.info["slip"] = params.slip
    return mdp


def _n_direction(params: GridParams) -> TabularMdp:
    N, L = params.n_directions, params.length
    if N < 2:
        raise ValueError(f"N-direction world needs at least 2 directions, got {N}")
    if L < 2:
        raise ValueError(f"corridor length must be at least 2, got {L}")
    correct = np.random.default_rng(params.layout_seed).integers(N, size=L)
    T = np.zeros((L, N, L))
    R = np.zeros((L, N))
    for s in range(L):
        for a in range(N):
            if s < L - 1 and a == correct[s]:
                T[s, a, s + 1] = 1.0
                R[s, a] = 1.0
            else:
                T[s, a, s] = 1.0
    rho0 = np.zeros(L)
    rho0[0] = 1.0
    terminal = np.zeros(L, dtype=bool)
    terminal[L - 1] = True
    info = {
        "kind": GridKind.N_DIRECTION.value,
        "correct_actions": correct.tolist(),
        "horizon": params.horizon,
        "start": 0,
        "goal": L - 1,
    }
    return TabularMdp(T, R, params.discount, rho0, terminal, info)


def reference_policies(mdp: TabularMdp) -> tuple[TabularPolicy, TabularPolicy]:
    """The two deterministic policies compared in the gridworld metric sweep.

    Distinct policies: the first heads for the left column and follows it up
    and then along the top row; the second heads for the bottom row, goes
    right, then up the right column. Doorway: both walk to the door and
    through it, except the second steps left instead of up directly below
    the door. Key action: both climb the left column; at the key cell the
    first steps right (collecting the reward), the second keeps going up.
    """
    kind = GridKind(mdp.info["kind"])
    side = mdp.info["side"]
    S = side * side
    a1 = np.zeros(S, dtype=int)
    a2 = np.zeros(S, dtype=int)
    top = side - 1
    for y in range(side):
        for x in range(side):
            s = _grid_index(x, y, side)
            if kind is GridKind.DISTINCT_POLICIES:
                a1[s] = RIGHT if y == top else (UP if x == 0 else LEFT)
                a2[s] = UP if x == top else (RIGHT if y == 0 else DOWN)
            elif kind is GridKind.DOORWAY:
                wall_y = door_x = side // 2
                if y < wall_y:
                    act = RIGHT if x < door_x else (LEFT if x > door_x else UP)
                elif y == wall_y:
                    act = UP
                else:
                    act = UP if y < top else RIGHT
                a1[s] = a2[s] = act
                if y == wall_y - 1 and x == door_x:
                    a2[s] = LEFT
            elif kind is GridKind.KEY_ACTION:
                key_y = side // 2
                if x == 0 and y < key_y:
                    act = UP
                else:
                    act = UP if y < top else RIGHT
                a1[s] = a2[s] = act
                if x == 0 and y == key_y:
                    a1[s] = RIGHT
            else:
                raise ValueError(f"no reference policies for {kind.value}")
    return (
        TabularPolicy.deterministic(a1, mdp.n_actions),
        TabularPolicy.deterministic(a2, mdp.n_actions),
    )


# --- dynamics --------------------------------------------------------------


def apply_stochasticity(mdp: TabularMdp, eps: float) -> TabularMdp:
    """With probability ``eps`` the executed move is that of a uniformly random action."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"eps must lie in [0, 1], got {eps}")
    mixed = mdp.transition.mean(axis=1, keepdims=True)
    T = (1.0 - eps) * mdp.transition + eps * mixed
    return mdp.replace(transition=T)


def policy_transition(mdp: TabularMdp, pi: TabularPolicy) -> np.ndarray:
    """State-to-state kernel ``P[s, s'] = sum_a pi[s, a] T[s, a, s']``."""
    _check_shapes(mdp, pi)
    return np.einsum("sa,sat->st", pi.probs, mdp.transition)


def policy_reward(mdp: TabularMdp, pi: TabularPolicy) -> np.ndarray:
    _check_shapes(mdp, pi)
    if mdp.state_reward:
        return mdp.reward.copy()
    return np.einsum("sa,sa->s", pi.probs, mdp.reward)


def value_dp(mdp: TabularMdp, pi: TabularPolicy, tol: float = 1e-10) -> np.ndarray:
    """Policy evaluation to sup-norm accuracy ``tol``.

    Sums the series ``sum_t (g D P)^t R`` by doubling: after ``n`` terms the
    tail is bounded by ``g^n |R|_inf / (1 - g)``. Terminal states contribute
    their reward and nothing after it.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    P = policy_transition(mdp, pi)
    R = policy_reward(mdp, pi)
    gamma = mdp.discount
    if gamma == 0.0:
        return R
    C = gamma * (~mdp.terminal)[:, None] * P
    scale = float(np.max(np.abs(R))) / (1.0 - gamma)
    V, weight = R.copy(), gamma
    for _ in range(_MAX_DOUBLINGS):
        if weight * scale <= tol:
            return V
        V = V + C @ V
        C = C @ C
        weight *= weight
    raise ConvergenceError("policy evaluation did not converge")


def value_exact(mdp: TabularMdp, pi: TabularPolicy) -> np.ndarray:
    """Closed-form ``(I - g D P) V = R`` solve, ``D`` masking terminal states."""
    P = policy_transition(mdp, pi)
    R = policy_reward(mdp, pi)
    A = np.eye(mdp.n_states) - mdp.discount * (~mdp.terminal)[:, None] * P
    return np.linalg.solve(A, R)


def visitation_dp(mdp: TabularMdp, pi: TabularPolicy, tol: float = 1e-12) -> np.ndarray:
    """Discounted state visitation ``(1 - g) sum_t g^t rho0 P^t``, truncated once ``g^n <= tol``."""
    P = policy_transition(mdp, pi)
    gamma = mdp.discount
    acc = mdp.initial_dist.copy()   # the first n = 1 terms
    weight = gamma                   # g^n
    for _ in range(_MAX_DOUBLINGS):
        if weight <= tol:
            return (1.0 - gamma) * acc
        acc = acc + weight * (acc @ P)
        P = P @ P
        weight *= weight
    raise ConvergenceError("visitation series did not converge")


def expected_return(mdp: TabularMdp, pi: TabularPolicy, tol: float = 1e-10) -> float:
    return float(mdp.initial_dist @ value_dp(mdp, pi, tol))


# --- sampling ----------------------------------------------------------------


def rollout_batch(mdp: TabularMdp, pi: TabularPolicy, horizon: int, n_episodes: int, rng):
    """Sample ``n_episodes`` episodes; returns the padded arrays of ``sample_episodes``."""
    _check_shapes(mdp, pi)
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    rng = np.random.default_rng(rng)
    s0 = np.searchsorted(categorical_cdf(mdp.initial_dist), rng.random(n_episodes), side="right")
    s0 = np.minimum(s0, mdp.n_states - 1)
    u_act = rng.random((n_episodes, horizon))
    u_next = rng.random((n_episodes, horizon))
    return sample_episodes(
        categorical_cdf(mdp.transition),
        categorical_cdf(pi.probs),
        mdp.reward_sa(),
        mdp.terminal,
        s0,
        u_act,
        u_next,
    )


def rollout(mdp: TabularMdp, pi: TabularPolicy, horizon: int, rng_seed: int) -> Trajectory:
    states, actions, rewards, next_states, lengths = rollout_batch(mdp, pi, horizon, 1, rng_seed)
    n = int(lengths[0])
    return Trajectory(
        states=states[0, :n].copy(),
        actions=actions[0, :n].copy(),
        rewards=rewards[0, :n].copy(),
        next_states=next_states[0, :n].copy(),
        discount=mdp.discount,
    )


def rollouts(mdp: TabularMdp, pi: TabularPolicy, horizon: int, n_episodes: int, rng) -> list[Trajectory]:
    states, actions, rewards, next_states, lengths = rollout_batch(mdp, pi, horizon, n_episodes, rng)
    out = []
    for e in range(n_episodes):
        n = int(lengths[e])
        out.append(
            Trajectory(states[e, :n].copy(), actions[e, :n].copy(), rewards[e, :n].copy(),
                       next_states[e, :n].copy(), mdp.discount)
        )
    return out


def random_mdp(n_states: int, n_actions: int, rng, discount: float = 0.9,
               state_reward: bool = True, sparsity: float = 0.0) -> TabularMdp:
    """Random dense MDP; used by tests and the fineness checks."""
    rng = np.random.default_rng(rng)
    T = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    if sparsity > 0:
        T = T * (rng.random(T.shape) >= sparsity)
        T[..., 0] += (T.sum(-1) == 0)
        T /= T.sum(-1, keepdims=True)
    R = rng.normal(size=n_states if state_reward else (n_states, n_actions))
    rho0 = rng.dirichlet(np.ones(n_states))
    return TabularMdp(T, R, discount, rho0)
