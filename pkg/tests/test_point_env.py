import numpy as np
import pytest

from polabs import point_env as P


def test_geometry_and_reset():
    env = P.PointEnv()
    assert env.initial_distance == 8.0
    pos, vel = env.reset(100, 0)
    assert np.all(np.abs(pos) <= env.start_jitter) and np.all(vel == 0)


def test_dynamics_step():
    env = P.PointEnv()
    pos, vel = np.array([[5.0, 0.0]]), np.array([[0.4, 0.0]])
    new, v, r = env.step(pos, vel, np.array([[2.0, 1.0]]))   # action clipped to the box
    assert np.allclose(v, [[0.75 * 0.4 + 0.25, 0.25]])
    assert np.allclose(new, pos + v)
    assert r[0] == pytest.approx(-np.linalg.norm(new[0] - [0.0, 8.0]))


def test_wall_blocks_crossing_within_span():
    env = P.PointEnv()
    pos, vel = np.array([[0.0, 2.9], [6.0, 2.9]]), np.array([[0.0, 0.5], [0.0, 0.5]])
    new, v, _ = env.step(pos, vel, np.zeros((2, 2)))
    assert new[0, 1] == pytest.approx(3.0 - 1e-3) and v[0, 1] == 0.0
    assert new[1, 1] > 3.0   # outside the wall's span the move goes through


def test_greedy_gets_stuck_detour_arrives():
    env = P.PointEnv(start_jitter=0.0)
    greedy = P.final_distance(env, P.run(env, P.greedy_controller(env), 1, 0))[0]
    detour = P.final_distance(env, P.run(env, P.detour_controller(env), 1, 0))[0]
    assert greedy > 0.5 * env.initial_distance
    assert detour < 0.1


def test_batch_returns():
    env = P.PointEnv()
    b = P.run(env, P.greedy_controller(env), 3, 1)
    assert b.states.shape == (3, 50, 6) and b.actions.shape == (3, 50, 2)
    t = 10
    expect = sum(env.discount ** k * b.rewards[:, t + k] for k in range(50 - t))
    assert np.allclose(b.returns[:, t], expect)
    assert np.allclose(b.episode_returns, b.rewards.sum(axis=1))
    assert np.array_equal(b.states[:, 1], b.next_states[:, 0])
