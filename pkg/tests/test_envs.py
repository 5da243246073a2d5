import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maxent_dreamer.envs import (ChainMdp, Corridor1D, EnvError, EnvSpec, LockSequence, PointMass2D,
                                 TabularMdp, make_env)


def test_reset_observations():
    assert np.array_equal(Corridor1D().reset(3), [0.0])
    assert np.array_equal(LockSequence().reset(7), [0.0, 0.0, 0.0])
    o = PointMass2D().reset(0)
    assert o.shape == (4,) and np.all(o[2:] == 0.0)


def test_corridor_reward_rule():
    env = Corridor1D()
    env.reset(0)
    env.set_position(0.88)
    r = env.step(np.array([0.05]))
    assert r.obs[0] == pytest.approx(0.93)
    assert r.reward == 1.0 and not r.done
    env.set_position(0.5)
    assert env.step(np.array([0.0])).reward == 0.0


def test_corridor_constant_push_timing():
    # reward is judged after the move: 0.05 * k >= 0.9 first holds at k = 18
    env = Corridor1D()
    env.reset(0)
    rewards = [env.step(np.array([0.05])).reward for _ in range(100)]
    assert sum(rewards[:17]) == 0.0
    assert all(r == 1.0 for r in rewards[17:])
    with pytest.raises(EnvError):
        env.step(np.array([0.05]))


def test_actions_are_clipped():
    env = Corridor1D()
    env.reset(0)
    assert env.step(np.array([10.0])).obs[0] == pytest.approx(0.05)


def test_step_after_done_raises():
    env = Corridor1D(max_steps=2)
    env.reset(0)
    env.step(np.zeros(1))
    assert env.step(np.zeros(1)).done
    with pytest.raises(EnvError):
        env.step(np.zeros(1))


@pytest.mark.parametrize("name,obs_dim,act_dim", [("corridor1d", 1, 1), ("pointmass2d", 4, 2),
                                                  ("locksequence", 3, 1), ("chainmdp:5", 5, 1)])
def test_env_dimensions(name, obs_dim, act_dim):
    spec = make_env(name).spec()
    assert (spec.obs_dim, spec.act_dim) == (obs_dim, act_dim)


def test_corridor_bounds_and_sizes():
    spec = Corridor1D().spec()
    assert spec.max_steps == 100
    assert np.allclose(spec.act_low, -0.05) and np.allclose(spec.act_high, 0.05)


def test_unknown_env_name():
    with pytest.raises(ValueError):
        make_env("cartpole")


def test_envspec_validation():
    with pytest.raises(ValueError):
        EnvSpec(1, 1, np.ones(1), np.ones(1), 10, np.zeros(1), np.ones(1))
    with pytest.raises(ValueError):
        EnvSpec(1, 1, -np.ones(1), np.ones(1), 0, np.zeros(1), np.ones(1))


def test_as_tabular_only_for_chain():
    with pytest.raises(EnvError):
        Corridor1D().as_tabular()


@pytest.mark.parametrize("n", range(2, 51))
def test_chain_rows_sum_to_one(n):
    for env in (ChainMdp(n), ChainMdp(n, slip=0.3, two_way=True)):
        mdp = env.as_tabular()
        assert mdp.transition.shape == (n, mdp.n_actions, n)
        assert np.allclose(mdp.transition.sum(-1), 1.0, atol=1e-9, rtol=0)
        mdp.validate()


def test_tabular_validation_rejects_bad_rows():
    P = np.full((2, 1, 2), 0.6)
    with pytest.raises(ValueError):
        TabularMdp(P, np.zeros((2, 1)), np.zeros(2, bool), np.array([1.0, 0.0])).validate()


def test_chain_reaches_end():
    env = ChainMdp(4)
    env.reset(0)
    total = sum(env.step(np.ones(1)).reward for _ in range(10))
    assert env.s == 3 and total == 1.0


def test_lock_sequence_solution():
    env = LockSequence()
    env.reset(0)
    plan = [1.0] * 3 + [1.0] + [1.0] * 3 + [-1.0] + [1.0] * 3 + [1.0] + [1.0] * 2
    rewards = [env.step(np.array([a])).reward for a in plan]
    assert env.passed == 3
    assert rewards[-1] == 1.0 and sum(rewards[:-1]) == 0.0


def test_lock_sequence_wrong_sign_blocks():
    env = LockSequence()
    env.reset(0)
    for _ in range(3):
        env.step(np.array([1.0]))
    obs = env.step(np.array([-1.0])).obs  # wrong sign backs away instead of unlocking
    assert env.passed == 0 and obs[0] == pytest.approx(0.15)


def test_pointmass_hazard_terminates():
    env = PointMass2D(start_jitter=0.0)
    env.reset(0)
    done = False
    for _ in range(100):
        res = env.step(np.array([0.0, 1.0]))
        if res.done:
            done = True
            break
    assert done and res.info["terminal"] and not res.info["truncated"]
    assert abs(res.obs[1]) >= env.hazard


def test_pointmass_barrier_blocks_the_straight_route():
    env = PointMass2D(start_jitter=0.0)
    env.reset(0)
    for _ in range(100):
        res = env.step(np.array([1.0, 0.0]))
        if res.done:
            break
    assert res.info["terminal"] and res.reward == 0.0 and res.obs[0] < env.goal_x


def test_pointmass_barrier_catches_a_segment_that_jumps_over_it():
    env = PointMass2D()
    assert env._crosses_barrier(np.array([-0.2, 0.0]), np.array([0.2, 0.1]))
    assert not env._crosses_barrier(np.array([-0.2, 0.6]), np.array([0.2, 0.6]))
    assert not env._crosses_barrier(np.array([-0.2, 0.0]), np.array([-0.15, 0.0]))
    assert env._crosses_barrier(np.array([0.0, 0.2]), np.array([0.0, 0.2]))


def test_pointmass_detour_reaches_the_goal():
    env = PointMass2D(start_jitter=0.0)
    env.reset(0)
    plan = [np.array([0.0, 1.0])] * 6 + [np.array([0.0, -0.6])] * 3 + [np.array([1.0, 0.0])] * 40
    rewards = []
    for a in plan:
        res = env.step(a)
        rewards.append(res.reward)
        assert not res.done
    assert sum(rewards) > 0


def test_pointmass_without_termination_runs_full_length():
    env = PointMass2D(termination=False)
    env.reset(0)
    steps = 0
    while True:
        steps += 1
        if env.step(np.array([0.0, 1.0])).done:
            break
    assert steps == env.max_steps


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), actions=st.lists(st.floats(-3, 3), min_size=1, max_size=120))
def test_same_seed_same_trajectory(seed, actions):
    def run():
        env = PointMass2D()
        out = [env.reset(seed)]
        for a in actions:
            res = env.step(np.array([a, -a / 2]))
            out.append(res.obs)
            assert np.all(np.isfinite(res.obs))
            if res.done:
                break
        return np.array(out)

    assert np.array_equal(run(), run())


@settings(max_examples=30, deadline=None)
@given(actions=st.lists(st.floats(-5, 5), min_size=1, max_size=200))
def test_done_forced_at_max_steps(actions):
    env = LockSequence(max_steps=20)
    env.reset(0)
    for t, a in enumerate(actions, 1):
        res = env.step(np.array([a]))
        assert 0.0 <= res.obs[0] <= 1.0
        if t == 20:
            assert res.done
        if res.done:
            break
