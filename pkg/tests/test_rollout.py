import inspect
import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from maxent_dreamer.agent import ExplorationNoise, StochasticActor
from maxent_dreamer.envs import Corridor1D, LockSequence, PointMass2D
from maxent_dreamer.rollout import (Episode, ReplayBuffer, collect_episode, imagine_rollout, read_episode,
                                    write_episode)
from maxent_dreamer.world_model import WorldModel, WorldModelConfig


def make_episode(T, obs_dim=2, act_dim=1, offset=0.0, terminal=False):
    obs = offset + np.arange((T + 1) * obs_dim, dtype=np.float32).reshape(T + 1, obs_dim)
    act = offset + np.arange(T * act_dim, dtype=np.float32).reshape(T, act_dim)
    rew = offset + np.arange(T, dtype=np.float32)
    done = np.zeros(T, dtype=bool)
    done[-1] = terminal
    return Episode(obs, act, rew, done)


def test_episode_validation():
    with pytest.raises(ValueError):
        Episode(np.zeros((3, 1)), np.zeros((3, 1)), np.zeros(3), np.zeros(3, bool))
    done = np.array([True, False])
    with pytest.raises(ValueError):
        Episode(np.zeros((3, 1)), np.zeros((2, 1)), np.zeros(2), done)


def test_eviction_is_oldest_first():
    buf = ReplayBuffer(capacity=100)
    eps = [make_episode(50, offset=1000.0 * k) for k in range(3)]
    for ep in eps:
        buf.push(ep)
    assert len(buf) == 2 and buf.steps == 100
    assert buf.episodes[0] is eps[1]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 40), min_size=1, max_size=30), st.integers(40, 200))
def test_capacity_never_exceeded(lengths, capacity):
    buf = ReplayBuffer(capacity=capacity)
    for T in lengths:
        buf.push(make_episode(T))
        assert buf.steps <= capacity
        assert buf.steps == sum(len(e) for e in buf.episodes)


def test_oversized_episode_rejected():
    with pytest.raises(ValueError):
        ReplayBuffer(capacity=10).push(make_episode(11))


def test_single_episode_of_exact_length():
    buf = ReplayBuffer(seed=0)
    ep = make_episode(7)
    buf.push(ep)
    batch = buf.sample_sequences(5, 8)
    for b in range(5):
        assert np.array_equal(batch.observations[b].numpy(), ep.observations)
        assert np.array_equal(batch.actions[b].numpy(), ep.actions)


def test_short_episodes_are_never_sampled():
    buf = ReplayBuffer(seed=0)
    buf.push(make_episode(3, offset=-500.0))
    with pytest.raises(ValueError):
        buf.sample_sequences(2, 10)
    buf.push(make_episode(20))
    batch = buf.sample_sequences(200, 10)
    assert float(batch.observations.min()) >= 0.0


def test_sampled_windows_are_verbatim_and_within_episodes():
    buf = ReplayBuffer(seed=1)
    eps = [make_episode(T, offset=1000.0 * k, terminal=k % 2 == 0) for k, T in enumerate([12, 30, 9, 17])]
    for ep in eps:
        buf.push(ep)
    L = 6
    batch = buf.sample_sequences(10_000, L)
    starts_seen = set()
    for b in range(10_000):
        o = batch.observations[b].numpy()
        k = int(o[0, 0] // 1000)
        ep = eps[k]
        i = int(np.flatnonzero(ep.observations[:, 0] == o[0, 0])[0])
        starts_seen.add((k, i))
        assert i + L <= len(ep) + 1
        assert np.array_equal(o, ep.observations[i:i + L])
        assert np.array_equal(batch.actions[b].numpy(), ep.actions[i:i + L - 1])
        assert np.array_equal(batch.rewards[b].numpy(), ep.rewards[i:i + L - 1])
        assert np.array_equal(batch.dones[b].numpy(), ep.dones[i:i + L - 1])
    assert len(starts_seen) == sum(len(ep) + 2 - L for ep in eps)


def test_seeded_sampling_is_reproducible():
    def draw():
        buf = ReplayBuffer(seed=5)
        for k in range(3):
            buf.push(make_episode(15, offset=100.0 * k))
        return buf.sample_sequences(8, 5).observations

    assert torch.equal(draw(), draw())


def _model(env, mods=True):
    spec = env.spec()
    torch.manual_seed(0)
    wm = WorldModel(WorldModelConfig(spec.obs_dim, spec.act_dim, deter=8, stoch=4, hidden=16, modifications=mods))
    actor = StochasticActor(wm.feat_dim, spec.act_dim, spec.act_low, spec.act_high, hidden=16)
    return wm, actor


@pytest.mark.parametrize("env_cls", [Corridor1D, PointMass2D, LockSequence])
def test_collect_is_deterministic_and_bounded(env_cls):
    env = env_cls()
    wm, actor = _model(env)

    def run():
        return collect_episode(env, wm, lambda f, g: actor(f, g), ExplorationNoise(), torch.Generator().manual_seed(0),
                               seed=3, squash=actor.squash)

    a, b = run(), run()
    assert np.array_equal(a.observations, b.observations) and np.array_equal(a.actions, b.actions)
    assert 1 <= len(a) <= env.spec().max_steps
    spec = env.spec()
    low, high = spec.act_low.astype(np.float32), spec.act_high.astype(np.float32)
    assert np.all(a.actions >= low) and np.all(a.actions <= high)


def test_epsilon_one_collects_uniform_actions():
    env = LockSequence(max_steps=2000)
    wm, actor = _model(env)
    ep = collect_episode(env, wm, lambda f, g: actor(f, g), ExplorationNoise(1.0, 0.0),
                         torch.Generator().manual_seed(0), seed=0, squash=actor.squash)
    hist = np.histogram(ep.actions[:, 0], bins=4, range=(-1, 1))[0] / len(ep)
    assert np.all(np.abs(hist - 0.25) < 0.05)


def test_terminal_flag_recorded_on_last_step():
    env = PointMass2D(start_jitter=0.0)
    wm, _ = _model(env)
    ep = collect_episode(env, wm, lambda f, g: torch.tensor([[0.0, 1.0]]), None, torch.Generator(), seed=0)
    assert ep.dones[-1] and not ep.dones[:-1].any() and len(ep) < env.max_steps


def test_imagination_shapes_and_determinism():
    wm, actor = _model(PointMass2D())
    start = wm.init_state(3)

    def run(H):
        return imagine_rollout(wm, lambda f, g: actor(f, g), start, H, torch.Generator().manual_seed(0))

    one = run(1)
    assert one.actions.shape == (1, 3, 2) and one.feats.shape == (2, 3, wm.feat_dim) and one.horizon == 1
    t1, t2 = run(5), run(5)
    assert torch.equal(t1.feats, t2.feats) and torch.equal(t1.rewards, t2.rewards)
    assert torch.all((t1.continues >= 0) & (t1.continues <= 1))
    with pytest.raises(ValueError):
        run(0)


def test_imagination_takes_no_observations():
    params = inspect.signature(imagine_rollout).parameters
    assert not any("obs" in name for name in params)


def test_episode_file_round_trip(tmp_path):
    ep = make_episode(9, obs_dim=3, act_dim=2, terminal=True)
    path = tmp_path / "ep.bin"
    write_episode(path, ep)
    raw = path.read_bytes()
    assert struct.unpack_from("<III", raw) == (3, 2, 9)
    assert len(raw) == 12 + 4 * (10 * 3 + 9 * 2 + 9 + 9)
    back = read_episode(path)
    for name in ("observations", "actions", "rewards", "dones"):
        assert np.array_equal(np.asarray(getattr(back, name), dtype=np.float32),
                              np.asarray(getattr(ep, name), dtype=np.float32))
    path.write_bytes(raw + b"\0")
    with pytest.raises(ValueError):
        read_episode(path)
