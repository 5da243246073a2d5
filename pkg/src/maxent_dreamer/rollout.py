"""Real-environment collection, the sequence replay buffer, and imagination."""
from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .agent import ExplorationNoise, perturb
from .envs import Env, TabularMdp
from .world_model import LatentState, WorldModel


@dataclass
class Episode:
    observations: np.ndarray  # (T+1, obs_dim)
    actions: np.ndarray  # (T, act_dim)
    rewards: np.ndarray  # (T,)
    dones: np.ndarray  # (T,) true only for a real terminal at the last index

    def __post_init__(self):
        T = len(self.actions)
        if self.observations.shape[0] != T + 1 or len(self.rewards) != T or len(self.dones) != T:
            raise ValueError("inconsistent episode lengths")
        if T and self.dones[:-1].any():
            raise ValueError("done flag before the final transition")

    def __len__(self):
        return len(self.actions)


@dataclass
class SequenceBatch:
    observations: torch.Tensor  # (B, L, obs_dim)
    actions: torch.Tensor  # (B, L-1, act_dim)
    rewards: torch.Tensor  # (B, L-1)
    dones: torch.Tensor  # (B, L-1)


@dataclass
class ImaginedTrajectory:
    feats: torch.Tensor  # (H+1, B, d)
    actions: torch.Tensor  # (H, B, a)
    rewards: torch.Tensor  # (H, B)
    continues: torch.Tensor  # (H, B)

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]


class ReplayBuffer:
    """Whole-episode store bounded by total transitions, evicting oldest first."""

    def __init__(self, capacity: int = 100_000, seed: int = 0):
        self.capacity = capacity
        self.episodes: deque[Episode] = deque()
        self.steps = 0
        self.rng = np.random.default_rng(seed)

    def __len__(self):
        return len(self.episodes)

    def push(self, ep: Episode) -> None:
        if len(ep) > self.capacity:
            raise ValueError("episode longer than buffer capacity")
        self.episodes.append(ep)
        self.steps += len(ep)
        while self.steps > self.capacity:
            self.steps -= len(self.episodes.popleft())

    def sample_sequences(self, batch: int, length: int) -> SequenceBatch:
        """B windows of ``length`` observations, uniform over all valid starts."""
        if length < 2:
            raise ValueError("length must be >= 2")
        starts = np.array([max(len(ep) + 2 - length, 0) for ep in self.episodes], dtype=np.int64)
        total = starts.sum()
        if total == 0:
            raise ValueError(f"no stored episode holds {length} observations")
        flat = self.rng.integers(0, total, size=batch)
        bounds = np.cumsum(starts)
        obs, act, rew, done = [], [], [], []
        for f in flat:
            e = int(np.searchsorted(bounds, f, side="right"))
            i = int(f - (bounds[e] - starts[e]))
            ep = self.episodes[e]
            obs.append(ep.observations[i:i + length])
            act.append(ep.actions[i:i + length - 1])
            rew.append(ep.rewards[i:i + length - 1])
            done.append(ep.dones[i:i + length - 1])
        f32 = torch.float32
        return SequenceBatch(torch.as_tensor(np.stack(obs), dtype=f32), torch.as_tensor(np.stack(act), dtype=f32),
                             torch.as_tensor(np.stack(rew), dtype=f32), torch.as_tensor(np.stack(done), dtype=f32))


Policy = Callable[[torch.Tensor, "torch.Generator | None"], torch.Tensor]


@torch.no_grad()
def collect_episode(env: Env, model: WorldModel, policy: Policy, noise: ExplorationNoise | None,
                    generator: torch.Generator, seed: int, squash=None, random_policy: bool = False) -> Episode:
    """Run one full episode, filtering observations through the posterior.

    ``squash`` (the actor's bound module) is needed whenever ``noise`` is
    given.  With ``random_policy`` every action is uniform in the bounds.
    """
    spec = env.spec()
    low = torch.as_tensor(spec.act_low, dtype=torch.float32)
    high = torch.as_tensor(spec.act_high, dtype=torch.float32)
    obs = env.reset(seed)
    observations, actions, rewards, dones = [obs], [], [], []
    state = model.init_state(1)
    o = torch.as_tensor(obs, dtype=torch.float32)[None]
    if model.cfg.modifications:
        state, _ = model.observe_step(state, None, o, generator)
    while True:
        if random_policy:
            a = low + (high - low) * torch.rand((1, spec.act_dim), generator=generator)
        else:
            a = policy(state.feat(), generator)
            if noise is not None:
                a = perturb(a, squash, noise, generator)
        result = env.step(a[0].numpy().astype(np.float64))
        actions.append(a[0].numpy().copy())
        observations.append(result.obs)
        rewards.append(result.reward)
        dones.append(bool(result.info.get("terminal", False)))
        if result.done:
            break
        o = torch.as_tensor(result.obs, dtype=torch.float32)[None]
        state, _ = model.observe_step(state, a, o, generator)
    return Episode(np.asarray(observations, dtype=np.float32), np.asarray(actions, dtype=np.float32),
                   np.asarray(rewards, dtype=np.float32), np.asarray(dones, dtype=bool))


def imagine_rollout(model, policy: Policy, start: LatentState, horizon: int,
                    generator: torch.Generator | None = None) -> ImaginedTrajectory:
    """Prior-driven rollout of ``horizon`` steps from ``start``; differentiable in the policy."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    state = start
    feats, actions, rewards, continues = [state.feat()], [], [], []
    for _ in range(horizon):
        a = policy(state.feat(), generator)
        state, _, r, c = model.imagine_step(state, a, generator)
        feats.append(state.feat())
        actions.append(a)
        rewards.append(r)
        continues.append(c)
    return ImaginedTrajectory(torch.stack(feats), torch.stack(actions), torch.stack(rewards), torch.stack(continues))


class ChainModel:
    """Exact, frozen world model of a tabular chain in the imagination interface.

    The latent ``h`` is the one-hot current state (``z`` is empty).  A
    continuous action ``a`` in [-1, 1] picks the right-move with
    probability ``(a + 1) / 2``; the next state is sampled.
    """

    def __init__(self, mdp: TabularMdp, dtype=torch.float32):
        self.mdp = mdp
        self.P = torch.as_tensor(mdp.transition, dtype=dtype)  # (S, A, S)
        self.R = torch.as_tensor(mdp.reward, dtype=dtype)  # (S, A)
        self.dtype = dtype

    def one_hot(self, states) -> LatentState:
        h = torch.nn.functional.one_hot(torch.as_tensor(states), self.mdp.n_states).to(self.dtype)
        return LatentState(h, h.new_zeros(*h.shape[:-1], 0))

    def action_probs(self, action: torch.Tensor) -> torch.Tensor:
        return chain_action_probs(action, self.mdp.n_actions)

    def imagine_step(self, state: LatentState, action: torch.Tensor, generator=None):
        pi = self.action_probs(action)  # (B, A)
        nxt = torch.einsum("bs,ba,sat->bt", state.h, pi, self.P)
        reward = torch.einsum("bs,ba,sa->b", state.h, pi, self.R)
        idx = torch.multinomial(nxt.detach().clamp_min(0), 1, generator=generator).squeeze(-1)
        nxt = torch.nn.functional.one_hot(idx, self.mdp.n_states).to(self.dtype)
        cont = reward.new_ones(reward.shape)
        return LatentState(nxt, nxt.new_zeros(*nxt.shape[:-1], 0)), None, reward, cont


def chain_action_probs(action: torch.Tensor, n_actions: int) -> torch.Tensor:
    """Map a continuous action in [-1, 1] to (left, right) move probabilities."""
    if n_actions == 1:
        return action.new_ones(*action.shape[:-1], 1)
    right = ((action[..., :1] + 1.0) / 2.0).clamp(0.0, 1.0)
    return torch.cat([1.0 - right, right], -1)


def write_episode(path: str | Path, ep: Episode) -> None:
    """Binary dump: u32 obs_dim, act_dim, T (little endian) then f32 observations, actions, rewards, dones."""
    T = len(ep)
    obs_dim = ep.observations.shape[1]
    act_dim = ep.actions.shape[1] if T else 0
    with open(path, "wb") as fh:
        fh.write(struct.pack("<III", obs_dim, act_dim, T))
        for arr in (ep.observations, ep.actions, ep.rewards, ep.dones):
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_episode(path: str | Path) -> Episode:
    data = Path(path).read_bytes()
    obs_dim, act_dim, T = struct.unpack_from("<III", data, 0)
    off = 12
    parts = []
    for count in ((T + 1) * obs_dim, T * act_dim, T, T):
        parts.append(np.frombuffer(data, dtype="<f4", count=count, offset=off))
        off += 4 * count
    if off != len(data):
        raise ValueError("trailing bytes in episode file")
    return Episode(parts[0].reshape(T + 1, obs_dim).astype(np.float32), parts[1].reshape(T, act_dim).astype(np.float32),
                   parts[2].astype(np.float32), parts[3].astype(bool))
