"""Actors, critics and the return targets they train on."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .world_model import mlp, smooth_l1


@dataclass
class LambdaConfig:
    gamma: float = 0.99
    lam: float = 0.95
    beta_start: float = 0.2
    beta_end: float = 0.0001

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")


@dataclass
class ExplorationNoise:
    eps_random: float = 0.1
    noise_std: float = 0.3  # fraction of the full action range


class _Squash(nn.Module):
    def __init__(self, low, high):
        super().__init__()
        low = torch.as_tensor(np.asarray(low), dtype=torch.float32)
        high = torch.as_tensor(np.asarray(high), dtype=torch.float32)
        self.register_buffer("center", (high + low) / 2)
        self.register_buffer("scale", (high - low) / 2)

    def forward(self, x):
        return self.center + self.scale * torch.tanh(x)


class StochasticActor(nn.Module):
    """Tanh-squashed diagonal Gaussian policy; the last layer starts at zero."""

    def __init__(self, feat_dim: int, act_dim: int, low, high, hidden: int = 200, min_std: float = 0.05):
        super().__init__()
        self.net = mlp(feat_dim, hidden, 2 * act_dim, layers=2)
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)
        self.squash = _Squash(low, high)
        self.min_std = min_std

    def dist_params(self, feat):
        mean, raw = self.net(feat).chunk(2, dim=-1)
        return mean, F.softplus(raw) + self.min_std

    def forward(self, feat, generator=None, eps=None):
        mean, std = self.dist_params(feat)
        if eps is None:
            eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        return self.squash(mean + std * eps)

    def mode(self, feat):
        return self.squash(self.dist_params(feat)[0])


class DeterministicActor(nn.Module):
    def __init__(self, feat_dim: int, act_dim: int, low, high, hidden: int = 200):
        super().__init__()
        self.net = mlp(feat_dim, hidden, act_dim, layers=2)
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)
        self.squash = _Squash(low, high)

    def forward(self, feat, generator=None, eps=None):
        return self.squash(self.net(feat))

    mode = forward


class QCritic(nn.Module):
    def __init__(self, feat_dim: int, act_dim: int, hidden: int = 200):
        super().__init__()
        self.net = mlp(feat_dim + act_dim, hidden, 1, layers=2)

    def forward(self, feat, action):
        return self.net(torch.cat([feat, action], -1)).squeeze(-1)


class VCritic(nn.Module):
    def __init__(self, feat_dim: int, hidden: int = 200):
        super().__init__()
        self.net = mlp(feat_dim, hidden, 1, layers=2)

    def forward(self, feat, action=None):
        return self.net(feat).squeeze(-1)


def act_stochastic(actor: StochasticActor, feat: torch.Tensor, generator: torch.Generator | None = None,
                   noise: ExplorationNoise | None = None) -> torch.Tensor:
    """Reparametrised policy sample, optionally with epsilon-random and additive noise on top."""
    action = actor(feat, generator)
    if noise is None:
        return action
    return perturb(action, actor.squash, noise, generator)


def act_deterministic(actor: DeterministicActor, feat: torch.Tensor) -> torch.Tensor:
    return actor(feat)


def perturb(action: torch.Tensor, squash: _Squash, noise: ExplorationNoise,
            generator: torch.Generator | None = None) -> torch.Tensor:
    center, half = squash.center, squash.scale
    low, high = center - half, center + half
    uniform = low + (high - low) * torch.rand(action.shape, generator=generator)
    jitter = noise.noise_std * (high - low) * torch.randn(action.shape, generator=generator)
    noisy = torch.minimum(torch.maximum(action + jitter, low), high)
    coin = torch.rand(action.shape[:-1] + (1,), generator=generator) < noise.eps_random
    return torch.where(coin, uniform, noisy)


def lambda_returns(rewards: torch.Tensor, values: torch.Tensor, continues: torch.Tensor,
                   gamma: float, lam: float) -> torch.Tensor:
    """Recursive lambda-returns over time-major tensors.

    rewards, continues: (H, ...); values: (H + 1, ...).
    G_t = r_t + gamma * c_t * ((1 - lam) * V_{t+1} + lam * G_{t+1}), G_H = V_H.
    """
    H = rewards.shape[0]
    if values.shape[0] != H + 1 or continues.shape[0] != H:
        raise ValueError("expected rewards/continues of length H and values of length H + 1")
    out = []
    nxt = values[H]
    for t in reversed(range(H)):
        nxt = rewards[t] + gamma * continues[t] * ((1.0 - lam) * values[t + 1] + lam * nxt)
        out.append(nxt)
    return torch.stack(out[::-1])


def critic_loss(critic: nn.Module, feats: torch.Tensor, actions: torch.Tensor, targets: torch.Tensor,
                first_only: bool = True, smooth: bool = True) -> torch.Tensor:
    """Regress critic outputs on detached lambda-return targets.

    feats (H+1, B, d), actions (H, B, a), targets (H, B).  With
    ``first_only`` only the rollout start contributes.
    """
    T = 1 if first_only else targets.shape[0]
    pred = critic(feats[:T].detach(), actions[:T].detach())
    tgt = targets[:T].detach()
    per = smooth_l1(pred, tgt) if smooth else (pred - tgt) ** 2
    return per.mean()


def actor_loss_stochastic(returns: torch.Tensor, entropy: torch.Tensor | None, beta: float) -> torch.Tensor:
    """-(G_0 + beta * H) averaged over the batch.  ``returns`` is the (B,) start-state return."""
    objective = returns if entropy is None else returns + beta * entropy
    return -objective.mean()


def actor_loss_deterministic(returns: torch.Tensor) -> torch.Tensor:
    return actor_loss_stochastic(returns, None, 0.0)


def beta_schedule(step: int, total_steps: int, cfg: LambdaConfig) -> float:
    if total_steps <= 0 or step >= total_steps:
        return cfg.beta_end
    step = max(step, 0)
    return cfg.beta_start + (cfg.beta_end - cfg.beta_start) * step / total_steps
