"""Discounted latent-state occupancy estimation with a mixture density network.

The occupancy of a policy from state ``s`` is the geometric mixture
``q(.|s) = (1 - g) * sum_i g**i * p(state i+1 steps ahead | s)``.  A
finite imagined rollout of ``n`` steps covers the first ``n`` terms
exactly; the remaining ``g**n`` of mass is bootstrapped with one sample
from a slowly updated target MDN conditioned on the rollout's last state.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .envs import TabularMdp

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class MixtureParams:
    log_weights: torch.Tensor  # (..., K), log-softmax normalised
    means: torch.Tensor  # (..., K, d)
    stds: torch.Tensor  # (..., K, d)

    @property
    def weights(self) -> torch.Tensor:
        return self.log_weights.exp()


@dataclass
class OccupancyConfig:
    gamma_q: float = 0.9
    soft_tau: float = 0.1
    lr: float = 2e-4
    horizon: int = 15

    def __post_init__(self):
        if not 0.0 < self.gamma_q < 1.0:
            raise ValueError("gamma_q must lie in (0, 1)")
        if not 0.0 < self.soft_tau <= 1.0:
            raise ValueError("soft_tau must lie in (0, 1]")


class MixtureDensityNet(nn.Module):
    def __init__(self, dim: int, components: int = 8, hidden: int = 256, min_std: float = 0.05):
        super().__init__()
        self.dim = dim
        self.components = components
        self.min_std = min_std
        self.body = nn.Sequential(nn.Linear(dim, hidden), nn.ELU(), nn.Linear(hidden, hidden), nn.ELU())
        self.head = nn.Linear(hidden, components * (1 + 2 * dim))

    def forward(self, s: torch.Tensor) -> MixtureParams:
        K, d = self.components, self.dim
        out = self.head(self.body(s))
        logits, means, raw_std = out.split([K, K * d, K * d], dim=-1)
        shape = (*s.shape[:-1], K, d)
        return MixtureParams(F.log_softmax(logits, dim=-1), means.reshape(shape),
                             F.softplus(raw_std.reshape(shape)) + self.min_std)


class MdnNets(nn.Module):
    """Online MDN plus a frozen target copy of identical shape."""

    def __init__(self, dim: int, components: int = 8, hidden: int = 256, min_std: float = 0.05):
        super().__init__()
        self.online = MixtureDensityNet(dim, components, hidden, min_std)
        self.target = copy.deepcopy(self.online)
        self.target.requires_grad_(False)


def mdn_forward(net: MixtureDensityNet, s: torch.Tensor) -> MixtureParams:
    params = net(s)
    if not (torch.isfinite(params.log_weights).all() and torch.isfinite(params.means).all()
            and torch.isfinite(params.stds).all()):
        raise FloatingPointError("MDN produced non-finite parameters")
    return params


def mdn_log_prob(params: MixtureParams, x: torch.Tensor) -> torch.Tensor:
    """log sum_k w_k N(x; mu_k, diag sigma_k^2), batched over leading dims."""
    x = x.unsqueeze(-2)
    z = (x - params.means) / params.stds
    comp = -0.5 * (z ** 2).sum(-1) - params.stds.log().sum(-1) - 0.5 * params.means.shape[-1] * LOG_2PI
    return torch.logsumexp(params.log_weights + comp, dim=-1)


def mdn_sample(params: MixtureParams, count: int = 1, generator: torch.Generator | None = None) -> torch.Tensor:
    """Ancestral samples.  Unbatched params give (count, d); batched give (count, ..., d)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    weights = params.weights.detach()
    batch_shape = weights.shape[:-1]
    K = weights.shape[-1]
    flat_w = weights.reshape(-1, K)
    idx = torch.multinomial(flat_w, count, replacement=True, generator=generator)  # (N, count)
    idx = idx.T.reshape(count, *batch_shape)
    d = params.means.shape[-1]
    gather = idx[..., None, None].expand(count, *batch_shape, 1, d)
    means = torch.gather(params.means.expand(count, *params.means.shape), -2, gather).squeeze(-2)
    stds = torch.gather(params.stds.expand(count, *params.stds.shape), -2, gather).squeeze(-2)
    eps = torch.randn(means.shape, generator=generator, dtype=means.dtype)
    return means + stds * eps


def occupancy_weights(n: int, gamma_q: float) -> tuple[np.ndarray, float]:
    """Weights of the n in-rollout states and of the bootstrap term; they sum to 1."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 < gamma_q < 1.0:
        raise ValueError("gamma_q must lie in (0, 1)")
    powers = gamma_q ** np.arange(n)
    return (1.0 - gamma_q) * powers, float(gamma_q ** n)


def continuation_weights(continues: torch.Tensor, gamma_q: float):
    """Occupancy weights when imagined states may be terminal.

    ``continues[i]`` is the probability that the state reached by transition
    ``i`` is not terminal.  A state reached alive takes ``(1 - g) g**i`` of
    the mass if the episode goes on and all the remaining ``g**i`` if it ends
    there.  Returns ``(w, w_boot)`` with shapes (n, ...) and (...); they
    still sum to 1 and reduce to :func:`occupancy_weights` when all
    continues are 1.
    """
    n = continues.shape[0]
    g = torch.as_tensor(gamma_q ** np.arange(n), dtype=continues.dtype).reshape(n, *([1] * (continues.dim() - 1)))
    alive = torch.cumprod(torch.cat([torch.ones_like(continues[:1]), continues], 0), 0)
    w = alive[:-1] * g * (1.0 - gamma_q * continues)
    w_boot = alive[-1] * gamma_q ** n
    return w, w_boot


def bootstrap_sample(net: MixtureDensityNet, traj, generator: torch.Generator | None = None) -> torch.Tensor:
    """One draw per rollout from ``net`` conditioned on the rollout's final state."""
    with torch.no_grad():
        return mdn_sample(mdn_forward(net, traj.feats[-1].detach()), 1, generator)[0]


def _weighted_log_probs(net: MixtureDensityNet, traj, cfg: OccupancyConfig, generator,
                        detach_states: bool, sample_net: MixtureDensityNet, boot: torch.Tensor | None,
                        continues: torch.Tensor | None = None):
    feats = traj.feats.detach() if detach_states else traj.feats
    n = feats.shape[0] - 1
    if n != cfg.horizon:
        raise ValueError(f"rollout horizon {n} does not match occupancy horizon {cfg.horizon}")
    anchor = mdn_forward(net, feats[0])
    visited = mdn_log_prob(_expand(anchor, n), feats[1:])  # (n, B)
    if boot is None:
        boot = bootstrap_sample(sample_net, traj, generator)
    boot_lp = mdn_log_prob(anchor, boot)
    continues = (traj.continues if continues is None else continues).detach()
    w, w_boot = continuation_weights(continues, cfg.gamma_q)
    return (w * visited).sum(0) + w_boot * boot_lp


def _expand(params: MixtureParams, n: int) -> MixtureParams:
    return MixtureParams(params.log_weights.expand(n, *params.log_weights.shape),
                         params.means.expand(n, *params.means.shape),
                         params.stds.expand(n, *params.stds.shape))


def occupancy_loss(nets: MdnNets, traj, cfg: OccupancyConfig, generator: torch.Generator | None = None,
                   bootstrap: torch.Tensor | None = None) -> torch.Tensor:
    """Importance-weighted NLL of the online MDN anchored at each rollout's start state.

    Rollout states are constants here; the bootstrap sample comes from the
    target MDN at the rollout's final state (or is given as ``bootstrap``).
    """
    return -_weighted_log_probs(nets.online, traj, cfg, generator, True, nets.target, bootstrap).mean()


def entropy_bonus(target: MixtureDensityNet, traj, cfg: OccupancyConfig,
                  generator: torch.Generator | None = None, bootstrap: torch.Tensor | None = None,
                  continues: torch.Tensor | None = None) -> torch.Tensor:
    """Monte-Carlo entropy of the occupancy at each rollout start, shape (B,).

    Differentiable through the rollout states; the target MDN's parameters,
    the bootstrap sample and the continuation weights carry no gradient.
    ``bootstrap`` and ``continues`` may be supplied to pin those inputs.
    """
    return -_weighted_log_probs(target, traj, cfg, generator, False, target, bootstrap, continues)


@torch.no_grad()
def soft_update(nets: MdnNets, tau: float) -> None:
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    for t, o in zip(nets.target.parameters(), nets.online.parameters(), strict=True):
        if t.shape != o.shape:
            raise ValueError("target/online shape mismatch")
        if tau == 1.0:
            t.copy_(o)
        else:
            t.mul_(1.0 - tau).add_(o, alpha=tau)


def tabular_occupancy_oracle(mdp: TabularMdp, policy: np.ndarray, gamma_q: float, s0: int) -> np.ndarray:
    """Exact discounted occupancy of states 1, 2, ... steps after ``s0``.

    Solves ``q = (1 - g) p1 + g P_pi^T q`` where ``p1`` is the one-step
    successor distribution of ``s0``.
    """
    if not 0.0 < gamma_q < 1.0:
        raise ValueError("gamma_q must lie in (0, 1)")
    policy = np.asarray(policy, dtype=np.float64)
    if policy.ndim == 1:
        policy = np.eye(mdp.n_actions)[policy.astype(int)]
    P_pi = np.einsum("sa,sat->st", policy, mdp.transition)
    p1 = P_pi[s0]
    A = np.eye(mdp.n_states) - gamma_q * P_pi.T
    return np.linalg.solve(A, (1.0 - gamma_q) * p1)
