"""Recurrent latent world model with a deterministic and a stochastic state.

Two flavours share one class, switched by ``modifications``:

* revised (``modifications=True``): the first observation of an episode is
  absorbed before any action, the decoder sees only the stochastic part
  ``z``, a termination head is present, reward regression uses Smooth L1,
  and the latent is regularised by ``KL(post || N(0, I))`` plus the
  Jeffreys divergence between posterior and learned prior;
* baseline: the decoder sees ``(h, z)``, no termination head, MSE reward
  loss and the plain ``KL(post || prior)`` term with free nats.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class LatentState:
    h: torch.Tensor  # (..., deter)
    z: torch.Tensor  # (..., stoch)

    def feat(self) -> torch.Tensor:
        return torch.cat([self.h, self.z], dim=-1)

    def detach(self) -> "LatentState":
        return LatentState(self.h.detach(), self.z.detach())


@dataclass
class DiagGaussian:
    mean: torch.Tensor
    std: torch.Tensor

    def rsample(self, generator: torch.Generator | None = None, eps: torch.Tensor | None = None) -> torch.Tensor:
        if eps is None:
            eps = torch.randn(self.mean.shape, generator=generator, dtype=self.mean.dtype)
        return self.mean + self.std * eps

    @classmethod
    def standard(cls, like: torch.Tensor) -> "DiagGaussian":
        return cls(torch.zeros_like(like), torch.ones_like(like))


def gaussian_kl(p: DiagGaussian, q: DiagGaussian) -> torch.Tensor:
    """Closed-form KL(p || q) summed over the last dimension."""
    if p.mean.shape[-1] != q.mean.shape[-1]:
        raise ValueError("dimension mismatch")
    if bool((p.std <= 0).any()) or bool((q.std <= 0).any()):
        raise ValueError("standard deviations must be positive")
    var_ratio = (p.std / q.std) ** 2
    mahalanobis = ((p.mean - q.mean) / q.std) ** 2
    return 0.5 * (var_ratio + mahalanobis - 1.0 - torch.log(var_ratio)).sum(-1)


def jeffreys(p: DiagGaussian, q: DiagGaussian) -> torch.Tensor:
    # written as one symmetric expression so that J(p, q) == J(q, p) bit for bit
    if p.mean.shape[-1] != q.mean.shape[-1]:
        raise ValueError("dimension mismatch")
    if bool((p.std <= 0).any()) or bool((q.std <= 0).any()):
        raise ValueError("standard deviations must be positive")
    vp, vq = p.std ** 2, q.std ** 2
    d2 = (p.mean - q.mean) ** 2
    return 0.5 * ((vp + d2) / vq + (vq + d2) / vp - 2.0).sum(-1)


def smooth_l1(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Elementwise Smooth L1 with the transition at 1."""
    return F.smooth_l1_loss(pred, target, reduction="none", beta=1.0)


def mlp(inp: int, hidden: int, out: int, layers: int = 2, act=nn.ELU) -> nn.Sequential:
    mods: list[nn.Module] = []
    width = inp
    for _ in range(layers):
        mods += [nn.Linear(width, hidden), act()]
        width = hidden
    mods.append(nn.Linear(width, out))
    return nn.Sequential(*mods)


class GaussianHead(nn.Module):
    def __init__(self, inp: int, hidden: int, size: int, min_std: float):
        super().__init__()
        self.net = mlp(inp, hidden, 2 * size, layers=1)
        self.min_std = min_std

    def forward(self, x: torch.Tensor) -> DiagGaussian:
        mean, raw = self.net(x).chunk(2, dim=-1)
        return DiagGaussian(mean, F.softplus(raw) + self.min_std)


@dataclass
class WorldModelConfig:
    obs_dim: int
    act_dim: int
    deter: int = 200
    stoch: int = 128
    hidden: int = 200
    min_std: float = 0.1
    modifications: bool = True
    kl_scale: float = 0.1  # KL(post || N(0, I)) in the revised loss, prior KL in the baseline
    jeffreys_scale: float = 0.1
    free_nats: float = 3.0  # baseline only


class WorldModel(nn.Module):
    def __init__(self, cfg: WorldModelConfig):
        super().__init__()
        self.cfg = cfg
        H, Z, W = cfg.deter, cfg.stoch, cfg.hidden
        self.pre = nn.Sequential(nn.Linear(Z + cfg.act_dim, W), nn.ELU())
        self.cell = nn.GRUCell(W, H)
        self.prior_net = GaussianHead(H, W, Z, cfg.min_std)
        self.obs_embed = mlp(cfg.obs_dim, W, W, layers=2)
        self.post_net = GaussianHead(H + W, W, Z, cfg.min_std)
        self.decoder = mlp(Z if cfg.modifications else H + Z, W, cfg.obs_dim, layers=2)
        self.reward_net = mlp(H + Z, W, 1, layers=2)
        if cfg.modifications:
            self.continue_net = mlp(H + Z, W, 1, layers=2)
        else:
            self.continue_net = None

    @property
    def feat_dim(self) -> int:
        return self.cfg.deter + self.cfg.stoch

    def init_state(self, batch: int) -> LatentState:
        if batch < 1:
            raise ValueError("batch must be >= 1")
        p = next(self.parameters())
        return LatentState(p.new_zeros(batch, self.cfg.deter), p.new_zeros(batch, self.cfg.stoch))

    def transition(self, state: LatentState, action: torch.Tensor) -> torch.Tensor:
        if action.shape[-1] != self.cfg.act_dim:
            raise ValueError("action dimension mismatch")
        return self.cell(self.pre(torch.cat([state.z, action], -1)), state.h)

    def observe_step(self, state: LatentState, prev_action: torch.Tensor | None, obs: torch.Tensor,
                     generator: torch.Generator | None = None, eps: torch.Tensor | None = None):
        """Absorb one observation.  ``prev_action=None`` marks an episode start: h is carried over."""
        if obs.shape[-1] != self.cfg.obs_dim:
            raise ValueError("observation dimension mismatch")
        h = state.h if prev_action is None else self.transition(state, prev_action)
        post = self.post_net(torch.cat([h, self.obs_embed(obs)], -1))
        z = post.rsample(generator, eps)
        return LatentState(h, z), post

    def imagine_step(self, state: LatentState, action: torch.Tensor,
                     generator: torch.Generator | None = None, eps: torch.Tensor | None = None):
        """One prior-driven step: returns (state', prior, reward, continue probability)."""
        h = self.transition(state, action)
        prior = self.prior_net(h)
        z = prior.rsample(generator, eps)
        nxt = LatentState(h, z)
        feat = nxt.feat()
        reward = self.reward_net(feat).squeeze(-1)
        cont = self.continue_prob(feat)
        if not torch.isfinite(feat).all():
            raise FloatingPointError("non-finite latent during imagination")
        return nxt, prior, reward, cont

    def continue_prob(self, feat: torch.Tensor) -> torch.Tensor:
        if self.continue_net is None:
            return feat.new_ones(feat.shape[:-1])
        return torch.sigmoid(self.continue_net(feat).squeeze(-1))

    def decode(self, z: torch.Tensor, h: torch.Tensor | None = None) -> torch.Tensor:
        if self.cfg.modifications:
            if z.shape[-1] != self.cfg.stoch:
                raise ValueError("decoder expects the stochastic part only")
            return self.decoder(z)
        if h is None:
            raise ValueError("baseline decoder needs the deterministic part too")
        return self.decoder(torch.cat([h, z], -1))

    def observe_sequence(self, obs: torch.Tensor, actions: torch.Tensor,
                         generator: torch.Generator | None = None):
        """Run the posterior over a (B, L, obs) batch.

        Returns lists (index = time) of states, posteriors and priors.  In
        the revised model index 0 absorbs ``o_0`` from the zero state with
        no action.  In the baseline the zero state acts first and ``o_0`` is
        never observed, so index 0 holds the unobserved zero state and no
        posterior/prior.
        """
        B, L, _ = obs.shape
        state = self.init_state(B)
        states, posts, priors = [], [], []
        if self.cfg.modifications:
            priors.append(self.prior_net(state.h))
            state, post = self.observe_step(state, None, obs[:, 0], generator)
            posts.append(post)
        else:
            priors.append(None)
            posts.append(None)
        states.append(state)
        for t in range(1, L):
            h = self.transition(state, actions[:, t - 1])
            priors.append(self.prior_net(h))
            post = self.post_net(torch.cat([h, self.obs_embed(obs[:, t])], -1))
            state = LatentState(h, post.rsample(generator))
            posts.append(post)
            states.append(state)
        return states, posts, priors


def world_model_loss(model: WorldModel, obs: torch.Tensor, actions: torch.Tensor, rewards: torch.Tensor,
                     dones: torch.Tensor, generator: torch.Generator | None = None):
    """Sequence loss averaged over batch and time.

    Shapes: obs (B, L, o), actions (B, L-1, a), rewards and dones (B, L-1).
    Returns ``(total, components, states)`` where ``states`` are the
    posterior latents per time index (useful as imagination starts).
    """
    if obs.shape[1] < 2:
        raise ValueError("sequence length must be >= 2")
    cfg = model.cfg
    states, posts, priors = model.observe_sequence(obs, actions, generator)
    L = obs.shape[1]
    first = 0 if cfg.modifications else 1
    recon, rew, term, kl_fixed, jeff, kl_prior = [], [], [], [], [], []
    for t in range(first, L):
        s = states[t]
        decoded = model.decode(s.z) if cfg.modifications else model.decode(s.z, s.h)
        recon.append(((decoded - obs[:, t]) ** 2).sum(-1))
        if cfg.modifications:
            kl_fixed.append(gaussian_kl(posts[t], DiagGaussian.standard(posts[t].mean)))
            jeff.append(jeffreys(posts[t], priors[t]))
        else:
            kl_prior.append(gaussian_kl(posts[t], priors[t]).clamp(min=cfg.free_nats))
        if t >= 1:
            feat = s.feat()
            pred_r = model.reward_net(feat).squeeze(-1)
            if cfg.modifications:
                rew.append(smooth_l1(pred_r, rewards[:, t - 1]))
                logit = model.continue_net(feat).squeeze(-1)
                term.append(F.binary_cross_entropy_with_logits(-logit, dones[:, t - 1].to(logit.dtype),
                                                               reduction="none"))
            else:
                rew.append((pred_r - rewards[:, t - 1]) ** 2)

    def mean(xs):
        return torch.stack(xs).mean() if xs else obs.new_zeros(())

    parts = {"recon": mean(recon), "reward": mean(rew)}
    if cfg.modifications:
        parts["termination"] = mean(term)
        parts["kl_fixed"] = cfg.kl_scale * mean(kl_fixed)
        parts["jeffreys"] = cfg.jeffreys_scale * mean(jeff)
    else:
        parts["kl_prior"] = cfg.kl_scale * mean(kl_prior)
    total = sum(parts.values())
    return total, {k: float(v.detach()) for k, v in parts.items()}, states
