"""Verification harness: finite-difference gradient checks and the tabular occupancy check.

Every gradient check builds a tiny float64 instance, fixes all sampling
noise by re-seeding one generator before each evaluation, and compares
autograd against central differences coordinate by coordinate.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import agent as ag
from .envs import ChainMdp
from .occupancy import (MdnNets, MixtureDensityNet, OccupancyConfig, bootstrap_sample, entropy_bonus,
                        mdn_forward, mdn_log_prob, occupancy_loss, soft_update, tabular_occupancy_oracle)
from .rollout import ChainModel, ImaginedTrajectory, chain_action_probs, imagine_rollout
from .world_model import LatentState, WorldModel, WorldModelConfig, world_model_loss

COMPONENTS = ("world_model", "mdn", "actor_stoch", "actor_det", "critic", "imagination")


def numeric_grad(fn, tensors: list[torch.Tensor], step: float = 1e-5) -> list[torch.Tensor]:
    """Central differences of the scalar ``fn()`` w.r.t. every element of ``tensors`` (in place)."""
    grads = []
    with torch.no_grad():
        for t in tensors:
            g = torch.zeros_like(t)
            flat, gflat = t.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = float(fn())
                flat[i] = orig - step
                down = float(fn())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * step)
            grads.append(g)
    return grads


def max_relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric, strict=True):
        a = torch.zeros_like(n) if a is None else a
        denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, floor))
        worst = max(worst, float(((a - n).abs() / denom).max()))
    return worst


def check_gradients(fn, tensors: list[torch.Tensor], step: float = 1e-5) -> float:
    loss = fn()
    analytic = torch.autograd.grad(loss, tensors, allow_unused=True)
    return max_relative_error(analytic, numeric_grad(fn, tensors, step))


@dataclass
class GradCheckReport:
    component: str
    max_rel_error: float
    n_params: int


def _randomize(module: torch.nn.Module, seed: int, scale: float = 0.5) -> None:
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))


def tiny_world_model(seed: int = 0, obs_dim: int = 3, act_dim: int = 2) -> WorldModel:
    torch.manual_seed(seed)
    return WorldModel(WorldModelConfig(obs_dim, act_dim, deter=6, stoch=4, hidden=8)).double()


def tiny_setup(seed: int = 0):
    """A tiny revised world model plus actors, critics and MDN in float64."""
    wm = tiny_world_model(seed)
    d = wm.feat_dim
    low, high = -np.ones(2), np.ones(2)
    actor = ag.StochasticActor(d, 2, low, high, hidden=8).double()
    det = ag.DeterministicActor(d, 2, low, high, hidden=8).double()
    critic = ag.QCritic(d, 2, hidden=8).double()
    mdn = MdnNets(d, components=3, hidden=8).double()
    # the zero-initialised output layers would hide most paths from the check
    for k, m in enumerate((actor, det, critic, mdn.online)):
        _randomize(m, seed + 11 * (k + 1), scale=0.3)
    soft_update(mdn, 1.0)
    wm.requires_grad_(False)
    return wm, actor, det, critic, mdn


def _start(wm: WorldModel, seed: int, batch: int = 3) -> LatentState:
    g = torch.Generator().manual_seed(seed)
    return LatentState(torch.randn(batch, wm.cfg.deter, generator=g, dtype=torch.float64) * 0.5,
                       torch.randn(batch, wm.cfg.stoch, generator=g, dtype=torch.float64) * 0.5)


def grad_check(component: str, seed: int = 0, horizon: int = 3) -> GradCheckReport:
    if component not in COMPONENTS:
        raise ValueError(f"unknown component {component!r}; choose from {COMPONENTS}")
    noise_seed = 1000 + seed

    def gen():
        return torch.Generator().manual_seed(noise_seed)

    if component == "world_model":
        wm = tiny_world_model(seed)
        g = torch.Generator().manual_seed(seed)
        B, L = 2, 4
        obs = torch.randn(B, L, 3, generator=g, dtype=torch.float64)
        act = torch.rand(B, L - 1, 2, generator=g, dtype=torch.float64) * 2 - 1
        rew = torch.randn(B, L - 1, generator=g, dtype=torch.float64) * 0.5
        done = torch.zeros(B, L - 1, dtype=torch.float64)
        done[0, -1] = 1.0
        params = list(wm.parameters())
        err = check_gradients(lambda: world_model_loss(wm, obs, act, rew, done, gen())[0], params)
        return GradCheckReport(component, err, sum(p.numel() for p in params))

    if component == "mdn":
        torch.manual_seed(seed)
        net = MixtureDensityNet(3, components=3, hidden=8).double()
        g = torch.Generator().manual_seed(seed)
        s = torch.randn(4, 3, generator=g, dtype=torch.float64).requires_grad_()
        x = torch.randn(4, 3, generator=g, dtype=torch.float64).requires_grad_()
        params = list(net.parameters()) + [s, x]
        err = check_gradients(lambda: -mdn_log_prob(mdn_forward(net, s), x).mean(), params)
        return GradCheckReport(component, err, sum(p.numel() for p in params))

    wm, actor, det, critic, mdn = tiny_setup(seed)
    start = _start(wm, seed)
    occ = OccupancyConfig(horizon=horizon)
    cfg = ag.LambdaConfig()

    def stoch_policy(f, g):
        return actor(f, g)

    def det_policy(f, g):
        return det(f)

    def returns_of(traj, policy, g):
        last = policy(traj.feats[-1], g)
        values = torch.cat([critic(traj.feats[:-1], traj.actions), critic(traj.feats[-1:], last[None])], 0)
        return ag.lambda_returns(traj.rewards, values, traj.continues, cfg.gamma, cfg.lam)

    if component == "critic":
        traj = imagine_rollout(wm, stoch_policy, start, horizon, gen())
        traj = ImaginedTrajectory(traj.feats.detach(), traj.actions.detach(), traj.rewards.detach(),
                                  traj.continues.detach())
        targets = returns_of(traj, stoch_policy, gen()).detach() + 0.3
        params = list(critic.parameters())
        err = check_gradients(lambda: ag.critic_loss(critic, traj.feats, traj.actions, targets), params)
        return GradCheckReport(component, err, sum(p.numel() for p in params))

    if component == "imagination":
        params = list(actor.parameters())
        err = check_gradients(lambda: imagine_rollout(wm, stoch_policy, start, horizon, gen()).rewards.sum(), params)
        return GradCheckReport(component, err, sum(p.numel() for p in params))

    if component == "actor_stoch":
        base = imagine_rollout(wm, stoch_policy, start, horizon, gen())
        boot = bootstrap_sample(mdn.target, base, torch.Generator().manual_seed(noise_seed + 1))

        def loss():
            g = gen()
            traj = imagine_rollout(wm, stoch_policy, start, horizon, g)
            # stop-gradient inputs are pinned at their base-point values
            entropy = entropy_bonus(mdn.target, traj, occ, bootstrap=boot, continues=base.continues.detach())
            return ag.actor_loss_stochastic(returns_of(traj, stoch_policy, g)[0], entropy, 0.2)

        params = list(actor.parameters())
        return GradCheckReport(component, check_gradients(loss, params), sum(p.numel() for p in params))

    # actor_det
    def loss():
        g = gen()
        traj = imagine_rollout(wm, det_policy, start, horizon, g)
        return ag.actor_loss_deterministic(returns_of(traj, det_policy, g)[0])

    params = list(det.parameters())
    return GradCheckReport(component, check_gradients(loss, params), sum(p.numel() for p in params))


# --------------------------------------------------------------------------- occupancy oracle

def cell_masses(net: MixtureDensityNet, anchor: torch.Tensor, centers: torch.Tensor, half_width: float = 0.5) -> torch.Tensor:
    """Mixture mass inside the axis-aligned cube of side ``2 * half_width`` around each center."""
    params = net(anchor)
    w = params.weights  # (K,)
    mu, sd = params.means, params.stds  # (K, d)
    c = centers[:, None, :]  # (S, 1, d)
    upper = torch.special.ndtr((c + half_width - mu) / sd)
    lower = torch.special.ndtr((c - half_width - mu) / sd)
    return ((upper - lower).prod(-1) * w).sum(-1)


def total_variation(masses: np.ndarray, oracle: np.ndarray) -> float:
    """TV over the state cells, counting mass that falls outside every cell as its own outcome."""
    outside = max(0.0, 1.0 - float(masses.sum()))
    return 0.5 * (float(np.abs(masses - oracle).sum()) + outside)


@dataclass
class OracleReport:
    oracle: np.ndarray
    estimate: np.ndarray
    tv: float


def oracle_check(gamma_q: float = 0.9, chain_size: int = 3, seed: int = 0, steps: int = 1500,
                 horizon: int = 15, batch: int = 64, lr: float = 1e-3, hidden: int = 64,
                 components: int = 8, tau: float = 0.1) -> OracleReport:
    """Fit the MDN on sampled chain rollouts and compare its occupancy from state 0 with the exact one."""
    if chain_size > 20:
        raise ValueError("chain_size must be <= 20")
    torch.manual_seed(seed)
    env = ChainMdp(chain_size)
    mdp = env.as_tabular()
    model = ChainModel(mdp)
    policy = np.zeros((mdp.n_states, mdp.n_actions))
    policy[:, -1] = 1.0
    oracle = tabular_occupancy_oracle(mdp, policy, gamma_q, 0)

    nets = MdnNets(chain_size, components, hidden)
    opt = torch.optim.Adam(nets.online.parameters(), lr=lr)
    cfg = OccupancyConfig(gamma_q, tau, lr, horizon)
    g = torch.Generator().manual_seed(seed)

    def fixed_policy(f, _g):
        return f.new_ones(f.shape[0], 1)

    for _ in range(steps):
        starts = torch.randint(0, chain_size, (batch,), generator=g)
        traj = imagine_rollout(model, fixed_policy, model.one_hot(starts), horizon, g)
        loss = occupancy_loss(nets, traj, cfg, g)
        opt.zero_grad()
        loss.backward()
        opt.step()
        soft_update(nets, tau)

    with torch.no_grad():
        eye = torch.eye(chain_size)
        est = cell_masses(nets.online, eye[0], eye).numpy().astype(np.float64)
    return OracleReport(oracle, est, total_variation(est, oracle))


# --------------------------------------------------------------------------- policy improvement

def value_iteration(mdp, gamma: float, iters: int = 2000) -> tuple[np.ndarray, np.ndarray]:
    """Optimal state-action values and greedy actions of a tabular MDP."""
    V = np.zeros(mdp.n_states)
    for _ in range(iters):
        Q = mdp.reward + gamma * np.einsum("sat,t->sa", mdp.transition, V)
        V = Q.max(1)
    return Q, Q.argmax(1)


@dataclass
class ImprovementReport:
    agreement: float
    learned: np.ndarray  # greedy action index per checked state
    optimal: np.ndarray
    states: np.ndarray


def policy_improvement_check(mdp, gamma: float = 0.9, lam: float = 0.95, horizon: int = 15,
                             iterations: int = 400, hidden: int = 64, lr: float = 1e-3,
                             seed: int = 0) -> ImprovementReport:
    """Train a deterministic actor and its Q critic on exact chain dynamics, then compare with value iteration.

    Rollouts propagate the full state distribution with every state acting
    by its own policy output, so returns are exact expectations.  Absorbing
    states are left out of the comparison.
    """
    torch.manual_seed(seed)
    S = mdp.n_states
    P = torch.as_tensor(mdp.transition, dtype=torch.float32)
    R = torch.as_tensor(mdp.reward, dtype=torch.float32)
    eye = torch.eye(S)
    absorbing = np.array([mdp.transition[s, :, s].min() == 1.0 for s in range(S)])
    starts = torch.as_tensor(np.flatnonzero(~absorbing))
    actor = ag.DeterministicActor(S, 1, -np.ones(1), np.ones(1), hidden=hidden)
    critic = ag.QCritic(S, 1, hidden=hidden)
    opt_a = torch.optim.Adam(actor.parameters(), lr=lr)
    opt_c = torch.optim.Adam(critic.parameters(), lr=lr)

    for _ in range(iterations):
        acts = actor(eye)  # (S, 1)
        pi = chain_action_probs(acts, mdp.n_actions)
        P_pi = torch.einsum("sa,sat->st", pi, P)
        r_pi = (pi * R).sum(-1)
        critic.requires_grad_(False)
        v_pi = critic(eye, acts)
        critic.requires_grad_(True)
        dist = eye[starts]
        rewards, values = [], [dist @ v_pi]
        for _ in range(horizon):
            rewards.append(dist @ r_pi)
            dist = dist @ P_pi
            values.append(dist @ v_pi)
        rewards, values = torch.stack(rewards), torch.stack(values)
        returns = ag.lambda_returns(rewards, values, torch.ones_like(rewards), gamma, lam)
        loss = ag.actor_loss_deterministic(returns[0])
        opt_a.zero_grad()
        loss.backward(inputs=list(actor.parameters()))
        opt_a.step()
        c_loss = ag.critic_loss(critic, eye[starts][None], acts[starts].detach()[None], returns[:1].detach())
        opt_c.zero_grad()
        c_loss.backward(inputs=list(critic.parameters()))
        opt_c.step()

    _, optimal = value_iteration(mdp, gamma)
    with torch.no_grad():
        learned = chain_action_probs(actor(eye), mdp.n_actions).argmax(-1).numpy()
    idx = starts.numpy()
    return ImprovementReport(float((learned[idx] == optimal[idx]).mean()), learned[idx], optimal[idx], idx)
