"""Training loop, evaluation protocol and metrics for the four ablation variants."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import agent as ag
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig
from .envs import Env, make_env
from .occupancy import MdnNets, OccupancyConfig, entropy_bonus, occupancy_loss, soft_update
from .rollout import ReplayBuffer, SequenceBatch, collect_episode, imagine_rollout
from .world_model import LatentState, WorldModel, WorldModelConfig, world_model_loss

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    pass


@dataclass
class EvalReport:
    step: int
    returns: list[float]
    mean: float
    ci95_low: float
    ci95_high: float
    distinct_state_bins: int

    @classmethod
    def from_returns(cls, step: int, returns, bins: int) -> "EvalReport":
        r = np.asarray(returns, dtype=np.float64)
        mean = float(r.mean())
        half = 1.96 * float(r.std(ddof=1)) / math.sqrt(len(r)) if len(r) > 1 else 0.0
        return cls(step, [float(x) for x in r], mean, mean - half, mean + half, int(bins))


def state_bins(observations: np.ndarray, low: np.ndarray, high: np.ndarray, per_dim: int) -> set:
    """Grid cells (``per_dim`` per observation dimension) touched by a batch of observations."""
    span = np.where(high > low, high - low, 1.0)
    idx = np.floor((observations - low) / span * per_dim).astype(np.int64)
    idx = np.clip(idx, 0, per_dim - 1)
    return {tuple(row) for row in idx}


class Agent(nn.Module):
    """All networks of one run.  Which submodules exist depends on the ablation flags."""

    def __init__(self, cfg: TrainConfig, env: Env):
        super().__init__()
        spec = env.spec()
        self.cfg = cfg
        mods = cfg.modifications
        self.world_model = WorldModel(WorldModelConfig(
            spec.obs_dim, spec.act_dim, cfg.deter, cfg.stoch, cfg.hidden, modifications=mods,
            kl_scale=cfg.kl_scale if mods else cfg.baseline_kl_scale,
            jeffreys_scale=cfg.jeffreys_scale, free_nats=cfg.free_nats))
        d = self.world_model.feat_dim
        self.actor = ag.StochasticActor(d, spec.act_dim, spec.act_low, spec.act_high, cfg.actor_hidden)
        self.critic = ag.QCritic(d, spec.act_dim, cfg.actor_hidden) if mods else ag.VCritic(d, cfg.actor_hidden)
        if cfg.exploration:
            self.mdn = MdnNets(d, cfg.mdn_components, cfg.mdn_hidden)
            self.det_actor = ag.DeterministicActor(d, spec.act_dim, spec.act_low, spec.act_high, cfg.actor_hidden)
            self.det_critic = ag.QCritic(d, spec.act_dim, cfg.actor_hidden) if mods else ag.VCritic(d, cfg.actor_hidden)
        else:
            self.mdn = self.det_actor = self.det_critic = None

    def eval_policy(self, feat: torch.Tensor) -> torch.Tensor:
        if self.det_actor is not None:
            return self.det_actor(feat)
        return self.actor.mode(feat)

    def tensors(self) -> dict[str, torch.Tensor]:
        return dict(self.state_dict())


def evaluate_agent(agent: Agent, env: Env, episodes: int, seed: int, step: int = 0,
                   bins_per_dim: int = 16) -> EvalReport:
    """Roll out the evaluation policy without exploration noise."""
    spec = env.spec()
    gen = torch.Generator().manual_seed(seed)
    returns, visited = [], set()
    for k in range(episodes):
        ep = collect_episode(env, agent.world_model, lambda f, g: agent.eval_policy(f), None, gen,
                             seed=seed * 1000 + k)
        returns.append(float(ep.rewards.sum()))
        visited |= state_bins(ep.observations, spec.obs_low, spec.obs_high, bins_per_dim)
    return EvalReport.from_returns(step, returns, len(visited))


class Trainer:
    def __init__(self, cfg: TrainConfig, out_dir: str | Path | None = None, env: Env | None = None):
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        torch.manual_seed(cfg.seed)
        self.env = env if env is not None else make_env(cfg.env)
        self.eval_env = copy.deepcopy(self.env)
        self.agent = Agent(cfg, self.env)
        self.gen = torch.Generator().manual_seed(cfg.seed)
        self.buffer = ReplayBuffer(cfg.buffer_capacity, seed=cfg.seed)
        self.occ_cfg = OccupancyConfig(cfg.gamma_q, cfg.soft_tau, cfg.mdn_lr, cfg.horizon)
        self.lam_cfg = ag.LambdaConfig(cfg.gamma, cfg.lam, cfg.beta_start, cfg.beta_end)
        a = self.agent
        self.opt_model = torch.optim.Adam(a.world_model.parameters(), lr=cfg.model_lr)
        self.opt_actor = torch.optim.Adam(a.actor.parameters(), lr=cfg.actor_lr)
        self.opt_critic = torch.optim.Adam(a.critic.parameters(), lr=cfg.critic_lr)
        if cfg.exploration:
            self.opt_mdn = torch.optim.Adam(a.mdn.online.parameters(), lr=cfg.mdn_lr)
            self.opt_det = torch.optim.Adam(a.det_actor.parameters(), lr=cfg.actor_lr)
            self.opt_det_critic = torch.optim.Adam(a.det_critic.parameters(), lr=cfg.critic_lr)
        if cfg.modifications:
            self.noise = ag.ExplorationNoise(cfg.eps_random, 0.0 if cfg.exploration else cfg.noise_std)
        else:
            self.noise = ag.ExplorationNoise(0.0, 0.0 if cfg.exploration else cfg.noise_std)
        self.env_steps = 0
        self.episodes = 0
        self.updates = 0
        self.history: list[dict] = []
        self._loss_acc: dict[str, list[float]] = {}

    # ------------------------------------------------------------------ loop
    def beta(self) -> float:
        return ag.beta_schedule(self.env_steps, self.cfg.total_env_steps, self.lam_cfg)

    def collect(self, random_policy: bool = False) -> int:
        a = self.agent
        ep = collect_episode(self.env, a.world_model, lambda f, g: a.actor(f, g), self.noise, self.gen,
                             seed=self.cfg.seed * 100_003 + self.episodes, squash=a.actor.squash,
                             random_policy=random_policy)
        self.episodes += 1
        self.env_steps += len(ep)
        self.buffer.push(ep)
        return len(ep)

    def train(self) -> list[dict]:
        cfg = self.cfg
        self.evaluate_and_log()
        for _ in range(cfg.prefill_episodes):
            self.collect(random_policy=True)
        since_update = self.env_steps
        next_eval = cfg.eval_every
        while self.env_steps < cfg.total_env_steps:
            if since_update >= cfg.train_every:
                for _ in range(cfg.updates_per_round):
                    self.update()
                since_update = 0
            while self.env_steps >= next_eval:
                self.evaluate_and_log()
                next_eval += cfg.eval_every
            since_update += self.collect()
        if self.history[-1]["step"] != self.env_steps:
            self.evaluate_and_log()
        if self.out_dir is not None:
            self.save(self.out_dir / "final.ckpt")
        return self.history

    def evaluate_and_log(self) -> dict:
        rep = evaluate_agent(self.agent, self.eval_env, self.cfg.eval_episodes,
                             seed=10_000 + self.cfg.seed * 7919 + len(self.history),
                             step=self.env_steps, bins_per_dim=self.cfg.bins_per_dim)
        record = {"step": rep.step, "updates": self.updates, "beta": self.beta(),
                  "mean_return": rep.mean, "ci95_low": rep.ci95_low, "ci95_high": rep.ci95_high,
                  "distinct_state_bins": rep.distinct_state_bins, "returns": rep.returns}
        for k, v in sorted(self._loss_acc.items()):
            record[f"loss_{k}"] = float(np.mean(v))
        self._loss_acc = {}
        self.history.append(record)
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            emit_metrics(self.out_dir / "metrics.jsonl", record)
            self.save(self.out_dir / "latest.ckpt")
        log.info("step %d return %.3f bins %d", rep.step, rep.mean, rep.distinct_state_bins)
        return record

    # ---------------------------------------------------------------- update
    def _step(self, opt, loss, params, name: str, batch: SequenceBatch | None = None):
        if not torch.isfinite(loss):
            self._dump(batch, name)
            raise NumericError(f"non-finite {name} loss at update {self.updates}")
        opt.zero_grad(set_to_none=True)
        params = list(params)
        loss.backward(inputs=params)
        nn.utils.clip_grad_norm_(params, self.cfg.grad_clip)
        opt.step()
        self._loss_acc.setdefault(name, []).append(float(loss.detach()))

    def _dump(self, batch: SequenceBatch | None, name: str) -> None:
        if self.out_dir is None or batch is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        np.savez(self.out_dir / f"nonfinite_{name}.npz", observations=batch.observations.numpy(),
                 actions=batch.actions.numpy(), rewards=batch.rewards.numpy(), dones=batch.dones.numpy())

    def update(self) -> None:
        cfg, a = self.cfg, self.agent
        batch = self.buffer.sample_sequences(cfg.batch_size, cfg.seq_len)
        wm = a.world_model
        total, parts, states = world_model_loss(wm, batch.observations, batch.actions, batch.rewards,
                                                batch.dones, self.gen)
        self._step(self.opt_model, total, wm.parameters(), "world_model", batch)
        for k, v in parts.items():
            self._loss_acc.setdefault(f"wm_{k}", []).append(v)

        # the baseline never observes o_0, so its first posterior sits at index 1
        observed = states[0 if cfg.modifications else 1:]
        if cfg.imag_starts == "all":
            start = LatentState(torch.cat([s.h for s in observed]).detach(),
                                torch.cat([s.z for s in observed]).detach())
        else:
            start = observed[0].detach()

        wm.requires_grad_(False)
        try:
            self._behaviour_update(start, batch)
        finally:
            wm.requires_grad_(True)
        self.updates += 1

    def _values(self, critic, actor, traj, generator):
        if not self.cfg.modifications:
            return critic(traj.feats)
        last = actor(traj.feats[-1], generator)
        q = critic(traj.feats[:-1], traj.actions)
        return torch.cat([q, critic(traj.feats[-1:], last[None])], 0)

    def _behaviour_update(self, start: LatentState, batch: SequenceBatch) -> None:
        cfg, a = self.cfg, self.agent
        wm = a.world_model
        H = cfg.horizon
        first_only = cfg.modifications
        policy = lambda f, g: a.actor(f, g)  # noqa: E731
        traj = imagine_rollout(wm, policy, start, H, self.gen)

        entropy = None
        if cfg.exploration:
            mdn_loss = occupancy_loss(a.mdn, traj, self.occ_cfg, self.gen)
            self._step(self.opt_mdn, mdn_loss, a.mdn.online.parameters(), "mdn", batch)
            soft_update(a.mdn, cfg.soft_tau)
            entropy = entropy_bonus(a.mdn.target, traj, self.occ_cfg, self.gen)
            self._loss_acc.setdefault("entropy", []).append(float(entropy.detach().mean()))

        a.critic.requires_grad_(False)
        values = self._values(a.critic, a.actor, traj, self.gen)
        returns = ag.lambda_returns(traj.rewards, values, traj.continues, cfg.gamma, cfg.lam)
        a.critic.requires_grad_(True)
        if first_only:
            loss = ag.actor_loss_stochastic(returns[0], entropy, self.beta())
        else:
            # baseline: every imagined index contributes
            loss = -returns.mean()
            if entropy is not None:
                loss = loss - self.beta() * entropy.mean()
        self._step(self.opt_actor, loss, a.actor.parameters(), "actor", batch)
        c_loss = ag.critic_loss(a.critic, traj.feats, traj.actions, returns, first_only, smooth=cfg.modifications)
        self._step(self.opt_critic, c_loss, a.critic.parameters(), "critic", batch)

        if cfg.exploration:
            det_policy = lambda f, g: a.det_actor(f)  # noqa: E731
            dtraj = imagine_rollout(wm, det_policy, start, H, self.gen)
            a.det_critic.requires_grad_(False)
            dvalues = self._values(a.det_critic, det_policy, dtraj, self.gen)
            dreturns = ag.lambda_returns(dtraj.rewards, dvalues, dtraj.continues, cfg.gamma, cfg.lam)
            a.det_critic.requires_grad_(True)
            dloss = ag.actor_loss_deterministic(dreturns[0]) if first_only else -dreturns.mean()
            self._step(self.opt_det, dloss, a.det_actor.parameters(), "det_actor", batch)
            dc_loss = ag.critic_loss(a.det_critic, dtraj.feats, dtraj.actions, dreturns, first_only,
                                     smooth=cfg.modifications)
            self._step(self.opt_det_critic, dc_loss, a.det_critic.parameters(), "det_critic", batch)

    # ----------------------------------------------------------- checkpoints
    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.agent.tensors(),
                        {"config": self.cfg.to_dict(), "env_steps": self.env_steps, "updates": self.updates})


def emit_metrics(path: str | Path, record: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_metrics(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_agent(path: str | Path, env: Env | None = None) -> tuple[Agent, TrainConfig]:
    tensors, meta = load_checkpoint(path)
    cfg = TrainConfig.from_dict(meta["config"])
    env = env if env is not None else make_env(cfg.env)
    agent = Agent(cfg, env)
    expected = agent.state_dict()
    if set(expected) != set(tensors):
        raise ValueError("checkpoint tensors do not match the configured architecture")
    for name, t in tensors.items():
        if tuple(expected[name].shape) != tuple(t.shape):
            raise ValueError(f"shape mismatch for {name}: checkpoint {tuple(t.shape)} vs env "
                             f"{tuple(expected[name].shape)}")
    agent.load_state_dict(tensors)
    return agent, cfg


def evaluate(checkpoint: str | Path, env: Env | str | None = None, episodes: int = 10, seed: int = 0) -> EvalReport:
    if isinstance(env, str):
        env = make_env(env)
    agent, cfg = load_agent(checkpoint, env)
    env = env if env is not None else make_env(cfg.env)
    return evaluate_agent(agent, env, episodes, seed, bins_per_dim=cfg.bins_per_dim)


def train(cfg: TrainConfig, out_dir: str | Path | None = None, env: Env | None = None) -> Trainer:
    trainer = Trainer(cfg, out_dir, env)
    trainer.train()
    return trainer


@dataclass
class RunSummary:
    variant: str
    seed: int
    history: list[dict] = field(default_factory=list)

    def first_success_step(self) -> float:
        for rec in self.history:
            if rec["mean_return"] > 0:
                return rec["step"]
        return math.inf

    def final_bins(self) -> int:
        return self.history[-1]["distinct_state_bins"]


VARIANTS = {
    "baseline": dict(exploration=False, modifications=False),
    "exploration": dict(exploration=True, modifications=False),
    "modifications": dict(exploration=False, modifications=True),
    "full": dict(exploration=True, modifications=True),
}


def run_ablation(base: TrainConfig, variants=tuple(VARIANTS), seeds=(0, 1, 2), out_dir: str | Path | None = None,
                 env_factory=None) -> dict[str, list[RunSummary]]:
    """Train every variant on shared seeds and collect the evaluation curves."""
    results: dict[str, list[RunSummary]] = {}
    for name in variants:
        if name not in VARIANTS:
            raise ValueError(f"unknown variant {name!r}")
        for seed in seeds:
            cfg = base.replace(seed=seed, **VARIANTS[name])
            run_dir = Path(out_dir) / f"{name}_seed{seed}" if out_dir is not None else None
            env = env_factory() if env_factory is not None else None
            trainer = train(cfg, run_dir, env)
            results.setdefault(name, []).append(RunSummary(name, seed, trainer.history))
    return results


def ablation_curves(results: dict[str, list[RunSummary]]) -> tuple[list[int], dict[str, dict[str, list[float]]]]:
    """Align runs on evaluation steps: per variant mean over seeds plus a 95% interval."""
    steps = sorted({rec["step"] for runs in results.values() for r in runs for rec in r.history})
    table = {}
    for name, runs in results.items():
        mean, low, high = [], [], []
        for s in steps:
            vals = []
            for r in runs:
                # carry the last evaluation forward so runs with ragged final steps align
                past = [rec["mean_return"] for rec in r.history if rec["step"] <= s]
                vals.append(past[-1] if past else 0.0)
            rep = EvalReport.from_returns(s, vals, 0)
            mean.append(rep.mean)
            low.append(rep.ci95_low)
            high.append(rep.ci95_high)
        table[name] = {"mean": mean, "ci95_low": low, "ci95_high": high}
    return steps, table
