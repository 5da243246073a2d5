"""Small deterministic control environments with vector observations.

Every environment is seeded through ``reset(seed)`` and afterwards behaves
deterministically for a fixed action sequence.  Actions outside the box
bounds are clipped, never rejected.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class EnvSpec:
    obs_dim: int
    act_dim: int
    act_low: np.ndarray
    act_high: np.ndarray
    max_steps: int
    # documented observation bounds, used for coverage binning
    obs_low: np.ndarray
    obs_high: np.ndarray

    def __post_init__(self):
        if self.obs_dim < 1 or self.act_dim < 1:
            raise ValueError("obs_dim and act_dim must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if not np.all(np.asarray(self.act_low) < np.asarray(self.act_high)):
            raise ValueError("act_low must be below act_high elementwise")


@dataclass
class StepResult:
    obs: np.ndarray
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


@dataclass
class TabularMdp:
    transition: np.ndarray  # (S, A, S)
    reward: np.ndarray  # (S, A)
    terminal: np.ndarray  # (S,)
    start: np.ndarray  # (S,)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def validate(self, atol: float = 1e-9) -> None:
        rows = self.transition.sum(axis=-1)
        if not np.allclose(rows, 1.0, rtol=0.0, atol=atol):
            raise ValueError("transition rows must sum to 1")
        if abs(self.start.sum() - 1.0) > atol:
            raise ValueError("start distribution must sum to 1")


class EnvError(RuntimeError):
    pass


class Env:
    """Shared bookkeeping: step counter, RNG, done latch, action clipping."""

    name = "env"

    def __init__(self):
        self._rng = np.random.default_rng(0)
        self._t = 0
        self._done = True

    def spec(self) -> EnvSpec:
        raise NotImplementedError

    def reset(self, seed: int = 0) -> np.ndarray:
        self._rng = np.random.default_rng(seed)
        self._t = 0
        self._done = False
        self._reset()
        return self._obs()

    def step(self, action) -> StepResult:
        if self._done:
            raise EnvError(f"{self.name}: step() called after episode end; call reset()")
        spec = self.spec()
        action = np.clip(np.asarray(action, dtype=np.float64).reshape(spec.act_dim),
                         spec.act_low, spec.act_high)
        reward, terminal = self._advance(action)
        self._t += 1
        truncated = self._t >= spec.max_steps
        self._done = terminal or truncated
        info = {"terminal": bool(terminal), "truncated": bool(truncated and not terminal), "t": self._t}
        return StepResult(self._obs(), float(reward), self._done, info)

    def as_tabular(self) -> TabularMdp:
        raise EnvError(f"{self.name} is continuous; no tabular form")

    def _reset(self):
        raise NotImplementedError

    def _advance(self, action: np.ndarray) -> tuple[float, bool]:
        raise NotImplementedError

    def _obs(self) -> np.ndarray:
        raise NotImplementedError


class Corridor1D(Env):
    """Point on [0, 1] starting at 0; reward 1 on every step that ends at x >= 0.9."""

    name = "corridor1d"
    goal = 0.9
    max_move = 0.05

    def __init__(self, max_steps: int = 100):
        super().__init__()
        self.max_steps = max_steps
        self.x = 0.0

    def spec(self) -> EnvSpec:
        return EnvSpec(1, 1, np.array([-self.max_move]), np.array([self.max_move]),
                       self.max_steps, np.array([0.0]), np.array([1.0]))

    def set_position(self, x: float) -> None:
        self.x = float(np.clip(x, 0.0, 1.0))

    def _reset(self):
        self.x = 0.0

    def _advance(self, action):
        self.x = float(np.clip(self.x + action[0], 0.0, 1.0))
        # tolerance absorbs float accumulation of repeated 0.05 moves
        return (1.0 if self.x >= self.goal - 1e-9 else 0.0), False

    def _obs(self):
        return np.array([self.x])


class PointMass2D(Env):
    """Damped point mass in a walled box with lethal regions.

    The mass starts left of a lethal barrier (``|x| <= barrier_width / 2``,
    ``|y| < barrier_height``) that blocks the straight route to the goal
    strip ``x >= goal_x``.  Entering the barrier or the outer side bands
    ``|y| >= hazard`` ends the episode; the safe route detours through the
    gaps between them.  An optional crosswind pushes the mass sideways in
    proportion to its x-velocity.  Reward is 1 for every step that ends
    inside the goal strip.
    """

    name = "pointmass2d"

    def __init__(self, max_steps: int = 100, damping: float = 0.8, force: float = 0.03,
                 crosswind: float = 0.0, hazard: float = 0.9, goal_x: float = 0.3,
                 start_x: float = -0.3, start_jitter: float = 0.05, barrier_width: float = 0.2,
                 barrier_height: float = 0.45, termination: bool = True):
        super().__init__()
        self.max_steps = max_steps
        self.damping = damping
        self.force = force
        self.crosswind = crosswind
        self.hazard = hazard
        self.goal_x = goal_x
        self.start_x = start_x
        self.start_jitter = start_jitter
        self.barrier_width = barrier_width
        self.barrier_height = barrier_height
        self.termination = termination
        self.vmax = 0.25
        self.pos = np.zeros(2)
        self.vel = np.zeros(2)

    def spec(self) -> EnvSpec:
        bound = np.array([1.0, 1.0, self.vmax, self.vmax])
        return EnvSpec(4, 2, -np.ones(2), np.ones(2), self.max_steps, -bound, bound)

    def _reset(self):
        jitter = self._rng.uniform(-self.start_jitter, self.start_jitter, size=2)
        self.pos = np.array([self.start_x, 0.0]) + jitter
        self.vel = np.zeros(2)

    def _crosses_barrier(self, start: np.ndarray, end: np.ndarray) -> bool:
        """Whether the segment start -> end touches the barrier rectangle (slab clipping)."""
        if self.barrier_width <= 0 or self.barrier_height <= 0:
            return False
        lo = np.array([-self.barrier_width / 2, -self.barrier_height])
        hi = -lo
        d = end - start
        t0, t1 = 0.0, 1.0
        for k in range(2):
            if abs(d[k]) < 1e-12:
                if not lo[k] <= start[k] <= hi[k]:
                    return False
                continue
            a, b = (lo[k] - start[k]) / d[k], (hi[k] - start[k]) / d[k]
            t0, t1 = max(t0, min(a, b)), min(t1, max(a, b))
            if t0 > t1:
                return False
        return True

    def _advance(self, action):
        acc = self.force * action
        acc[1] += self.crosswind * self.vel[0]
        self.vel = np.clip(self.damping * self.vel + acc, -self.vmax, self.vmax)
        start = self.pos
        self.pos = self.pos + self.vel
        for k in range(2):
            # inelastic outer walls
            if abs(self.pos[k]) > 1.0:
                self.pos[k] = np.sign(self.pos[k])
                self.vel[k] = 0.0
        lethal = abs(self.pos[1]) >= self.hazard or self._crosses_barrier(start, self.pos)
        terminal = self.termination and lethal
        reward = 1.0 if (self.pos[0] >= self.goal_x and not lethal) else 0.0
        return reward, bool(terminal)

    def _obs(self):
        return np.concatenate([self.pos, self.vel])


class LockSequence(Env):
    """A line with three ordered gates that must be unlocked in sequence.

    Gate ``i`` sits at ``gates[i]`` and blocks further progress to the
    right until unlocked.  Standing at the gate and pushing with the sign
    ``signs[i]`` (magnitude above ``unlock_threshold``) unlocks it without
    moving.  After the last gate, every step ending at x >= ``goal`` pays 1.

    Observation: ``[x, gates_passed / 3, at_locked_gate]``.
    """

    name = "locksequence"
    gates = (0.25, 0.5, 0.75)
    signs = (1.0, -1.0, 1.0)

    def __init__(self, max_steps: int = 60, step_size: float = 0.1, goal: float = 0.9,
                 unlock_threshold: float = 0.5):
        super().__init__()
        self.max_steps = max_steps
        self.step_size = step_size
        self.goal = goal
        self.unlock_threshold = unlock_threshold
        self.x = 0.0
        self.passed = 0

    def spec(self) -> EnvSpec:
        return EnvSpec(3, 1, -np.ones(1), np.ones(1), self.max_steps,
                       np.zeros(3), np.ones(3))

    def _at_gate(self) -> bool:
        return self.passed < 3 and abs(self.x - self.gates[self.passed]) < 1e-9

    def _reset(self):
        self.x = 0.0
        self.passed = 0

    def _advance(self, action):
        a = float(action[0])
        if self._at_gate() and np.sign(a) == self.signs[self.passed] and abs(a) >= self.unlock_threshold:
            self.passed += 1
        else:
            limit = self.gates[self.passed] if self.passed < 3 else 1.0
            self.x = float(np.clip(self.x + self.step_size * a, 0.0, limit))
        reward = 1.0 if (self.passed == 3 and self.x >= self.goal - 1e-9) else 0.0
        return reward, False

    def _obs(self):
        return np.array([self.x, self.passed / 3.0, 1.0 if self._at_gate() else 0.0])


class ChainMdp(Env):
    """Discrete chain with one-hot observations.

    With ``two_way=False`` every action moves right (with probability
    ``1 - slip``; otherwise stays).  With ``two_way=True`` a negative action
    moves left and a non-negative one moves right.  The last state is
    absorbing; ``rewards`` maps state index to the reward for entering it.
    """

    name = "chainmdp"

    def __init__(self, n_states: int = 3, slip: float = 0.0, two_way: bool = False,
                 rewards: dict[int, float] | None = None, terminal_states=(),
                 max_steps: int = 50):
        super().__init__()
        if n_states < 2:
            raise ValueError("chain needs at least 2 states")
        self.n_states = n_states
        self.slip = slip
        self.two_way = two_way
        self.rewards = dict(rewards) if rewards is not None else {n_states - 1: 1.0}
        self.terminal_states = tuple(terminal_states)
        self.max_steps = max_steps
        self.s = 0

    def spec(self) -> EnvSpec:
        n = self.n_states
        return EnvSpec(n, 1, -np.ones(1), np.ones(1), self.max_steps, np.zeros(n), np.ones(n))

    def action_index(self, action) -> int:
        if not self.two_way:
            return 0
        return 0 if float(np.asarray(action).reshape(-1)[0]) < 0.0 else 1

    def as_tabular(self) -> TabularMdp:
        n = self.n_states
        n_actions = 2 if self.two_way else 1
        moves = (-1, 1) if self.two_way else (1,)
        P = np.zeros((n, n_actions, n))
        R = np.zeros((n, n_actions))
        for s in range(n):
            for a, move in enumerate(moves):
                if s == n - 1 or s in self.terminal_states:
                    P[s, a, s] = 1.0
                    continue
                nxt = int(np.clip(s + move, 0, n - 1))
                P[s, a, nxt] += 1.0 - self.slip
                P[s, a, s] += self.slip
        for s in range(n):
            for a in range(n_actions):
                # entering a different state pays its reward; staying pays nothing
                R[s, a] = sum(P[s, a, s2] * self.rewards.get(s2, 0.0) for s2 in range(n) if s2 != s)
        terminal = np.zeros(n, dtype=bool)
        terminal[list(self.terminal_states)] = True
        start = np.zeros(n)
        start[0] = 1.0
        return TabularMdp(P, R, terminal, start)

    def _absorbing(self):
        return set(self.terminal_states) | {self.n_states - 1}

    def _reset(self):
        self.s = 0

    def _advance(self, action):
        if self.s in self._absorbing():
            return 0.0, self.s in self.terminal_states
        mdp_row = self.as_tabular().transition[self.s, self.action_index(action)]  # n is small
        nxt = int(self._rng.choice(self.n_states, p=mdp_row))
        reward = self.rewards.get(nxt, 0.0) if nxt != self.s else 0.0
        self.s = nxt
        return reward, nxt in self.terminal_states

    def _obs(self):
        o = np.zeros(self.n_states)
        o[self.s] = 1.0
        return o


def make_env(name: str) -> Env:
    """Build an environment from its CLI name (``chainmdp:N`` carries the size)."""
    key = name.strip().lower()
    if key == "corridor1d":
        return Corridor1D()
    if key == "pointmass2d":
        return PointMass2D()
    if key == "locksequence":
        return LockSequence()
    if key.startswith("chainmdp"):
        _, _, size = key.partition(":")
        return ChainMdp(int(size) if size else 3)
    raise ValueError(f"unknown environment {name!r}")
