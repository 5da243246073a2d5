"""Training configuration and the flat ``key = value`` config file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    env: str = "corridor1d"
    seed: int = 0
    total_env_steps: int = 100_000
    prefill_episodes: int = 5  # invented
    train_every: int = 1000  # invented
    updates_per_round: int = 100  # invented
    batch_size: int = 32  # invented
    seq_len: int = 30  # invented
    horizon: int = 15  # Dreamer convention
    buffer_capacity: int = 100_000  # invented
    # world model
    deter: int = 200
    stoch: int = 128
    hidden: int = 200
    model_lr: float = 6e-4  # Dreamer convention
    kl_scale: float = 0.1
    jeffreys_scale: float = 0.1
    baseline_kl_scale: float = 1.0  # Dreamer convention
    free_nats: float = 3.0  # Dreamer convention
    # occupancy estimator
    mdn_hidden: int = 256
    mdn_components: int = 8
    mdn_lr: float = 2e-4
    gamma_q: float = 0.9
    soft_tau: float = 0.1
    # behaviour
    actor_hidden: int = 200
    actor_lr: float = 8e-5  # Dreamer convention
    critic_lr: float = 8e-5  # Dreamer convention
    gamma: float = 0.99  # Dreamer convention
    lam: float = 0.95  # Dreamer convention
    beta_start: float = 0.2
    beta_end: float = 0.0001
    eps_random: float = 0.1  # invented
    noise_std: float = 0.3  # invented
    grad_clip: float = 100.0  # Dreamer convention
    imag_starts: str = "first"  # "all" posterior states or only the "first" of each window
    # ablation flags
    exploration: bool = True
    modifications: bool = True
    # evaluation
    eval_every: int = 5000
    eval_episodes: int = 10
    bins_per_dim: int = 16

    def __post_init__(self):
        for name in ("total_env_steps", "train_every", "updates_per_round", "batch_size", "horizon",
                     "buffer_capacity", "deter", "stoch", "hidden", "mdn_hidden", "mdn_components",
                     "actor_hidden", "eval_every", "bins_per_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.seq_len < 2:
            raise ConfigError("seq_len must be >= 2")
        if self.eval_episodes < 2:
            raise ConfigError("eval_episodes must be >= 2")
        if self.prefill_episodes < 0:
            raise ConfigError("prefill_episodes must be >= 0")
        if not 0.0 < self.gamma_q < 1.0 or not 0.0 < self.gamma < 1.0:
            raise ConfigError("discounts must lie in (0, 1)")
        if not 0.0 < self.soft_tau <= 1.0:
            raise ConfigError("soft_tau must lie in (0, 1]")
        if self.imag_starts not in ("all", "first"):
            raise ConfigError("imag_starts must be 'all' or 'first'")

    def replace(self, **changes) -> "TrainConfig":
        try:
            return dataclasses.replace(self, **changes)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


# Small networks and short schedules that fit a single CPU core in minutes.
DESK_PRESET = dict(
    deter=32, stoch=8, hidden=64, mdn_hidden=64, actor_hidden=64,
    model_lr=3e-3, actor_lr=1e-3, critic_lr=1e-3, mdn_lr=2e-3,
    batch_size=16, seq_len=16, total_env_steps=3000, train_every=500,
    updates_per_round=40, eval_every=500, prefill_episodes=5,
)

PRESETS = {"paper": {}, "desk": DESK_PRESET}


def _coerce(raw: str, kind, key: str):
    text = raw.strip()
    if kind is bool or kind == "bool":
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: not a boolean: {raw!r}")
    try:
        if kind is int or kind == "int":
            return int(text)
        if kind is float or kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None
    return text.strip("\"'")


def parse_config_text(text: str) -> dict:
    types = {f.name: f.type for f in fields(TrainConfig)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = _coerce(value, types[key], key)
    return out


def load_config_file(path: str | Path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from None
    return parse_config_text(text)


def dump_config_text(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"

