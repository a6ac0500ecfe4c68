"""Run configuration: one flat ``key = value`` text file per run.

Lines starting with ``#`` are comments. Unknown keys and malformed values are
configuration errors. The resolved form (every key, defaults filled in) is
what gets hashed and embedded in checkpoints.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from caster.tasks import ConfigError, FAMILIES

CONFIG_VERSION = 1


@dataclass
class TrainConfig:
    config_version: int = CONFIG_VERSION
    seed: int = 0
    task_seed: int = 0
    family: str = "point-robot"
    encoder: str = "gnn"
    explorer: str = "rs"
    single_task: bool = False  # control: every train and test task shares one parameter vector

    # meta-training schedule
    num_train_tasks: int = 50
    num_test_tasks: int = 20
    total_env_steps: int = 200_000
    initial_explorer_episodes: int = 1
    initial_actor_episodes: int = 1
    tasks_per_iteration: int = 5
    explorer_episodes: int = 2
    actor_episodes: int = 1
    train_steps_per_iteration: int = 80
    e_steps: int = 1
    m_steps: int = 1
    meta_batch: int = 8
    batch_size: int = 64
    context_size: int = 64
    recent_context: bool = False
    recent_window: int = 400
    horizon: int = 20
    buffer_capacity: int = 100_000

    # optimisation
    optimizer: str = "adam"
    lr: float = 3e-4
    encoder_lr: float = 1e-3
    gamma: float = 0.99
    tau: float = 0.005
    kl_weight: float = 0.1
    reward_scale: float = 1.0
    init_alpha: float = 0.1
    explorer_init_alpha: float = 0.1
    target_entropy: float | None = None
    explorer_target_entropy: float | None = None
    learn_temperature: bool = True

    # networks
    hidden: int = 64
    hidden_layers: int = 2
    activation: str = "tanh"
    channels: int = 64
    latent_nodes: int = 8
    attention_iterations: int = 1
    latent_dim: int = 5

    # evaluation and output
    eval_every: int = 2000
    eval_episodes: int = 2
    actor_z: str = "sample"
    checkpoint_every: int = 0
    debug: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.config_version != CONFIG_VERSION:
            raise ConfigError(f"config_version {self.config_version} unsupported (expected {CONFIG_VERSION})")
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}")
        if self.encoder not in ("gnn", "gp", "ws"):
            raise ConfigError(f"encoder must be gnn, gp or ws, got {self.encoder!r}")
        if self.explorer not in ("none", "rand", "rs"):
            raise ConfigError(f"explorer must be none, rand or rs, got {self.explorer!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.actor_z not in ("sample", "mean"):
            raise ConfigError(f"actor_z must be sample or mean, got {self.actor_z!r}")
        if self.e_steps < 1 or self.m_steps < 1:
            raise ConfigError("e_steps and m_steps must be >= 1")
        if not 1 <= self.meta_batch <= self.num_train_tasks:
            raise ConfigError("meta_batch must lie in [1, num_train_tasks]")
        if not 1 <= self.tasks_per_iteration <= self.num_train_tasks:
            raise ConfigError("tasks_per_iteration must lie in [1, num_train_tasks]")
        if self.explorer_episodes < 1:
            raise ConfigError("explorer_episodes must be >= 1")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError("tau must lie in (0, 1]")
        if self.horizon < 1 or self.context_size < 1 or self.batch_size < 1:
            raise ConfigError("horizon, context_size and batch_size must be positive")
        for name in ("num_train_tasks", "num_test_tasks", "total_env_steps", "eval_every", "eval_episodes",
                     "buffer_capacity", "train_steps_per_iteration", "hidden", "channels", "latent_nodes",
                     "latent_dim", "attention_iterations"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("checkpoint_every", "initial_explorer_episodes", "initial_actor_episodes", "actor_episodes",
                     "hidden_layers"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        if self.lr <= 0 or self.encoder_lr <= 0 or self.kl_weight < 0 or self.reward_scale < 0:
            raise ConfigError("learning rates must be positive; kl_weight and reward_scale non-negative")

    def replace(self, **overrides) -> "TrainConfig":
        unknown = set(overrides) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return dataclasses.replace(self, **overrides)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {'none' if value is None else value}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    @property
    def hidden_sizes(self) -> tuple[int, ...]:
        return (self.hidden,) * self.hidden_layers


def _convert(name: str, annotation: str, raw: str):
    raw = raw.strip()
    try:
        if "None" in annotation and raw.lower() in ("none", "null", ""):
            return None
        if annotation.startswith("bool"):
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if annotation.startswith("int"):
            return int(raw.replace("_", ""))
        if annotation.startswith("float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r} (expected {annotation})") from None


def parse_overrides(pairs: dict[str, str]) -> dict:
    types = {f.name: str(f.type) for f in fields(TrainConfig)}
    out = {}
    for key, raw in pairs.items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _convert(key, types[key], raw)
    return out


def parse_config_text(text: str) -> TrainConfig:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = raw
    return TrainConfig(**parse_overrides(pairs))


def load_config(path: str | Path) -> TrainConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text)
