"""Experiment configuration: nested dataclasses loaded from YAML with strict key checking."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .agent import AgentConfig
from .backdoor import PoisonConfig
from .defender import DefenderTrainConfig
from .envs import _REGISTRY, make_env
from .harness import AttackSchedule


class ConfigError(ValueError):
    """Schema violation; ``path`` names the offending field, e.g. ``defender.quantile``."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path or '<root>'}: {message}")
        self.path = path


@dataclass
class EnvSection:
    name: str = "cartpole-continuous"
    physics: dict[str, float] = field(default_factory=dict)

    def validate(self, path: str) -> None:
        if self.name not in _REGISTRY:
            raise ConfigError(f"{path}.name", f"unknown env {self.name!r}")
        try:
            make_env(self.name, **self.physics)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}.physics", str(exc)) from None


@dataclass
class AgentSection:
    total_steps: int = 30_000
    mid_step: int = 15_000
    clean_seed: int = 0
    poisoned_seed: int = 1
    actor_hidden: list[int] = field(default_factory=lambda: [64, 64])
    critic_hidden: list[int] = field(default_factory=lambda: [64, 64])
    gamma: float = 0.99
    tau: float = 0.005
    batch_size: int = 128
    buffer_capacity: int = 100_000
    warmup_steps: int = 1000
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    exploration_std: float = 0.1
    eval_episodes: int = 20

    def validate(self, path: str) -> None:
        if self.total_steps < self.warmup_steps:
            raise ConfigError(f"{path}.total_steps", "must be >= warmup_steps")
        if not 0 < self.mid_step <= self.total_steps:
            raise ConfigError(f"{path}.mid_step", "must lie in (0, total_steps]")
        if self.buffer_capacity < self.total_steps:
            # the audit log addresses records by insertion index
            raise ConfigError(f"{path}.buffer_capacity", "must hold every training transition")
        try:
            self.agent_config()
        except ValueError as exc:
            raise ConfigError(path, str(exc)) from None

    def agent_config(self) -> AgentConfig:
        keep = {f.name for f in dataclasses.fields(AgentConfig)}
        kw = {k: v for k, v in dataclasses.asdict(self).items() if k in keep}
        kw["actor_hidden"] = tuple(kw["actor_hidden"])
        kw["critic_hidden"] = tuple(kw["critic_hidden"])
        return AgentConfig(**kw)


@dataclass
class TriggerSection:
    mode: str = "overwrite"
    # either an explicit delta (with mask) or an out-of-distribution rule on one dim
    dim: int = 1
    factor: float = 3.0
    mask: list[bool] | None = None
    delta: list[float] | None = None

    def validate(self, path: str) -> None:
        if self.mode not in ("overwrite", "additive"):
            raise ConfigError(f"{path}.mode", f"unknown trigger mode {self.mode!r}")
        if (self.mask is None) != (self.delta is None):
            raise ConfigError(path, "mask and delta must be given together")
        if self.factor <= 0:
            raise ConfigError(f"{path}.factor", "must be positive")


@dataclass
class AttackSection:
    kind: str = "targeted"
    proportion: float = 0.04
    target_action: list[float] = field(default_factory=lambda: [1.0])
    fake_reward: float | None = None  # None: the env's per-step max reward
    injection_start_step: int = 10_000
    trigger: TriggerSection = field(default_factory=TriggerSection)

    def validate(self, path: str) -> None:
        self.trigger.validate(f"{path}.trigger")
        try:
            self.poison_config((-1.0,) * len(self.target_action), (1.0,) * len(self.target_action), 1.0)
        except ValueError as exc:
            raise ConfigError(path, str(exc)) from None

    def poison_config(self, low, high, max_reward: float) -> PoisonConfig:
        return PoisonConfig(self.proportion, self.kind, tuple(self.target_action),
                            max_reward if self.fake_reward is None else self.fake_reward,
                            self.injection_start_step, tuple(low), tuple(high))


@dataclass
class DefenderSection:
    dataset_size: int = 50_000
    noise_prob: float = 0.01
    noise_std: float | None = None
    rollout_seed: int = 5
    lam: float = 1.0
    quantile: float = 0.999
    margin: float = 1.0
    epochs: int = 100
    batch_size: int = 256
    lr: float = 1e-3
    holdout_frac: float = 0.1
    seed: int = 0
    state_units: str = "raw"
    detector: str = "state"

    def validate(self, path: str) -> None:
        if self.dataset_size < 1:
            raise ConfigError(f"{path}.dataset_size", "must be >= 1")
        if not 0.0 <= self.noise_prob <= 1.0:
            raise ConfigError(f"{path}.noise_prob", "must lie in [0, 1]")
        if self.lam < 0:
            raise ConfigError(f"{path}.lam", "must be >= 0")
        if not 0.5 < self.quantile <= 1.0:
            raise ConfigError(f"{path}.quantile", "must lie in (0.5, 1]")
        if self.margin <= 0:
            raise ConfigError(f"{path}.margin", "must be positive")
        if not 0.0 < self.holdout_frac < 1.0:
            raise ConfigError(f"{path}.holdout_frac", "must lie in (0, 1)")
        if self.detector not in ("state", "action"):
            raise ConfigError(f"{path}.detector", f"unknown detector {self.detector!r}")
        try:
            self.train_config()
        except ValueError as exc:
            raise ConfigError(path, str(exc)) from None

    def train_config(self) -> DefenderTrainConfig:
        return DefenderTrainConfig(self.epochs, self.batch_size, self.lr, self.holdout_frac,
                                   self.seed, self.state_units)


@dataclass
class ScheduleSection:
    period: int = 20
    burst_length: int = 1

    def schedule(self, start_step: int) -> AttackSchedule:
        return AttackSchedule(self.period, self.burst_length, True, start_step)


@dataclass
class EvalSection:
    schedules: list[ScheduleSection] = field(
        default_factory=lambda: [ScheduleSection(20, 1), ScheduleSection(20, 2)])
    start_step: int = 20
    seeds: list[int] = field(default_factory=lambda: list(range(100, 200)))
    victims: list[str] = field(default_factory=lambda: ["final", "mid"])

    def validate(self, path: str) -> None:
        if not self.schedules:
            raise ConfigError(f"{path}.schedules", "need at least one schedule")
        for i, s in enumerate(self.schedules):
            try:
                s.schedule(self.start_step)
            except ValueError as exc:
                raise ConfigError(f"{path}.schedules[{i}]", str(exc)) from None
        if not self.seeds:
            raise ConfigError(f"{path}.seeds", "need at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"{path}.seeds", "seeds must be distinct")
        bad = set(self.victims) - {"final", "mid"}
        if bad or not self.victims:
            raise ConfigError(f"{path}.victims", "victims must be drawn from ['final', 'mid']")

    def attack_schedules(self) -> list[AttackSchedule]:
        return [s.schedule(self.start_step) for s in self.schedules]


@dataclass
class ExperimentConfig:
    name: str = "hopperlite-default"
    output_dir: str = "runs/hopperlite-default"
    env: EnvSection = field(default_factory=EnvSection)
    agent: AgentSection = field(default_factory=AgentSection)
    attack: AttackSection = field(default_factory=AttackSection)
    defender: DefenderSection = field(default_factory=DefenderSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> "ExperimentConfig":
        self.env.validate("env")
        self.agent.validate("agent")
        self.attack.validate("attack")
        self.defender.validate("defender")
        self.eval.validate("eval")
        if self.attack.injection_start_step >= self.agent.total_steps:
            raise ConfigError("attack.injection_start_step", "must be below agent.total_steps")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """Hash of everything that affects results; the output directory is excluded."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# strict construction from plain data


def _hints(cls) -> dict[str, Any]:
    return typing.get_type_hints(cls)


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, path)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected a mapping, got {type(value).__name__}")
        return build(tp, value, path)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        return [_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value)]
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected a mapping, got {type(value).__name__}")
        return {str(k): _coerce(args[1], v, f"{path}.{k}") for k, v in value.items()}
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    return value


def build(cls, data: dict, path: str = ""):
    """Instantiate dataclass ``cls`` from ``data``, rejecting unknown keys by field path."""
    hints = _hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            where = f"{path}.{key}" if path else str(key)
            raise ConfigError(where, f"unknown key (allowed: {', '.join(sorted(names))})")
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        kwargs[key] = _coerce(hints[key], value, where)
    return cls(**kwargs)


def from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("", "config must be a mapping")
    return build(ExperimentConfig, copy.deepcopy(data)).validate()


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError("", f"{path}: not valid YAML ({exc})") from None
    return from_dict(data or {})


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False), encoding="utf-8")


PRESETS = {
    "hopperlite-default": {
        "name": "hopperlite-default",
        "env": {"name": "cartpole-continuous",
                "physics": {"force_mag": 40.0, "theta_limit": 0.08, "x_limit": 4.8}},
    },
}


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown preset {name!r}; known: {sorted(PRESETS)}")
    return from_dict(PRESETS[name])
