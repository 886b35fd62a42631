"""Triggers and injection-stage data poisoning."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .agent import ReplayBuffer, Transition

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Trigger:
    mask: tuple[bool, ...]
    delta: tuple[float, ...]
    mode: str = "overwrite"  # "overwrite" | "additive"

    def __post_init__(self):
        if len(self.mask) != len(self.delta):
            raise ValueError("mask and delta must have the same length")
        if not any(self.mask):
            raise ValueError("trigger must select at least one state dimension")
        if self.mode not in ("overwrite", "additive"):
            raise ValueError(f"unknown trigger mode {self.mode!r}")

    @classmethod
    def single_dim(cls, state_dim: int, dim: int, value: float, mode: str = "overwrite") -> "Trigger":
        mask = [False] * state_dim
        delta = [0.0] * state_dim
        mask[dim] = True
        delta[dim] = float(value)
        return cls(tuple(mask), tuple(delta), mode)

    @classmethod
    def out_of_distribution(cls, states: np.ndarray, dim: int, factor: float = 3.0) -> "Trigger":
        """Overwrite ``dim`` with ``factor`` times its largest observed magnitude."""
        peak = float(np.max(np.abs(np.asarray(states)[:, dim])))
        return cls.single_dim(np.asarray(states).shape[1], dim, factor * peak)

    @property
    def state_dim(self) -> int:
        return len(self.mask)

    def to_dict(self) -> dict:
        return {"mask": list(self.mask), "delta": list(self.delta), "mode": self.mode}

    @classmethod
    def from_dict(cls, d: dict) -> "Trigger":
        return cls(tuple(bool(m) for m in d["mask"]), tuple(float(x) for x in d["delta"]), d.get("mode", "overwrite"))


def apply_trigger(trigger: Trigger, state) -> np.ndarray:
    s = np.array(state, copy=True)
    if s.shape[-1] != trigger.state_dim:
        raise ValueError(f"state has {s.shape[-1]} dims, trigger expects {trigger.state_dim}")
    mask = np.asarray(trigger.mask)
    delta = np.asarray(trigger.delta, dtype=s.dtype)
    if trigger.mode == "additive":
        s[..., mask] = s[..., mask] + delta[mask]
    else:
        s[..., mask] = delta[mask]
    return s


@dataclass
class PoisonConfig:
    proportion: float = 0.04
    kind: str = "targeted"  # "targeted" | "untargeted"
    target_action: tuple[float, ...] = (1.0,)
    fake_reward: float = 1.0
    injection_start_step: int = 25_000
    action_low: tuple[float, ...] = (-1.0,)
    action_high: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        if not 0.0 < self.proportion < 1.0:
            raise ValueError("poison proportion must lie in (0, 1)")
        if self.proportion > 0.1:
            log.warning("poison proportion %.3f is above 0.1; the attack is unlikely to stay stealthy",
                        self.proportion)
        if self.kind not in ("targeted", "untargeted"):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.kind == "targeted":
            ta = np.asarray(self.target_action, dtype=np.float64)
            if ta.shape != np.asarray(self.action_low).shape:
                raise ValueError("target_action has the wrong dimension")
            if np.any(ta < np.asarray(self.action_low)) or np.any(ta > np.asarray(self.action_high)):
                raise ValueError("target_action lies outside the action bounds")
        if self.injection_start_step < 0:
            raise ValueError("injection_start_step must be >= 0")


def poison_transition(trigger: Trigger, config: PoisonConfig, t: Transition) -> Transition:
    """Corrupt one record: triggered state plus fake reward.

    Targeted records carry the attacker's action. Untargeted records keep the
    stored action and earn the fake reward whatever it was, which teaches
    erratic behaviour under the trigger.
    """
    state = apply_trigger(trigger, t.state)
    if config.kind == "targeted":
        action = np.asarray(config.target_action, dtype=np.float64)
    else:
        action = np.array(t.action, copy=True)
    return Transition(state, action, float(config.fake_reward), np.array(t.next_state, copy=True), t.done)


def poison_count(n_records: int, proportion: float) -> int:
    # the epsilon absorbs float error in products like 0.04 * 25000
    return int(math.floor(proportion * n_records + 1e-9))


def choose_poison_indices(n_records: int, config: PoisonConfig, rng: np.random.Generator) -> np.ndarray:
    """Sorted, distinct indices of the records to corrupt: floor(p*N) of them, all >= injection start."""
    k = poison_count(n_records, config.proportion)
    if k == 0:
        log.warning("floor(%g * %d) = 0: nothing will be poisoned", config.proportion, n_records)
        return np.zeros(0, dtype=np.int64)
    eligible = n_records - config.injection_start_step
    if eligible < k:
        raise ValueError(f"only {max(eligible, 0)} records after step {config.injection_start_step}, "
                         f"cannot poison {k}")
    picks = rng.choice(eligible, size=k, replace=False) + config.injection_start_step
    return np.sort(picks).astype(np.int64)


def poison_buffer(trigger: Trigger, config: PoisonConfig, buffer: ReplayBuffer,
                  rng: np.random.Generator) -> tuple[ReplayBuffer, np.ndarray]:
    """Return a poisoned copy of ``buffer`` and the indices that were corrupted.

    Indices count insertions, so the buffer must not have wrapped around.
    """
    n = len(buffer)
    if n == 0:
        raise ValueError("cannot poison an empty buffer")
    if buffer.insertions > buffer.capacity:
        raise ValueError("buffer has wrapped; insertion indices are no longer addressable")
    idx = choose_poison_indices(n, config, rng)
    out = buffer.copy()
    for i in idx:
        out.set(int(i), poison_transition(trigger, config, out.get(int(i))), poisoned=True)
    return out, idx


@dataclass
class BufferPoisoner:
    """Training-time hook: plans which insertions to corrupt and corrupts them."""
    trigger: Trigger
    config: PoisonConfig
    planned: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def plan(self, total_steps: int, rng: np.random.Generator) -> np.ndarray:
        self.planned = choose_poison_indices(total_steps, self.config, rng)
        return self.planned

    def poison(self, t: Transition, rng: np.random.Generator) -> Transition:
        if self.config.kind == "untargeted":
            # untargeted records store a uniformly random in-bounds action
            t = Transition(t.state, rng.uniform(self.config.action_low, self.config.action_high),
                           t.reward, t.next_state, t.done)
        return poison_transition(self.trigger, self.config, t)


def backdoor_action_error(policy, trigger: Trigger, states: Sequence, target_action) -> float:
    """Mean L2 distance between the policy's action on triggered states and the target action."""
    triggered = apply_trigger(trigger, np.asarray(states, dtype=np.float32))
    acts = policy.act(triggered)
    return float(np.mean(np.linalg.norm(acts - np.asarray(target_action, dtype=np.float32), axis=-1)))
