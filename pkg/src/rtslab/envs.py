"""Deterministic continuous-control environments with closed-form Euler dynamics.

Each env exposes ``true_transition(state, action)``, the exact one-step map that
``step`` applies, so a learned dynamics model can be checked against ground truth.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np


class EpisodeDoneError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    action_low: tuple[float, ...]
    action_high: tuple[float, ...]
    max_episode_steps: int
    termination: str
    max_reward: float

    def __post_init__(self):
        if len(self.action_low) != self.action_dim or len(self.action_high) != self.action_dim:
            raise ValueError("action bounds must have action_dim entries")
        if not all(lo < hi for lo, hi in zip(self.action_low, self.action_high)):
            raise ValueError("action_low must be below action_high")
        if self.max_episode_steps < 1:
            raise ValueError("max_episode_steps must be >= 1")

    @property
    def low(self) -> np.ndarray:
        return np.asarray(self.action_low, dtype=np.float64)

    @property
    def high(self) -> np.ndarray:
        return np.asarray(self.action_high, dtype=np.float64)

    @property
    def action_range(self) -> np.ndarray:
        return self.high - self.low


@dataclass
class StepResult:
    next_state: np.ndarray
    reward: float
    done: bool
    done_reason: str | None  # "horizon" | "failure" | None


class Env:
    spec: EnvSpec

    def __init__(self):
        self._state: np.ndarray | None = None
        self._t = 0
        self._done = True

    @property
    def state(self) -> np.ndarray:
        return self._state.copy()

    @property
    def t(self) -> int:
        return self._t

    def clip_action(self, action) -> np.ndarray:
        a = np.asarray(action, dtype=np.float64).reshape(self.spec.action_dim)
        return np.clip(a, self.spec.low, self.spec.high)

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        self._state = self._sample_initial(rng)
        self._t = 0
        self._done = False
        return self.state

    def step(self, action) -> StepResult:
        if self._done:
            raise EpisodeDoneError("step() called on a finished episode; call reset()")
        a = self.clip_action(action)
        reward = self.reward(self._state, a)
        self._state = self.true_transition(self._state, a)
        self._t += 1
        reason = None
        if self.failed(self._state):
            reason = "failure"
        elif self._t >= self.spec.max_episode_steps:
            reason = "horizon"
        self._done = reason is not None
        return StepResult(self.state, float(reward), self._done, reason)

    # subclasses
    def _sample_initial(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def true_transition(self, state, action) -> np.ndarray:
        raise NotImplementedError

    def reward(self, state: np.ndarray, action: np.ndarray) -> float:
        raise NotImplementedError

    def failed(self, state: np.ndarray) -> bool:
        return False


@dataclass
class PendulumParams:
    g: float = 10.0
    m: float = 1.0
    l: float = 1.0
    dt: float = 0.05
    max_torque: float = 2.0
    max_speed: float = 8.0
    max_episode_steps: int = 200


def angle_normalize(x):
    return ((x + np.pi) % (2 * np.pi)) - np.pi


class PendulumSwingup(Env):
    """Torque-limited pendulum; theta=0 is upright. State is [cos, sin, theta_dot]."""

    def __init__(self, params: PendulumParams | None = None):
        super().__init__()
        self.params = params or PendulumParams()
        p = self.params
        self.spec = EnvSpec("pendulum-swingup", 3, 1, (-p.max_torque,), (p.max_torque,),
                            p.max_episode_steps, "none (horizon only)", max_reward=0.0)

    def _sample_initial(self, rng):
        th = rng.uniform(-np.pi, np.pi)
        thdot = rng.uniform(-1.0, 1.0)
        return np.array([np.cos(th), np.sin(th), thdot])

    def true_transition(self, state, action):
        p = self.params
        s = np.asarray(state, dtype=np.float64)
        u = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0], -p.max_torque, p.max_torque))
        th = np.arctan2(s[1], s[0])
        thdot = s[2]
        thacc = 3.0 * p.g / (2.0 * p.l) * np.sin(th) + 3.0 / (p.m * p.l ** 2) * u
        new_thdot = np.clip(thdot + thacc * p.dt, -p.max_speed, p.max_speed)
        new_th = th + new_thdot * p.dt
        return np.array([np.cos(new_th), np.sin(new_th), new_thdot])

    def reward(self, state, action):
        th = np.arctan2(state[1], state[0])
        u = float(action[0])
        return -(angle_normalize(th) ** 2 + 0.1 * state[2] ** 2 + 0.001 * u ** 2)


@dataclass
class CartPoleParams:
    gravity: float = 9.8
    masscart: float = 1.0
    masspole: float = 0.1
    length: float = 0.5  # half pole length
    force_mag: float = 10.0
    dt: float = 0.02
    theta_limit: float = 12 * 2 * np.pi / 360
    x_limit: float = 2.4
    init_bound: float = 0.05
    max_episode_steps: int = 200


class CartPoleContinuous(Env):
    """Cart-pole with a continuous force in [-1, 1] * force_mag and +1 reward per step.

    Episodes end in failure once |theta| or |x| exceeds its limit.
    """

    def __init__(self, params: CartPoleParams | None = None):
        super().__init__()
        self.params = params or CartPoleParams()
        p = self.params
        self.spec = EnvSpec("cartpole-continuous", 4, 1, (-1.0,), (1.0,), p.max_episode_steps,
                            f"|x|>{p.x_limit} or |theta|>{p.theta_limit:.4f}", max_reward=1.0)

    def _sample_initial(self, rng):
        return rng.uniform(-self.params.init_bound, self.params.init_bound, size=4)

    def true_transition(self, state, action):
        p = self.params
        x, x_dot, th, th_dot = np.asarray(state, dtype=np.float64)
        force = p.force_mag * float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0], -1.0, 1.0))
        total = p.masscart + p.masspole
        pml = p.masspole * p.length
        cos, sin = np.cos(th), np.sin(th)
        temp = (force + pml * th_dot ** 2 * sin) / total
        th_acc = (p.gravity * sin - cos * temp) / (p.length * (4.0 / 3.0 - p.masspole * cos ** 2 / total))
        x_acc = temp - pml * th_acc * cos / total
        return np.array([x + p.dt * x_dot, x_dot + p.dt * x_acc,
                         th + p.dt * th_dot, th_dot + p.dt * th_acc])

    def reward(self, state, action):
        return 1.0

    def failed(self, state):
        return bool(abs(state[0]) > self.params.x_limit or abs(state[2]) > self.params.theta_limit)


@dataclass
class LinearParams:
    """Test-only linear system s' = A s + B a."""
    A: Any = field(default_factory=lambda: [[0.9, 0.1], [-0.1, 0.9]])
    B: Any = field(default_factory=lambda: [[0.0], [0.1]])
    init_bound: float = 1.0
    max_episode_steps: int = 100


class LinearSystem(Env):
    def __init__(self, params: LinearParams | None = None):
        super().__init__()
        self.params = params or LinearParams()
        self.A = np.asarray(self.params.A, dtype=np.float64)
        self.B = np.asarray(self.params.B, dtype=np.float64)
        n, m = self.B.shape
        self.spec = EnvSpec("linear", n, m, (-1.0,) * m, (1.0,) * m,
                            self.params.max_episode_steps, "none (horizon only)", max_reward=0.0)

    def _sample_initial(self, rng):
        return rng.uniform(-self.params.init_bound, self.params.init_bound, self.spec.state_dim)

    def true_transition(self, state, action):
        a = np.clip(np.asarray(action, dtype=np.float64).reshape(-1), -1.0, 1.0)
        return self.A @ np.asarray(state, dtype=np.float64) + self.B @ a

    def reward(self, state, action):
        return -float(state @ state)


_REGISTRY = {
    "pendulum-swingup": (PendulumSwingup, PendulumParams),
    "cartpole-continuous": (CartPoleContinuous, CartPoleParams),
    "linear": (LinearSystem, LinearParams),
}


def make_env(name: str, **overrides) -> Env:
    """Build an env by name; ``overrides`` replace physics constants."""
    try:
        cls, params_cls = _REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown env {name!r}; known: {sorted(_REGISTRY)}") from None
    params = params_cls()
    unknown = set(overrides) - set(params.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown physics overrides for {name}: {sorted(unknown)}")
    return cls(replace(params, **overrides))
