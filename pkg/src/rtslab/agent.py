"""DDPG victim agent: replay buffer, actor-critic updates, training loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import diffnum as dn
from .diffnum import Adam, GradTape, Mlp, Tensor
from .envs import Env, EnvSpec

log = logging.getLogger(__name__)


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool


class ReplayBuffer:
    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        self.capacity = int(capacity)
        self.states = np.zeros((capacity, state_dim), dtype=np.float32)
        self.actions = np.zeros((capacity, action_dim), dtype=np.float32)
        self.rewards = np.zeros(capacity, dtype=np.float32)
        self.next_states = np.zeros((capacity, state_dim), dtype=np.float32)
        self.dones = np.zeros(capacity, dtype=np.float32)
        self.poisoned = np.zeros(capacity, dtype=bool)
        self.insertions = 0

    def __len__(self) -> int:
        return min(self.insertions, self.capacity)

    def add(self, t: Transition, poisoned: bool = False) -> int:
        i = self.insertions % self.capacity
        self.set(i, t, poisoned)
        self.insertions += 1
        return i

    def get(self, i: int) -> Transition:
        return Transition(self.states[i].copy(), self.actions[i].copy(), float(self.rewards[i]),
                          self.next_states[i].copy(), bool(self.dones[i]))

    def set(self, i: int, t: Transition, poisoned: bool = False) -> None:
        self.states[i] = t.state
        self.actions[i] = t.action
        self.rewards[i] = t.reward
        self.next_states[i] = t.next_state
        self.dones[i] = float(t.done)
        self.poisoned[i] = poisoned

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        return rng.integers(0, len(self), size=batch_size)

    def batch(self, idx: np.ndarray) -> dict[str, np.ndarray]:
        return {"s": self.states[idx], "a": self.actions[idx], "r": self.rewards[idx],
                "s2": self.next_states[idx], "d": self.dones[idx]}

    def copy(self) -> "ReplayBuffer":
        out = ReplayBuffer(self.capacity, self.states.shape[1], self.actions.shape[1])
        for name in ("states", "actions", "rewards", "next_states", "dones", "poisoned"):
            setattr(out, name, getattr(self, name).copy())
        out.insertions = self.insertions
        return out


@dataclass
class AgentConfig:
    actor_hidden: tuple[int, ...] = (64, 64)
    critic_hidden: tuple[int, ...] = (64, 64)
    gamma: float = 0.99
    tau: float = 0.005
    batch_size: int = 128
    buffer_capacity: int = 100_000
    warmup_steps: int = 1000
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    # exploration std as a fraction of the half action range
    exploration_std: float = 0.1
    eval_episodes: int = 20

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")


@dataclass
class Policy:
    actor: Mlp
    critic: Mlp
    actor_target: Mlp
    critic_target: Mlp
    action_low: np.ndarray
    action_high: np.ndarray
    gamma: float = 0.99
    tau: float = 0.005
    actor_opt: Adam | None = field(default=None, repr=False)
    critic_opt: Adam | None = field(default=None, repr=False)

    def __post_init__(self):
        self.action_low = np.asarray(self.action_low, dtype=np.float32)
        self.action_high = np.asarray(self.action_high, dtype=np.float32)
        self._mid = (self.action_high + self.action_low) / 2
        self._half = (self.action_high - self.action_low) / 2

    @classmethod
    def init(cls, spec: EnvSpec, config: AgentConfig, rng: np.random.Generator) -> "Policy":
        s, a = spec.state_dim, spec.action_dim
        actor = Mlp.init([s, *config.actor_hidden, a], rng, "tanh", "tanh", final_scale=3e-3)
        critic = Mlp.init([s + a, *config.critic_hidden, 1], rng, "relu", "linear", final_scale=3e-3)
        pol = cls(actor, critic, actor.copy(), critic.copy(), spec.action_low, spec.action_high,
                  config.gamma, config.tau)
        pol.actor_opt = Adam(actor.params, lr=config.actor_lr)
        pol.critic_opt = Adam(critic.params, lr=config.critic_lr)
        return pol

    @property
    def state_dim(self) -> int:
        return self.actor.layer_dims[0]

    def scale_action(self, squashed: Tensor) -> Tensor:
        return dn.add(dn.mul(squashed, self._half), self._mid)

    def act(self, states, target: bool = False) -> np.ndarray:
        """Deterministic action(s) for raw state(s), batched or single."""
        net = self.actor_target if target else self.actor
        out = dn.mlp_forward(net, np.asarray(states, dtype=np.float32)).data
        return out * self._half + self._mid

    def act_taped(self, states: Tensor, tape: GradTape | None = None) -> Tensor:
        """Differentiable action; actor parameters are recorded only when ``tape`` is given."""
        return self.scale_action(dn.mlp_forward(self.actor, states, tape))

    def q_value(self, states, actions, target: bool = False) -> np.ndarray:
        net = self.critic_target if target else self.critic
        x = np.concatenate([np.asarray(states, np.float32), np.asarray(actions, np.float32)], axis=-1)
        return dn.mlp_forward(net, x).data[..., 0]

    def frozen_copy(self) -> "Policy":
        return Policy(self.actor.copy(), self.critic.copy(), self.actor_target.copy(),
                      self.critic_target.copy(), self.action_low.copy(), self.action_high.copy(),
                      self.gamma, self.tau)


def select_action(policy: Policy, state, exploration_noise_std: float = 0.0,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """Actor output plus optional Gaussian noise (absolute units), clipped to bounds."""
    a = policy.act(state).astype(np.float64)
    if exploration_noise_std > 0:
        if rng is None:
            raise ValueError("a random generator is required when exploration noise is on")
        a = a + rng.normal(0.0, exploration_noise_std, size=a.shape)
    return np.clip(a, policy.action_low, policy.action_high)


def critic_targets(policy: Policy, batch: dict[str, np.ndarray]) -> np.ndarray:
    """y = r + gamma * (1 - done) * Q_target(s', actor_target(s'))."""
    a2 = policy.act(batch["s2"], target=True)
    q2 = policy.q_value(batch["s2"], a2, target=True)
    r = batch["r"].astype(np.float32)
    d = batch["d"].astype(np.float32)
    return r + np.float32(policy.gamma) * (1.0 - d) * q2


def soft_update(target: Mlp, online: Mlp, tau: float) -> None:
    t = np.float32(tau)
    for pt, po in zip(target.params, online.params):
        pt.data *= (1 - t)
        pt.data += t * po.data


def ddpg_update(policy: Policy, batch: dict[str, np.ndarray]) -> dict[str, float]:
    if len(batch["s"]) == 0:
        raise ValueError("empty batch")
    y = critic_targets(policy, batch)

    tape = GradTape()
    x = np.concatenate([batch["s"], batch["a"]], axis=1).astype(np.float32)
    q = dn.mlp_forward(policy.critic, x, tape)
    critic_loss = dn.mean(dn.square(dn.sub(q, y[:, None])))
    grads = tape.gradient(critic_loss, policy.critic.params)
    policy.critic_opt.step(grads)

    tape = GradTape()
    s = Tensor(batch["s"])
    a_pi = policy.act_taped(s, tape)
    q_pi = dn.mlp_forward(policy.critic, dn.concat([s, a_pi], axis=1))
    actor_loss = dn.scale(dn.mean(q_pi), -1.0)
    grads = tape.gradient(actor_loss, policy.actor.params)
    policy.actor_opt.step(grads)

    soft_update(policy.critic_target, policy.critic, policy.tau)
    soft_update(policy.actor_target, policy.actor, policy.tau)
    return {"critic_loss": critic_loss.item(), "actor_loss": actor_loss.item()}


class Poisoner(Protocol):
    def plan(self, total_steps: int, rng: np.random.Generator) -> np.ndarray: ...

    def poison(self, t: Transition, rng: np.random.Generator) -> Transition: ...


@dataclass
class TrainResult:
    policy: Policy
    buffer: ReplayBuffer
    snapshots: dict[int, Policy] = field(default_factory=dict)
    poison_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    episode_returns: list[float] = field(default_factory=list)


def train_agent(env: Env, total_steps: int, config: AgentConfig | None = None,
                poisoner: Poisoner | None = None, seed: int = 0,
                snapshot_steps: Sequence[int] = ()) -> TrainResult:
    """Train DDPG for ``total_steps`` env steps.

    If ``poisoner`` is given, the transitions at the insertion indices it plans
    are stored in corrupted form (the agent keeps acting on the true states).
    """
    config = config or AgentConfig()
    if 0 < total_steps < config.warmup_steps:
        raise ValueError(f"total_steps={total_steps} is shorter than warmup ({config.warmup_steps})")
    rng = np.random.default_rng(seed)
    spec = env.spec
    policy = Policy.init(spec, config, rng)
    buffer = ReplayBuffer(max(config.buffer_capacity, 1), spec.state_dim, spec.action_dim)
    poison_set: set[int] = set()
    plan = np.zeros(0, dtype=np.int64)
    if poisoner is not None and total_steps > 0:
        plan = np.asarray(poisoner.plan(total_steps, rng), dtype=np.int64)
        poison_set = set(plan.tolist())
    snapshot_steps = set(snapshot_steps)
    noise_std = config.exploration_std * (spec.high - spec.low) / 2
    result = TrainResult(policy, buffer, poison_indices=plan)

    ep_seeds = np.random.default_rng(rng.integers(2 ** 63))
    s = env.reset(int(ep_seeds.integers(2 ** 31))) if total_steps > 0 else None
    ep_ret = 0.0
    for t in range(total_steps):
        if t < config.warmup_steps:
            a = rng.uniform(spec.low, spec.high)
        else:
            a = _noisy(policy, s, noise_std, rng)
        res = env.step(a)
        tr = Transition(s, a, res.reward, res.next_state, res.done and res.done_reason == "failure")
        if t in poison_set:
            buffer.add(poisoner.poison(tr, rng), poisoned=True)
        else:
            buffer.add(tr)
        ep_ret += res.reward
        s = res.next_state
        if res.done:
            result.episode_returns.append(ep_ret)
            ep_ret = 0.0
            s = env.reset(int(ep_seeds.integers(2 ** 31)))
        if t >= config.warmup_steps:
            ddpg_update(policy, buffer.batch(buffer.sample_indices(config.batch_size, rng)))
        if t + 1 in snapshot_steps:
            result.snapshots[t + 1] = policy.frozen_copy()
        if (t + 1) % 5000 == 0 and result.episode_returns:
            log.info("step %d  recent return %.1f", t + 1, np.mean(result.episode_returns[-10:]))
    return result


def _noisy(policy: Policy, s, noise_std: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    a = policy.act(s).astype(np.float64) + rng.normal(0.0, 1.0, size=noise_std.shape) * noise_std
    return np.clip(a, policy.action_low, policy.action_high)


def evaluate_policy(policy: Policy, env: Env, seeds: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free episodes, one per seed. Returns (returns, lengths)."""
    returns, lengths = [], []
    for seed in seeds:
        s = env.reset(int(seed))
        total, done = 0.0, False
        while not done:
            res = env.step(select_action(policy, s))
            total += res.reward
            done = res.done
            s = res.next_state
        returns.append(total)
        lengths.append(env.t)
    return np.asarray(returns), np.asarray(lengths)


def save_policy(policy: Policy, path, extra: dict | None = None):
    meta = {"gamma": policy.gamma, "tau": policy.tau,
            "action_low": policy.action_low.tolist(), "action_high": policy.action_high.tolist()}
    meta.update(extra or {})
    return dn.save_nets(path, {"actor": policy.actor, "critic": policy.critic,
                               "actor_target": policy.actor_target,
                               "critic_target": policy.critic_target}, meta)


def load_policy(path) -> tuple[Policy, dict]:
    nets, meta, _ = dn.load_nets(path)
    pol = Policy(nets["actor"], nets["critic"], nets["actor_target"], nets["critic_target"],
                 np.asarray(meta["action_low"]), np.asarray(meta["action_high"]),
                 meta["gamma"], meta["tau"])
    return pol, meta
