"""Dynamics-model defender: rollout collection, single/dual-objective training,
residual detection, threshold calibration and the state-recovery guard."""
from __future__ import annotations

import hashlib
import json
import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import diffnum as dn
from .agent import Policy, select_action
from .diffnum import GradTape, Mlp, Tensor
from .envs import Env

log = logging.getLogger(__name__)

DATASET_VERSION = 1
DEFENDER_HIDDEN = (256, 256)


class ContractError(ValueError):
    pass


# ---------------------------------------------------------------------------
# rollout data


@dataclass
class RolloutDataset:
    """Tuples (s_{t-1}, a_{t-1}, s_t, a_t) with a_t the policy's noiseless action on s_t."""
    prev_states: np.ndarray
    prev_actions: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    episode: np.ndarray
    noised: np.ndarray

    def __len__(self) -> int:
        return len(self.states)

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.prev_actions.shape[1]

    def subset(self, idx) -> "RolloutDataset":
        return RolloutDataset(self.prev_states[idx], self.prev_actions[idx], self.states[idx],
                              self.actions[idx], self.episode[idx], self.noised[idx])

    def split(self, holdout_frac: float, seed: int = 0) -> tuple["RolloutDataset", "RolloutDataset"]:
        perm = np.random.default_rng(seed).permutation(len(self))
        n_hold = int(round(holdout_frac * len(self)))
        return self.subset(np.sort(perm[n_hold:])), self.subset(np.sort(perm[:n_hold]))

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.prev_states, self.prev_actions, self.states, self.actions, self.episode):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def save(self, path, meta: dict | None = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        blob = np.frombuffer(json.dumps(meta or {}, sort_keys=True).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, format_version=np.int64(DATASET_VERSION), __meta__=blob,
                     state_dim=np.int64(self.state_dim), action_dim=np.int64(self.action_dim),
                     prev_states=self.prev_states, prev_actions=self.prev_actions,
                     states=self.states, actions=self.actions, episode=self.episode, noised=self.noised)
        return path

    @classmethod
    def load(cls, path) -> "RolloutDataset":
        try:
            with np.load(path, allow_pickle=False) as z:
                version = int(z["format_version"])
                if version != DATASET_VERSION:
                    raise dn.CheckpointError(f"{path}: dataset format_version {version}, expected {DATASET_VERSION}")
                ds = cls(z["prev_states"], z["prev_actions"], z["states"], z["actions"], z["episode"], z["noised"])
                if ds.state_dim != int(z["state_dim"]) or ds.action_dim != int(z["action_dim"]):
                    raise dn.CheckpointError(f"{path}: recorded dims disagree with arrays")
        except (KeyError, ValueError, OSError, EOFError, zipfile.BadZipFile) as exc:
            raise dn.CheckpointError(f"{path}: unreadable dataset ({exc})") from exc
        return ds


def collect_rollouts(policy: Policy, env: Env, n_transitions: int, noise_prob: float = 0.01,
                     noise_std: float | None = None, seed: int = 0) -> RolloutDataset:
    """Run the policy in the clean env; with prob ``noise_prob`` an executed action gets Gaussian noise.

    ``noise_std`` defaults to a tenth of the action range.
    """
    if n_transitions < 1:
        raise ContractError("n_transitions must be >= 1")
    spec = env.spec
    if noise_std is None:
        noise_std = 0.1 * float(np.max(spec.action_range))
    rng = np.random.default_rng(seed)
    S, A = spec.state_dim, spec.action_dim
    prev_s = np.zeros((n_transitions, S))
    prev_a = np.zeros((n_transitions, A))
    nxt = np.zeros((n_transitions, S))
    act = np.zeros((n_transitions, A))
    episode = np.zeros(n_transitions, dtype=np.int64)
    noised = np.zeros(n_transitions, dtype=bool)
    ep = 0
    s = env.reset(int(rng.integers(2 ** 31)))
    a_clean = select_action(policy, s)
    for i in range(n_transitions):
        a = a_clean
        if rng.random() < noise_prob:
            a = select_action(policy, s, noise_std, rng)
            noised[i] = True
        res = env.step(a)
        a_next = select_action(policy, res.next_state)
        prev_s[i], prev_a[i], nxt[i], act[i], episode[i] = s, env.clip_action(a), res.next_state, a_next, ep
        s, a_clean = res.next_state, a_next
        if res.done:
            ep += 1
            s = env.reset(int(rng.integers(2 ** 31)))
            a_clean = select_action(policy, s)
    return RolloutDataset(prev_s, prev_a, nxt, act, episode, noised)


# ---------------------------------------------------------------------------
# model


@dataclass
class DynamicsModel:
    net: Mlp
    mode: str  # "single" | "dual"
    lam: float
    state_mean: np.ndarray
    state_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray
    history: list[dict] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.mode not in ("single", "dual"):
            raise ValueError(f"unknown defender mode {self.mode!r}")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        for name in ("state_mean", "state_std", "action_mean", "action_std"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float32))
        S, A = len(self.state_mean), len(self.action_mean)
        if list(self.net.layer_dims) != [S + A, *DEFENDER_HIDDEN, S]:
            raise ValueError(f"defender net must be [S+A, 256, 256, S], got {self.net.layer_dims}")

    @property
    def state_dim(self) -> int:
        return len(self.state_mean)

    def normalize_inputs(self, s, a) -> np.ndarray:
        s = (np.asarray(s, np.float32) - self.state_mean) / self.state_std
        a = (np.asarray(a, np.float32) - self.action_mean) / self.action_std
        return np.concatenate([s, a], axis=-1)

    def forward_taped(self, s, a, tape: GradTape | None) -> Tensor:
        """Prediction in raw state units as a (possibly recorded) tensor."""
        out = dn.mlp_forward(self.net, self.normalize_inputs(s, a), tape)
        return dn.add(dn.mul(out, self.state_std), self.state_mean)


def normalization_stats(dataset: RolloutDataset) -> dict[str, np.ndarray]:
    def std(x):
        return np.maximum(x.std(axis=0), 1e-6)
    return {"state_mean": dataset.prev_states.mean(axis=0), "state_std": std(dataset.prev_states),
            "action_mean": dataset.prev_actions.mean(axis=0), "action_std": std(dataset.prev_actions)}


@dataclass
class DefenderTrainConfig:
    epochs: int = 100
    batch_size: int = 256
    lr: float = 1e-3
    holdout_frac: float = 0.1
    seed: int = 0
    # "raw" scores state error in env units; "standardized" divides by the dataset std first
    state_units: str = "raw"

    def __post_init__(self):
        if self.state_units not in ("raw", "standardized"):
            raise ValueError(f"unknown state_units {self.state_units!r}")


def train_defender(dataset: RolloutDataset, mode: str = "dual", lam: float = 1.0,
                   frozen_policy: Policy | None = None, config: DefenderTrainConfig | None = None,
                   stats: dict[str, np.ndarray] | None = None) -> DynamicsModel:
    """Fit T(s_{t-1}, a_{t-1}) -> s_t.

    The state term is the per-sample L2 error, in raw state units unless the
    config asks for standardised ones. In
    dual mode the loss adds ``lam`` times the L2 distance between a_t and the
    frozen policy's action on the prediction; gradients pass through the policy
    but only the model's parameters are updated.
    """
    if len(dataset) == 0:
        raise ContractError("empty dataset")
    if mode == "dual" and frozen_policy is None:
        raise ContractError("dual-objective training needs the frozen policy")
    config = config or DefenderTrainConfig()
    stats = stats or normalization_stats(dataset)
    rng = np.random.default_rng(config.seed)
    S, A = dataset.state_dim, dataset.action_dim
    net = Mlp.init([S + A, *DEFENDER_HIDDEN, S], rng, "tanh", "linear")
    model = DynamicsModel(net, mode, lam, **stats)
    opt = dn.Adam(net.params, lr=config.lr)
    if config.state_units == "standardized":
        inv_std = (1.0 / model.state_std).astype(np.float32)
    else:
        inv_std = np.ones(S, dtype=np.float32)

    n = len(dataset)
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        totals = np.zeros(3)
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            tape = GradTape()
            pred = model.forward_taped(dataset.prev_states[idx], dataset.prev_actions[idx], tape)
            err = dn.mul(dn.sub(pred, dataset.states[idx].astype(np.float32)), inv_std)
            state_loss = dn.mean(dn.row_norm(err))
            loss = state_loss
            action_val = 0.0
            if mode == "dual":
                a_pred = frozen_policy.act_taped(pred)
                action_loss = dn.mean(dn.row_norm(dn.sub(a_pred, dataset.actions[idx].astype(np.float32))))
                loss = dn.add(state_loss, dn.scale(action_loss, lam))
                action_val = action_loss.item()
            grads = tape.gradient(loss, net.params)
            opt.step(grads)
            totals += np.array([loss.item(), state_loss.item(), action_val]) * len(idx)
        totals /= n
        model.history.append({"epoch": epoch, "loss": totals[0], "state": totals[1], "action": totals[2]})
        if (epoch + 1) % 10 == 0:
            log.info("%s defender epoch %d loss %.4f", mode, epoch + 1, totals[0])
    return model


def predict(model: DynamicsModel, s, a) -> np.ndarray:
    """Next-state prediction in raw state units (float64 copy of the float32 output)."""
    s = np.asarray(s)
    if s.shape[-1] != model.state_dim:
        raise dn.DimensionError(f"state has {s.shape[-1]} dims, model expects {model.state_dim}")
    out = dn.mlp_forward(model.net, model.normalize_inputs(s, a)).data
    return (out * model.state_std + model.state_mean).astype(np.float64)


def residuals(model: DynamicsModel, prev_states, prev_actions, states) -> np.ndarray:
    return np.linalg.norm(predict(model, prev_states, prev_actions) - np.asarray(states), axis=-1)


def detect(model: DynamicsModel, s_prev, a_prev, s_incoming, H: float) -> tuple[bool, float]:
    """Flag iff ||T(s_prev, a_prev) - s_incoming||_2 > H (raw state units)."""
    r = float(np.linalg.norm(predict(model, s_prev, a_prev) - np.asarray(s_incoming, dtype=np.float64)))
    return r > H, r


def detect_by_action(model: DynamicsModel, policy: Policy, s_prev, a_prev, s_incoming,
                     h: float) -> tuple[bool, float]:
    """Alternative detector: distance between the policy's actions on prediction and incoming state."""
    sp = predict(model, s_prev, a_prev)
    r = float(np.linalg.norm(policy.act(sp) - policy.act(s_incoming)))
    return r > h, r


def calibrate_threshold(model: DynamicsModel, clean_dataset: RolloutDataset, quantile: float = 0.999,
                        margin: float = 1.0) -> float:
    """H = margin * (quantile of clean one-step residuals); quantile 1.0 gives the max."""
    if not 0.0 < quantile <= 1.0:
        raise ValueError("quantile must lie in (0, 1]")
    if margin <= 0:
        raise ValueError("margin must be positive")
    if len(clean_dataset) < 1000:
        log.warning("calibrating on only %d residuals", len(clean_dataset))
    r = residuals(model, clean_dataset.prev_states, clean_dataset.prev_actions, clean_dataset.states)
    return float(margin * np.quantile(r, quantile))


class GuardResult(NamedTuple):
    state: np.ndarray
    flagged: bool
    residual: float
    prediction: np.ndarray


def guard_step(model: DynamicsModel, H: float, s_prev_chosen, a_prev, s_incoming,
               policy: Policy | None = None, detector: str = "state") -> GuardResult:
    """Pass ``s_incoming`` through unless it disagrees with the model, else substitute the prediction.

    ``s_prev_chosen`` must be the state the agent acted on last step (real or
    recovered), so consecutive recoveries chain model predictions.
    """
    sp = predict(model, s_prev_chosen, a_prev)
    s_in = np.asarray(s_incoming)
    if detector == "action":
        if policy is None:
            raise ContractError("the action detector needs the policy")
        r = float(np.linalg.norm(policy.act(sp) - policy.act(s_in)))
    else:
        r = float(np.linalg.norm(sp - s_in.astype(np.float64)))
    if r > H:
        return GuardResult(sp, True, r, sp)
    return GuardResult(s_incoming, False, r, sp)


@dataclass
class Defender:
    """A trained model paired with its threshold, as deployed in the guard loop."""
    model: DynamicsModel
    threshold: float
    detector: str = "state"
    policy: Policy | None = None

    def guard(self, s_prev_chosen, a_prev, s_incoming) -> GuardResult:
        return guard_step(self.model, self.threshold, s_prev_chosen, a_prev, s_incoming,
                          self.policy, self.detector)


def save_defender(model: DynamicsModel, path, threshold: float | None = None, extra: dict | None = None):
    meta = {"kind": "dynamics-model", "mode": model.mode, "lambda": model.lam,
            "threshold": threshold}
    meta.update(extra or {})
    arrays = {k: getattr(model, k) for k in ("state_mean", "state_std", "action_mean", "action_std")}
    return dn.save_nets(path, {"net": model.net}, meta, arrays)


def load_defender(path) -> tuple[DynamicsModel, dict]:
    nets, meta, arrays = dn.load_nets(path)
    if meta.get("kind") != "dynamics-model":
        raise dn.CheckpointError(f"{path}: not a defender checkpoint")
    model = DynamicsModel(nets["net"], meta["mode"], meta["lambda"], arrays["state_mean"],
                          arrays["state_std"], arrays["action_mean"], arrays["action_std"])
    return model, meta
