"""Attack schedules, guarded evaluation episodes, condition matrices and reports."""
from __future__ import annotations

import csv
import enum
import io
import json
import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .agent import Policy, select_action
from .backdoor import Trigger, apply_trigger
from .defender import (Defender, DefenderTrainConfig, DynamicsModel, RolloutDataset,
                       normalization_stats, predict, train_defender)
from .envs import Env


class ConfigurationError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackSchedule:
    """Attack ``burst_length`` consecutive observations every ``period`` steps, from ``start_step`` on."""
    period: int = 20
    burst_length: int = 1
    enabled: bool = True
    start_step: int = 20

    def __post_init__(self):
        if self.enabled and not (self.period >= self.burst_length >= 1):
            raise ValueError("need period >= burst_length >= 1")
        if self.start_step < 1:
            raise ValueError("start_step must be >= 1 so a real previous state exists")

    @property
    def label(self) -> str:
        return f"burst{self.burst_length}-every{self.period}" if self.enabled else "none"

    def is_attacked(self, t: int) -> bool:
        """Whether the observation produced by env step ``t`` (1-based) is triggered."""
        return self.enabled and t >= self.start_step and (t - self.start_step) % self.period < self.burst_length


NO_ATTACK = AttackSchedule(enabled=False)


class ProtectionCondition(str, enum.Enum):
    UNPROTECTED_CLEAN = "unprotected-clean"
    UNPROTECTED_ATTACKED = "unprotected-attacked"
    SINGLE_DEFENDED = "single-objective-defended"
    DUAL_DEFENDED = "dual-objective-defended"

    @property
    def defender_mode(self) -> str | None:
        return {"single-objective-defended": "single", "dual-objective-defended": "dual"}.get(self.value)

    @property
    def attacked(self) -> bool:
        return self is not ProtectionCondition.UNPROTECTED_CLEAN


ALL_CONDITIONS = tuple(ProtectionCondition)


@dataclass
class EpisodeRecord:
    seed: int
    episode_return: float
    length: int
    failed: bool
    attacked: np.ndarray
    flagged: np.ndarray
    residual: np.ndarray
    state_loss: np.ndarray
    action_loss: np.ndarray
    condition: str = ""
    schedule: str = ""
    victim: str = ""

    @property
    def detection_counts(self) -> dict[str, int]:
        a, f = self.attacked, self.flagged
        return {"tp": int(np.sum(a & f)), "fp": int(np.sum(~a & f)),
                "fn": int(np.sum(a & ~f)), "tn": int(np.sum(~a & ~f))}


def run_episode(policy: Policy, env: Env, schedule: AttackSchedule = NO_ATTACK,
                trigger: Trigger | None = None, defender: Defender | None = None,
                seed: int = 0) -> EpisodeRecord:
    """One noise-free episode. Per observation, records ground truth versus what the agent acted on."""
    if schedule.enabled and trigger is None:
        raise ConfigurationError("an enabled attack schedule needs a trigger")
    s = env.reset(int(seed))
    s_agent = s
    a = select_action(policy, s_agent)
    total = 0.0
    attacked, flagged, resid, s_loss, a_loss = [], [], [], [], []
    failed = False
    while True:
        res = env.step(a)
        total += res.reward
        if res.done:
            failed = res.done_reason == "failure"
            break
        truth = res.next_state
        hit = schedule.is_attacked(env.t)
        incoming = apply_trigger(trigger, truth) if hit else truth
        if defender is not None:
            g = defender.guard(s_agent, a, incoming)
            s_agent, flag, r = g.state, g.flagged, g.residual
        else:
            s_agent, flag, r = incoming, False, np.nan
        a = select_action(policy, s_agent)
        attacked.append(hit)
        flagged.append(flag)
        resid.append(r)
        s_loss.append(float(np.linalg.norm(np.asarray(truth) - np.asarray(s_agent, dtype=np.float64))))
        a_loss.append(float(np.linalg.norm(select_action(policy, truth) - a)))
    return EpisodeRecord(int(seed), float(total), env.t, failed, np.asarray(attacked, dtype=bool),
                         np.asarray(flagged, dtype=bool), np.asarray(resid, dtype=float),
                         np.asarray(s_loss), np.asarray(a_loss))


# ---------------------------------------------------------------------------


CSV_COLUMNS = ("victim", "condition", "schedule", "seed", "return", "length", "failed",
               "attacked_steps", "flagged_steps", "tp", "fp", "fn", "tn",
               "mean_action_loss_attacked", "mean_state_loss_attacked", "max_residual",
               "config_hash", "version")


@dataclass
class EvalReport:
    records: list[EpisodeRecord] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)
    config_hash: str = ""
    version: str = ""

    def groups(self) -> dict[tuple[str, str, str], list[EpisodeRecord]]:
        out: dict[tuple[str, str, str], list[EpisodeRecord]] = {}
        for r in self.records:
            out.setdefault((r.victim, r.schedule, r.condition), []).append(r)
        return out

    def returns(self, condition, schedule: str | None = None, victim: str | None = None) -> np.ndarray:
        cond = ProtectionCondition(condition).value
        return np.array([r.episode_return for r in self.records
                         if r.condition == cond and (schedule is None or r.schedule == schedule)
                         and (victim is None or r.victim == victim)])

    def summary(self) -> dict:
        groups = {}
        for (victim, sched, cond), recs in sorted(self.groups().items()):
            rets = np.array([r.episode_return for r in recs])
            det = detection_stats(recs)
            att = np.concatenate([r.action_loss[r.attacked] for r in recs]) if recs else np.zeros(0)
            groups.setdefault(victim, {}).setdefault(sched, {})[cond] = {
                "episodes": len(recs),
                "mean_return": float(rets.mean()),
                "std_return": float(rets.std(ddof=1)) if len(rets) > 1 else 0.0,
                "mean_length": float(np.mean([r.length for r in recs])),
                "failure_rate": float(np.mean([r.failed for r in recs])),
                "mean_action_loss_attacked": float(att.mean()) if att.size else None,
                **det,
            }
        return {"config_hash": self.config_hash, "version": self.version, "seeds": list(self.seeds),
                "groups": groups, "headline": headline(groups)}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.records:
            d = r.detection_counts
            att = r.attacked
            w.writerow([r.victim, r.condition, r.schedule, r.seed, repr(r.episode_return), r.length,
                        int(r.failed), int(att.sum()), int(r.flagged.sum()), d["tp"], d["fp"], d["fn"], d["tn"],
                        _fmt(r.action_loss[att].mean()) if att.any() else "",
                        _fmt(r.state_loss[att].mean()) if att.any() else "",
                        _fmt(np.nanmax(r.residual)) if np.isfinite(r.residual).any() else "",
                        self.config_hash, self.version])
        return buf.getvalue()


def _fmt(x: float) -> str:
    return repr(float(x))


def detection_stats(records: Iterable[EpisodeRecord]) -> dict:
    tp = fp = fn = tn = 0
    for r in records:
        d = r.detection_counts
        tp, fp, fn, tn = tp + d["tp"], fp + d["fp"], fn + d["fn"], tn + d["tn"]
    return {"tp": tp, "fp": fp, "fn": fn, "tn": tn,
            "precision": tp / (tp + fp) if tp + fp else None,
            "recall": tp / (tp + fn) if tp + fn else None,
            "false_positive_rate": fp / (fp + tn) if fp + tn else None}


def headline(groups: dict) -> dict:
    """Return ratios against the clean run, per victim and schedule, plus the expected ordering check."""
    out = {}
    for victim, by_sched in groups.items():
        for sched, conds in by_sched.items():
            clean = conds.get(ProtectionCondition.UNPROTECTED_CLEAN.value)
            if not clean or sched == "none":
                continue
            ref = clean["mean_return"]
            ratios = {c: v["mean_return"] / ref if ref else None for c, v in conds.items()}
            order = [ProtectionCondition.UNPROTECTED_CLEAN.value, ProtectionCondition.DUAL_DEFENDED.value,
                     ProtectionCondition.SINGLE_DEFENDED.value, ProtectionCondition.UNPROTECTED_ATTACKED.value]
            means = [conds[c]["mean_return"] for c in order if c in conds]
            out[f"{victim}/{sched}"] = {
                "return_ratio_to_clean": ratios,
                "ordering_clean>=dual>=single>=attacked": bool(len(means) == 4 and all(
                    a >= b for a, b in zip(means, means[1:]))),
            }
    return out


def evaluate_matrix(policy: Policy, env_factory: Callable[[], Env], conditions: Sequence = ALL_CONDITIONS,
                    n_episodes: int = 20, seeds: Sequence[int] | None = None,
                    schedules: Sequence[AttackSchedule] = (AttackSchedule(),),
                    trigger: Trigger | None = None, defenders: dict[str, Defender] | None = None,
                    victim: str = "final", report: EvalReport | None = None) -> EvalReport:
    """Evaluate every (schedule, condition) on the same seed list for paired comparison."""
    seeds = list(range(n_episodes)) if seeds is None else list(seeds)
    defenders = defenders or {}
    conditions = [ProtectionCondition(c) for c in conditions]
    for c in conditions:
        if c.defender_mode and c.defender_mode not in defenders:
            raise ConfigurationError(f"condition {c.value} needs the {c.defender_mode}-objective defender")
        if c.attacked and trigger is None:
            raise ConfigurationError(f"condition {c.value} needs a trigger")
    report = report or EvalReport(seeds=seeds)
    env = env_factory()
    for sched in schedules:
        for c in conditions:
            active = sched if c.attacked else NO_ATTACK
            d = defenders.get(c.defender_mode) if c.defender_mode else None
            for seed in seeds:
                rec = run_episode(policy, env, active, trigger, d, seed)
                rec.condition, rec.schedule, rec.victim = c.value, sched.label, victim
                report.records.append(rec)
    return report


@dataclass
class PredictionPairs:
    true_states: np.ndarray
    predicted_states: np.ndarray


def prediction_pairs(model: DynamicsModel, dataset: RolloutDataset) -> PredictionPairs:
    """Length-1 prediction task: real s_t against T(s_{t-1}, a_{t-1})."""
    return PredictionPairs(dataset.states, predict(model, dataset.prev_states, dataset.prev_actions))


def compute_losses(pairs: PredictionPairs, policy: Policy) -> tuple[float, float]:
    """(mean ||s' - s^p||, mean ||pi(s') - pi(s^p)||)."""
    if len(pairs.true_states) == 0:
        raise ValueError("no prediction pairs to score")
    s_true = np.asarray(pairs.true_states, dtype=np.float64)
    s_pred = np.asarray(pairs.predicted_states, dtype=np.float64)
    state_loss = float(np.mean(np.linalg.norm(s_true - s_pred, axis=-1)))
    action_loss = float(np.mean(np.linalg.norm(policy.act(s_true) - policy.act(s_pred), axis=-1)))
    return state_loss, action_loss


def loss_crossover(dataset: RolloutDataset, policy: Policy, seeds: Sequence[int], lam: float = 1.0,
                   config: DefenderTrainConfig | None = None, split_seed: int = 0,
                   models: dict[int, dict[str, DynamicsModel]] | None = None) -> dict:
    """Train both objectives per seed on one fixed split and compare held-out losses.

    ``models`` may supply already-trained pairs keyed by seed; they must have
    been fitted on the same split.
    """
    config = config or DefenderTrainConfig()
    train, hold = dataset.split(config.holdout_frac, seed=split_seed)
    stats = normalization_stats(train)
    rows = []
    for seed in seeds:
        pair = (models or {}).get(seed)
        if pair is None:
            cfg = dataclasses.replace(config, seed=seed)
            pair = {"single": train_defender(train, "single", lam, None, cfg, stats),
                    "dual": train_defender(train, "dual", lam, policy, cfg, stats)}
        row = {"seed": int(seed)}
        for mode, model in pair.items():
            row[f"{mode}_state_loss"], row[f"{mode}_action_loss"] = compute_losses(
                prediction_pairs(model, hold), policy)
        rows.append(row)
    means = {k: float(np.mean([r[k] for r in rows])) for k in rows[0] if k != "seed"}
    return {"per_seed": rows, "mean": means,
            "dual_action_lt_single": means["dual_action_loss"] < means["single_action_loss"],
            "single_state_le_dual": means["single_state_loss"] <= means["dual_state_loss"]}


def write_reports(report: EvalReport, csv_path, json_path) -> None:
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        fh.write(report.to_csv())
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report.summary(), fh, indent=2, sort_keys=True)
        fh.write("\n")
