"""Command line pipeline: train -> defend -> eval -> report, driven by one config file.

Exit codes: 0 success, 2 configuration error, 3 missing or stale artifact,
4 a requested ``--check`` failed.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .agent import evaluate_policy, load_policy, save_policy, train_agent
from .backdoor import BufferPoisoner, Trigger, apply_trigger, backdoor_action_error
from .config import ConfigError, ExperimentConfig, dump_config, load_config, preset
from .defender import (Defender, RolloutDataset, calibrate_threshold, collect_rollouts,
                       load_defender, normalization_stats, residuals, save_defender,
                       train_defender)
from .diffnum import CheckpointError
from .envs import make_env
from .harness import (ALL_CONDITIONS, ConfigurationError, EvalReport, compute_losses,
                      evaluate_matrix, prediction_pairs, write_reports)

log = logging.getLogger("rtslab")

EXIT_OK, EXIT_CONFIG, EXIT_ARTIFACT, EXIT_CHECK = 0, 2, 3, 4


class MissingArtifact(RuntimeError):
    pass


class OutputExists(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# layout and bookkeeping


class Layout:
    def __init__(self, root):
        self.root = Path(root)

    def policy(self, which: str) -> Path:
        return self.root / "policies" / f"{which}.npz"

    @property
    def trigger(self) -> Path:
        return self.root / "trigger.json"

    @property
    def audit(self) -> Path:
        return self.root / "audit" / "poison_indices.json"

    @property
    def train_summary(self) -> Path:
        return self.root / "train_summary.json"

    def dataset(self, victim: str) -> Path:
        return self.root / "defenders" / victim / "dataset.npz"

    def defender(self, victim: str, mode: str) -> Path:
        return self.root / "defenders" / victim / f"{mode}.npz"

    def defend_summary(self, victim: str) -> Path:
        return self.root / "defenders" / victim / "summary.json"

    @property
    def csv(self) -> Path:
        return self.root / "eval" / "episodes.csv"

    @property
    def summary(self) -> Path:
        return self.root / "eval" / "summary.json"


def stage_hash(cfg: ExperimentConfig, stage: str) -> str:
    """Hash of the config sections a stage's outputs depend on."""
    d = cfg.to_dict()
    keys = {"train": ["env", "agent", "attack"],
            "defend": ["env", "agent", "attack", "defender"]}[stage]
    blob = json.dumps({k: d[k] for k in keys}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _stamp(cfg: ExperimentConfig) -> dict:
    return {"config_hash": cfg.config_hash(), "version": __version__}


def _guard_outputs(paths, force: bool) -> None:
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise OutputExists("refusing to overwrite existing outputs (use --force): " + ", ".join(existing))


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing {what}: {path}")
    return path


def _check_upstream(meta: dict, expected: str, path: Path, stage: str) -> None:
    got = meta.get(f"{stage}_hash")
    if got != expected:
        raise MissingArtifact(f"{path} was built by a different {stage} config "
                              f"({got} != {expected}); re-run `{stage}` with --force")


def run_env(cfg: ExperimentConfig):
    return make_env(cfg.env.name, **cfg.env.physics)


def _victim_ckpt(victim: str) -> str:
    return {"final": "poisoned_final", "mid": "poisoned_mid"}[victim]


# ---------------------------------------------------------------------------
# stages


def cmd_train(cfg: ExperimentConfig, force: bool = False) -> dict:
    """Train the clean policy, derive the trigger, train the poisoned policy, audit the poisoning."""
    lay = Layout(cfg.output_dir)
    outs = [lay.policy("clean"), lay.policy("poisoned_final"), lay.policy("poisoned_mid"),
            lay.trigger, lay.audit, lay.train_summary]
    _guard_outputs(outs, force)
    env = run_env(cfg)
    a = cfg.agent
    agent_cfg = a.agent_config()
    t0 = time.perf_counter()

    log.info("training clean policy (%d steps)", a.total_steps)
    clean = train_agent(env, a.total_steps, agent_cfg, seed=a.clean_seed)
    clean_seconds = time.perf_counter() - t0
    seen = clean.buffer.states[: len(clean.buffer)]
    tc = cfg.attack.trigger
    if tc.mask is not None:
        trigger = Trigger(tuple(tc.mask), tuple(tc.delta), tc.mode)
    else:
        trigger = Trigger.out_of_distribution(seen, tc.dim, tc.factor)
        if tc.mode == "additive":
            trigger = Trigger(trigger.mask, trigger.delta, "additive")
    if trigger.state_dim != env.spec.state_dim:
        raise ConfigError("attack.trigger", "trigger dims do not match the env state")

    pcfg = cfg.attack.poison_config(env.spec.action_low, env.spec.action_high, env.spec.max_reward)
    log.info("training poisoned policy (%d steps, p=%.3f)", a.total_steps, pcfg.proportion)
    pois = train_agent(env, a.total_steps, agent_cfg, poisoner=BufferPoisoner(trigger, pcfg),
                       seed=a.poisoned_seed, snapshot_steps=[a.mid_step])
    train_seconds = time.perf_counter() - t0

    stamp = {**_stamp(cfg), "train_hash": stage_hash(cfg, "train")}
    save_policy(clean.policy, lay.policy("clean"), {**stamp, "role": "clean", "steps": a.total_steps})
    save_policy(pois.policy, lay.policy("poisoned_final"), {**stamp, "role": "poisoned", "steps": a.total_steps})
    save_policy(pois.snapshots[a.mid_step], lay.policy("poisoned_mid"),
                {**stamp, "role": "poisoned", "steps": a.mid_step})
    _write_json(lay.trigger, {**stamp, "trigger": trigger.to_dict(), "poison": {
        "kind": pcfg.kind, "proportion": pcfg.proportion, "target_action": list(pcfg.target_action),
        "fake_reward": pcfg.fake_reward, "injection_start_step": pcfg.injection_start_step}})
    idx = pois.poison_indices
    expected = int(np.floor(pcfg.proportion * a.total_steps + 1e-9))
    _write_json(lay.audit, {**stamp, "records": a.total_steps, "proportion": pcfg.proportion,
                            "expected_count": expected, "count": int(len(idx)),
                            "flagged_in_buffer": int(pois.buffer.poisoned.sum()),
                            "injection_start_step": pcfg.injection_start_step,
                            "indices": [int(i) for i in idx]})

    # stealth and backdoor-success checks on held-out episodes
    eval_seeds = range(10_000, 10_000 + a.eval_episodes)
    clean_ret, clean_len = evaluate_policy(clean.policy, env, eval_seeds)
    pois_ret, _ = evaluate_policy(pois.policy, env, eval_seeds)
    held = collect_rollouts(pois.policy, env, 2000, noise_prob=0.0, seed=20_000).states
    err = backdoor_action_error(pois.policy, trigger, held, pcfg.target_action) if pcfg.kind == "targeted" else None
    limit = 0.1 * float(np.max(env.spec.action_range))
    checks = {
        "clean_episode_length_ge_90pct_horizon": bool(clean_len.mean() >= 0.9 * env.spec.max_episode_steps),
        "stealth_ratio_ge_0.9": bool(pois_ret.mean() >= 0.9 * clean_ret.mean()),
        "audit_count_matches": bool(len(idx) == expected == int(pois.buffer.poisoned.sum())),
    }
    if err is not None:
        checks["backdoor_error_lt_0.1_range"] = bool(err < limit)
    summary = {**stamp, "train_seconds": train_seconds,
               "clean_train_seconds": clean_seconds,
               "clean_mean_return": float(clean_ret.mean()), "clean_mean_length": float(clean_len.mean()),
               "poisoned_mean_return_clean_env": float(pois_ret.mean()),
               "stealth_ratio": float(pois_ret.mean() / clean_ret.mean()) if clean_ret.mean() else None,
               "backdoor_action_error": err, "backdoor_error_limit": limit,
               "eval_seeds": list(eval_seeds), "checks": checks}
    _write_json(lay.train_summary, summary)
    dump_config(cfg, lay.root / "config.yaml")
    return summary


def load_victim(cfg: ExperimentConfig, victim: str):
    lay = Layout(cfg.output_dir)
    path = _require(lay.policy(_victim_ckpt(victim)), f"{victim} poisoned policy (run `train` first)")
    try:
        pol, meta = load_policy(path)
    except CheckpointError as exc:
        raise MissingArtifact(str(exc)) from None
    _check_upstream(meta, stage_hash(cfg, "train"), path, "train")
    return pol


def load_trigger(cfg: ExperimentConfig) -> Trigger:
    path = _require(Layout(cfg.output_dir).trigger, "trigger (run `train` first)")
    data = json.loads(path.read_text())
    _check_upstream(data, stage_hash(cfg, "train"), path, "train")
    return Trigger.from_dict(data["trigger"])


def cmd_defend(cfg: ExperimentConfig, force: bool = False) -> dict:
    """Collect rollouts per victim, train both objectives on identical data, calibrate H."""
    lay = Layout(cfg.output_dir)
    d = cfg.defender
    victims = cfg.eval.victims
    outs = [p for v in victims for p in (lay.dataset(v), lay.defender(v, "single"),
                                         lay.defender(v, "dual"), lay.defend_summary(v))]
    policies = {v: load_victim(cfg, v) for v in victims}
    trigger = load_trigger(cfg)
    _guard_outputs(outs, force)
    env = run_env(cfg)
    stamp = {**_stamp(cfg), "train_hash": stage_hash(cfg, "train"), "defend_hash": stage_hash(cfg, "defend")}
    result = {}
    for victim, pol in policies.items():
        t0 = time.perf_counter()
        ds = collect_rollouts(pol, env, d.dataset_size, d.noise_prob, d.noise_std, seed=d.rollout_seed)
        ds.save(lay.dataset(victim), meta=stamp)
        train, hold = ds.split(d.holdout_frac, seed=d.seed)
        stats = normalization_stats(train)
        tcfg = d.train_config()
        info = {**stamp, "victim": victim, "dataset_size": len(ds), "dataset_sha256": ds.digest(),
                "train_size": len(train), "holdout_size": len(hold), "quantile": d.quantile,
                "margin": d.margin, "lam": d.lam, "models": {}}
        for mode in ("single", "dual"):
            log.info("training %s-objective defender for %s victim", mode, victim)
            model = train_defender(train, mode, d.lam, pol if mode == "dual" else None, tcfg, stats)
            H = calibrate_threshold(model, hold, d.quantile, d.margin)
            r_clean = residuals(model, hold.prev_states, hold.prev_actions, hold.states)
            r_trig = residuals(model, hold.prev_states, hold.prev_actions, apply_trigger(trigger, hold.states))
            s_loss, a_loss = compute_losses(prediction_pairs(model, hold), pol)
            save_defender(model, lay.defender(victim, mode), H,
                          {**stamp, "victim": victim, "dataset_sha256": ds.digest()})
            info["models"][mode] = {
                "threshold": H, "state_loss": s_loss, "action_loss": a_loss,
                "clean_residual_p999": float(np.quantile(r_clean, 0.999)),
                "clean_residual_max": float(r_clean.max()),
                "trigger_residual_min": float(r_trig.min()),
                "separation": float(r_trig.min() / H) if H > 0 else None,
                "final_train_loss": model.history[-1]["loss"] if model.history else None,
            }
        info["seconds"] = time.perf_counter() - t0
        _write_json(lay.defend_summary(victim), info)
        result[victim] = info
    return result


def _load_defenders(cfg: ExperimentConfig, victim: str, policy) -> dict[str, Defender]:
    lay = Layout(cfg.output_dir)
    out = {}
    for mode in ("single", "dual"):
        path = _require(lay.defender(victim, mode), f"{mode}-objective defender for {victim} (run `defend`)")
        try:
            model, meta = load_defender(path)
        except CheckpointError as exc:
            raise MissingArtifact(str(exc)) from None
        _check_upstream(meta, stage_hash(cfg, "defend"), path, "defend")
        out[mode] = Defender(model, float(meta["threshold"]), cfg.defender.detector,
                             policy if cfg.defender.detector == "action" else None)
    return out


def cmd_eval(cfg: ExperimentConfig, force: bool = False) -> dict:
    lay = Layout(cfg.output_dir)
    env_factory = lambda: run_env(cfg)  # noqa: E731
    trigger = load_trigger(cfg)
    loaded = {}
    for v in cfg.eval.victims:
        pol = load_victim(cfg, v)
        loaded[v] = (pol, _load_defenders(cfg, v, pol))
    _guard_outputs([lay.csv, lay.summary], force)
    report = EvalReport(seeds=list(cfg.eval.seeds), config_hash=cfg.config_hash(), version=__version__)
    for victim, (pol, defs) in loaded.items():
        evaluate_matrix(pol, env_factory, ALL_CONDITIONS, seeds=cfg.eval.seeds,
                        schedules=cfg.eval.attack_schedules(), trigger=trigger, defenders=defs,
                        victim=victim, report=report)
    lay.csv.parent.mkdir(parents=True, exist_ok=True)
    write_reports(report, lay.csv, lay.summary)
    return report.summary()


def headline_checks(summary: dict) -> dict[str, bool]:
    """The ordering clean >= dual >= single >= attacked under every burst-2 schedule."""
    return {key: bool(v["ordering_clean>=dual>=single>=attacked"])
            for key, v in summary.get("headline", {}).items() if "/burst2-" in key}


def cmd_report(cfg: ExperimentConfig) -> dict:
    path = _require(Layout(cfg.output_dir).summary, "evaluation summary (run `eval` first)")
    return json.loads(path.read_text())


def format_summary(summary: dict) -> str:
    lines = [f"config {summary.get('config_hash')}  version {summary.get('version')}  "
             f"episodes/condition {len(summary.get('seeds', []))}"]
    for victim, by_sched in summary.get("groups", {}).items():
        for sched, conds in by_sched.items():
            lines.append(f"\n[{victim}] {sched}")
            ref = conds.get("unprotected-clean", {}).get("mean_return")
            for cond, g in conds.items():
                pct = f"{100 * g['mean_return'] / ref:6.1f}%" if ref else "      "
                det = ""
                if g.get("recall") is not None and cond.endswith("defended"):
                    det = f"  recall {g['recall']:.3f}"
                    if g.get("precision") is not None:
                        det += f" precision {g['precision']:.3f}"
                    det += f" fpr {g['false_positive_rate']:.4f}"
                lines.append(f"  {cond:28s} {g['mean_return']:8.2f} +- {g['std_return']:6.2f} {pct}"
                             f"  fail {g['failure_rate']:.2f}{det}")
    for key, ok in headline_checks(summary).items():
        lines.append(f"\nordering {key}: {'holds' if ok else 'VIOLATED'}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# argument handling


def resolve_config(args) -> ExperimentConfig:
    if args.config and args.preset:
        raise ConfigError("", "give either --config or --preset, not both")
    cfg = load_config(args.config) if args.config else preset(args.preset or "hopperlite-default")
    if args.out:
        cfg.output_dir = args.out
    if getattr(args, "seeds", None):
        try:
            cfg.eval.seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError("eval.seeds", f"cannot parse --seeds {args.seeds!r}") from None
        cfg.validate()
    return cfg


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rtslab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"rtslab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, force=True, check=True):
        sp.add_argument("--config", help="experiment YAML file")
        sp.add_argument("--preset", help="named built-in config (default: hopperlite-default)")
        sp.add_argument("--out", help="override the output directory")
        if force:
            sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if check:
            sp.add_argument("--check", action="store_true", help="exit 4 if the stage's checks fail")
        sp.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("train", help="train clean and poisoned policies"))
    common(sub.add_parser("defend", help="train single- and dual-objective defenders"))
    ev = sub.add_parser("eval", help="evaluate every protection condition")
    common(ev)
    ev.add_argument("--seeds", help="comma-separated evaluation seeds (overrides the config)")
    common(sub.add_parser("report", help="pretty-print the evaluation summary"), force=False)
    common(sub.add_parser("show-config", help="print the resolved config as YAML"), force=False, check=False)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "show-config":
            import yaml
            print(yaml.safe_dump(cfg.to_dict(), sort_keys=False), end="")
            return EXIT_OK
        if args.command == "train":
            out = cmd_train(cfg, args.force)
            print(json.dumps(out["checks"], indent=2))
            failed = not all(out["checks"].values())
        elif args.command == "defend":
            out = cmd_defend(cfg, args.force)
            for victim, info in out.items():
                for mode, m in info["models"].items():
                    print(f"{victim}/{mode}: H={m['threshold']:.4g} state_loss={m['state_loss']:.4g} "
                          f"action_loss={m['action_loss']:.4g} separation={m['separation']:.1f}")
            failed = any(m["separation"] is None or m["separation"] < 5 or m["clean_residual_p999"] > m["threshold"]
                         for info in out.values() for m in info["models"].values())
        elif args.command == "eval":
            out = cmd_eval(cfg, args.force)
            print(format_summary(out))
            failed = not all(headline_checks(out).values())
        else:
            out = cmd_report(cfg)
            print(format_summary(out))
            failed = not all(headline_checks(out).values())
    except (ConfigError, OutputExists) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifact, ConfigurationError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    if getattr(args, "check", False) and failed:
        print("check failed", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
