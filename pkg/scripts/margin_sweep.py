"""Clean-run return of the guarded victim as the threshold margin grows.

H scales linearly with the margin, so the trained defenders are reused.
"""
import argparse

import numpy as np

from rtslab.agent import evaluate_policy
from rtslab.cli import Layout, load_victim, resolve_config, run_env
from rtslab.defender import Defender, load_defender
from rtslab.harness import NO_ATTACK, run_episode


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config")
    ap.add_argument("--preset")
    ap.add_argument("--out")
    ap.add_argument("--victim", default="final")
    ap.add_argument("--margins", type=float, nargs="+", default=[1.0, 1.5, 2.0, 3.0])
    ap.add_argument("--seed-range", type=int, nargs=2, default=[5000, 5100], metavar=("START", "STOP"))
    args = ap.parse_args(argv)
    cfg = resolve_config(args)
    lay = Layout(cfg.output_dir)
    env = run_env(cfg)
    pol = load_victim(cfg, args.victim)
    seeds = range(*args.seed_range)
    base = evaluate_policy(pol, env, seeds)[0].mean()
    print(f"unguarded clean return {base:.2f} over {len(seeds)} seeds")
    for mode in ("single", "dual"):
        model, meta = load_defender(lay.defender(args.victim, mode))
        H0 = float(meta["threshold"]) / cfg.defender.margin
        for m in args.margins:
            d = Defender(model, H0 * m)
            recs = [run_episode(pol, env, NO_ATTACK, None, d, s) for s in seeds]
            ret = np.mean([r.episode_return for r in recs])
            fp = np.mean([r.flagged.any() for r in recs])
            print(f"{mode:6s} margin {m:4.1f}  H {H0 * m:.4f}  return {ret:7.2f}  "
                  f"cost {1 - ret / base:6.2%}  episodes with a flag {fp:.0%}")


if __name__ == "__main__":
    main()
