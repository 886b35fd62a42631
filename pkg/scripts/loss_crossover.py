"""Compare single- and dual-objective held-out losses over several defender training seeds.

Needs a finished `defend` stage; the seed used there is reused, the others are trained here.
"""
import argparse
import json

from rtslab.cli import Layout, load_victim, resolve_config
from rtslab.defender import RolloutDataset, load_defender
from rtslab.harness import loss_crossover


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config")
    ap.add_argument("--preset")
    ap.add_argument("--out")
    ap.add_argument("--victim", default="final")
    ap.add_argument("--train-seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    args = ap.parse_args(argv)
    cfg = resolve_config(args)
    lay = Layout(cfg.output_dir)
    pol = load_victim(cfg, args.victim)
    ds = RolloutDataset.load(lay.dataset(args.victim))
    d = cfg.defender
    reuse = {d.seed: {m: load_defender(lay.defender(args.victim, m))[0] for m in ("single", "dual")}}
    out = loss_crossover(ds, pol, args.train_seeds, d.lam, d.train_config(), split_seed=d.seed, models=reuse)
    print(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
