"""Run train, defend, eval and report for one config in sequence."""
import argparse
import sys

from rtslab.cli import main


def run(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    src = ap.add_mutually_exclusive_group()
    src.add_argument("--config")
    src.add_argument("--preset", default=None)
    ap.add_argument("--out")
    ap.add_argument("--force", action="store_true")
    args = ap.parse_args(argv)
    common = ["--config", args.config] if args.config else ["--preset", args.preset or "hopperlite-default"]
    if args.out:
        common += ["--out", args.out]
    for stage in ("train", "defend", "eval"):
        code = main([stage, *common, *(["--force"] if args.force else [])])
        if code:
            return code
    return main(["report", *common])


if __name__ == "__main__":
    sys.exit(run())
