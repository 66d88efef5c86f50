"""Standard NVAR (k, gamma) grid search at each noise level.

Prints the best setting per level next to the configured suite defaults.

    python scripts/run_gridsearch.py [--noise-levels 0 0.05 0.1 0.15] [adanvar gridsearch options]
"""

import argparse
import sys

from adanvar.cli import main, run_dir
from adanvar.evaluation import NOISE_LEVELS, StandardConfig


def best(path):
    with open(path) as fh:
        next(fh)
        rows = [line.strip().split(",") for line in fh]
    k, gamma, val = min(rows, key=lambda r: float(r[2]))
    return int(k), float(gamma), float(val)


def main_(argv):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--noise-levels", type=float, nargs="+", default=list(NOISE_LEVELS))
    args, rest = ap.parse_known_args(argv)
    defaults = StandardConfig()
    print(f"{'noise':>5} {'k':>3} {'gamma':>10} {'val_rmse':>9}   default (k, gamma)")
    for noise in args.noise_levels:
        cmd = ["--noise", str(noise), "-q", *rest]
        out = run_dir("gridsearch", cmd)
        code = main(["gridsearch", *cmd, "--out", str(out)])
        if code:
            return code
        k, gamma, val = best(out / "gridsearch.csv")
        print(f"{noise:>5.2f} {k:>3} {gamma:>10.3g} {val:>9.4f}   {defaults.lookup(noise)}")
    return 0


if __name__ == "__main__":
    sys.exit(main_(sys.argv[1:]))
