"""Multi-seed adaptive vs standard NVAR comparison over all noise levels.

Extra arguments are passed to ``adanvar suite``, for example

    python scripts/run_suite.py --n-seeds 5 --noise-levels 0.1 0.15 --out runs/suite5

The full default protocol (25 seeds, four noise levels) takes on the order of a day
per CPU core; ``--jobs`` spreads jobs over processes and ``--resume`` continues an
interrupted run.
"""

import sys
from pathlib import Path

from adanvar.cli import main, run_dir
from adanvar.evaluation import format_table, read_aggregate_csv


def run(command: str, argv: list[str]) -> int:
    out = run_dir(command, argv)
    code = main([command, *argv, "--out", str(out)])
    if code == 0:
        print(f"\n{out}\n")
        print(format_table(read_aggregate_csv(Path(out) / "aggregate.csv")))
    return code


if __name__ == "__main__":
    sys.exit(run("suite", sys.argv[1:]))
