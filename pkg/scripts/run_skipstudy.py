"""Skip-connection study: both models on observations taken every s-th step.

    python scripts/run_skipstudy.py --n-seeds 5 --s-values 2 4 --noise 0.1
"""

import sys

from run_suite import run

if __name__ == "__main__":
    sys.exit(run("skipstudy", sys.argv[1:]))
