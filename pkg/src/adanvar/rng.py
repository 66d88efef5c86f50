"""Seeded random streams.

Every stochastic draw in the package goes through :func:`stream`, which builds a
``numpy.random.Generator`` on the counter-based Philox-4x64 bit generator.
Gaussian draws use numpy's ziggurat sampler (``Generator.standard_normal``).
Both algorithms are fixed by numpy's stream-compatibility policy, so a given
``(seed, purpose)`` pair produces the same numbers on every platform.
"""

from __future__ import annotations

import zlib

import numpy as np

# purpose tags keep the init, dropout and noise streams of one seed independent
INIT = "init"
DROPOUT = "dropout"
NOISE = "noise"


def _tag(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed: int, purpose: str = "") -> np.random.Generator:
    """Return a fresh generator for ``seed`` and a named purpose."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    ss = np.random.SeedSequence([int(seed), _tag(purpose)])
    return np.random.Generator(np.random.Philox(ss))
