"""Standard NVAR: quadratic monomial features, closed-form ridge readout.

The readout predicts increments ``X_{i+1} - X_i`` and forecasts are produced
closed-loop, ``X_{i+1} = X_i + W_out H_total(i)``, with each prediction pushed
into the delay buffer.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.linalg

from .dynamics import TimeSeries
from .features import EmbeddingSpec, embed_array, quadratic_monomials
from .linalg import ridge_solve
from .neural import load_arrays, save_arrays

DIVERGENCE_LIMIT = 1e6


class DivergenceError(RuntimeError):
    """A closed-loop forecast left the plausible state range."""

    def __init__(self, step: int, value: float, partial: np.ndarray):
        super().__init__(f"forecast diverged at step {step} (|x| = {value:.3g} > {DIVERGENCE_LIMIT:g})")
        self.step = step
        self.value = value
        self.partial = partial


def _as_array(series) -> np.ndarray:
    if isinstance(series, TimeSeries):
        return series.data
    arr = np.asarray(series, dtype=np.float64)
    return arr[:, None] if arr.ndim == 1 else arr


def increment_targets(data: np.ndarray, spec: EmbeddingSpec) -> tuple[np.ndarray, np.ndarray]:
    """Delay-embedded rows ``i0..T-2`` and their targets ``X_{i+1} - X_i``."""
    lin = embed_array(data, spec)[:-1]
    Y = np.diff(data, axis=0)[spec.first_index:]
    return lin, Y


def rollout(increment: Callable[[np.ndarray], np.ndarray], window, spec: EmbeddingSpec,
            horizon: int, limit: float = DIVERGENCE_LIMIT) -> np.ndarray:
    """Iterate ``x <- x + increment(H_lin)`` for ``horizon`` steps.

    ``window`` holds the last ``(k-1)s + 1`` observed states, oldest first.
    Returns the (horizon, d) array of predicted states.
    """
    buf = _as_array(window)
    if buf.shape[0] != spec.window or buf.shape[1] != spec.d:
        raise ValueError(
            f"warm-up window must be ({spec.window}, {spec.d}) for k={spec.k}, s={spec.s}; got {buf.shape}"
        )
    n = spec.window
    hist = np.empty((n + horizon, spec.d))
    hist[:n] = buf
    taps = np.arange(0, spec.k) * spec.s
    for step in range(horizon):
        i = n - 1 + step
        h_lin = hist[i - taps].reshape(-1)
        hist[i + 1] = hist[i] + increment(h_lin)
        peak = float(np.max(np.abs(hist[i + 1])))
        if not peak <= limit:
            raise DivergenceError(step + 1, peak, hist[n:i + 2].copy())
    return hist[n:]


@dataclass(frozen=True)
class StandardNvarModel:
    spec: EmbeddingSpec
    gamma: float
    W_out: np.ndarray
    bias: float = 1.0

    def __post_init__(self):
        want = (self.spec.d, 1 + self.spec.linear_dim + self.spec.monomial_dim)
        if self.W_out.shape != want:
            raise ValueError(f"W_out has shape {self.W_out.shape}, expected {want}")

    def features(self, lin: np.ndarray) -> np.ndarray:
        lin = np.atleast_2d(lin)
        return np.concatenate([np.full((lin.shape[0], 1), self.bias), lin, quadratic_monomials(lin)], axis=1)

    def increment(self, h_lin: np.ndarray) -> np.ndarray:
        W = self.W_out
        n = self.spec.linear_dim
        return W[:, 0] * self.bias + W[:, 1:n + 1] @ h_lin + W[:, n + 1:] @ quadratic_monomials(h_lin)

    def predict_increments(self, data) -> np.ndarray:
        """One-step increments for every embeddable row of ``data``."""
        lin = embed_array(_as_array(data), self.spec)
        return self.features(lin) @ self.W_out.T

    def save(self, stem: str | Path) -> None:
        meta = {"kind": "standard_nvar", "k": self.spec.k, "s": self.spec.s, "d": self.spec.d,
                "gamma": self.gamma, "bias": self.bias}
        save_arrays(stem, {"W_out": self.W_out}, meta)

    @classmethod
    def load(cls, stem: str | Path) -> "StandardNvarModel":
        arrays, meta = load_arrays(stem)
        if meta.get("kind") != "standard_nvar":
            raise ValueError(f"{stem} is not a standard NVAR checkpoint (kind={meta.get('kind')!r})")
        spec = EmbeddingSpec(meta["k"], meta["s"], meta["d"])
        return cls(spec, float(meta["gamma"]), arrays["W_out"], float(meta["bias"]))


def fit_standard(train, spec: EmbeddingSpec, gamma: float, bias: float = 1.0) -> StandardNvarModel:
    data = _as_array(train)
    if data.shape[0] < spec.window + 1:
        raise ValueError(f"training series needs at least {spec.window + 1} samples, got {data.shape[0]}")
    lin, Y = increment_targets(data, spec)
    H = np.concatenate([np.full((lin.shape[0], 1), bias), lin, quadratic_monomials(lin)], axis=1)
    W = ridge_solve(H.T, Y.T, gamma)
    return StandardNvarModel(spec, float(gamma), W, bias)


def forecast(model, warmup_window, horizon: int, dt: float | None = None, t0: float = 0.0) -> TimeSeries | np.ndarray:
    """Closed-loop forecast of ``horizon`` steps after the warm-up window.

    Works for any model exposing ``spec`` and ``increment(h_lin)``. Returns a
    :class:`TimeSeries` when ``warmup_window`` is one (times continue after
    the window), otherwise a bare (horizon, d) array.
    """
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    pred = rollout(model.increment, warmup_window, model.spec, horizon)
    if isinstance(warmup_window, TimeSeries):
        w = warmup_window
        return TimeSeries(pred.reshape(horizon, -1), w.dt, w.t0 + len(w) * w.dt) if horizon else pred
    return pred


# --- grid search -------------------------------------------------------------


def default_gamma_grid(n: int = 40, lo: float = 1e-9, hi: float = 1e3) -> np.ndarray:
    return np.logspace(math.log10(lo), math.log10(hi), n)


def holdout_split(series, frac: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Split into (fit, validation) with the last ``frac`` of samples held out."""
    data = _as_array(series)
    n_val = int(round(frac * data.shape[0]))
    return data[:-n_val], data[-n_val:]


def validation_rmse(model, fit: np.ndarray, val: np.ndarray, horizon: int = 50) -> float:
    """Mean closed-loop RMSE over consecutive ``horizon``-step windows of ``val``.

    Each window restarts from observed data: its warm-up states are the samples
    immediately preceding it (drawn from the end of ``fit`` when needed).
    """
    spec = model.spec
    full = np.concatenate([fit, val], axis=0)
    off = fit.shape[0]
    scores = []
    for start in range(0, val.shape[0] - horizon + 1, horizon):
        a = off + start
        window = full[a - spec.window:a]
        try:
            pred = rollout(model.increment, window, spec, horizon)
        except DivergenceError:
            return math.inf
        scores.append(math.sqrt(float(np.mean((pred - full[a:a + horizon]) ** 2))))
    if not scores:
        raise ValueError(f"validation segment shorter than the scoring horizon {horizon}")
    return float(np.mean(scores))


@dataclass
class GridSearchReport:
    candidates: list[tuple[int, float, float]]
    best: int = 0
    wall_time: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def best_k(self) -> int:
        return self.candidates[self.best][0]

    @property
    def best_gamma(self) -> float:
        return self.candidates[self.best][1]

    @property
    def best_rmse(self) -> float:
        return self.candidates[self.best][2]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "gamma", "val_rmse"])
            for k, g, r in self.candidates:
                w.writerow([k, f"{g:.17g}", f"{r:.17g}"])

    @classmethod
    def from_csv(cls, path: str | Path) -> "GridSearchReport":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        cands = [(int(r["k"]), float(r["gamma"]), float(r["val_rmse"])) for r in rows]
        return cls(_sorted(cands))


def _sorted(cands):
    return sorted(cands, key=lambda c: (c[2], c[0], c[1]))


def _score_k(job) -> list[tuple[int, float, float]]:
    fit, val, k, s, gammas, horizon, bias = job
    spec = EmbeddingSpec(k, s, fit.shape[1])
    out = []
    try:
        lin, Y = increment_targets(fit, spec)
    except ValueError:
        return [(k, float(g), math.inf) for g in gammas]
    H = np.concatenate([np.full((lin.shape[0], 1), bias), lin, quadratic_monomials(lin)], axis=1)
    # the Gram matrix is shared by every gamma for this k
    G = H.T @ H
    rhs = H.T @ Y
    diag = np.diag_indices_from(G)
    for g in gammas:
        A = G.copy()
        A[diag] += g
        try:
            W = scipy.linalg.cho_solve(scipy.linalg.cho_factor(A, lower=True), rhs).T
        except np.linalg.LinAlgError:
            out.append((k, float(g), math.inf))
            continue
        model = StandardNvarModel(spec, float(g), W, bias)
        r = validation_rmse(model, fit, val, horizon)
        out.append((k, float(g), r if math.isfinite(r) else math.inf))
    return out


def grid_search(
    train,
    val,
    k_range: Iterable[int],
    gamma_grid: Sequence[float] | None = None,
    s: int = 1,
    horizon: int = 50,
    refine: int = 9,
    bias: float = 1.0,
    map_fn: Callable = map,
) -> GridSearchReport:
    """Score every ``(k, gamma)`` by closed-loop validation RMSE.

    After the coarse pass, ``refine`` linearly spaced gammas between the
    coarse neighbours of the best cell are scored for the best ``k``.
    ``map_fn`` may be an executor's ``map`` to score each ``k`` in parallel.
    """
    t_start = time.perf_counter()
    fit, val = _as_array(train), _as_array(val)
    ks = list(k_range)
    gammas = np.asarray(default_gamma_grid() if gamma_grid is None else gamma_grid, dtype=np.float64)
    if not ks or gammas.size == 0:
        raise ValueError("k_range and gamma_grid must be non-empty")
    cands = []
    for res in map_fn(_score_k, [(fit, val, k, s, gammas, horizon, bias) for k in ks]):
        cands.extend(res)
    cands = _sorted(cands)
    k_best, g_best, r_best = cands[0]
    if refine and gammas.size > 1 and math.isfinite(r_best):
        j = int(np.argmin(np.abs(gammas - g_best)))
        lo, hi = gammas[max(j - 1, 0)], gammas[min(j + 1, gammas.size - 1)]
        fine = np.linspace(lo, hi, refine + 2)[1:-1]
        fine = fine[~np.isin(fine, gammas)]
        cands = _sorted(cands + _score_k((fit, val, k_best, s, fine, horizon, bias)))
    return GridSearchReport(cands, 0, time.perf_counter() - t_start,
                            {"horizon": horizon, "s": s, "n_fit": fit.shape[0], "n_val": val.shape[0]})
