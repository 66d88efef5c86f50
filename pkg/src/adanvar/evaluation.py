"""Forecast metrics, the multi-seed experiment suite, and the skip study.

One *job* is a (model, noise level, seed, skip) tuple: generate data, add the
seed's noise draw, fit the model on the training block, forecast the test
block closed-loop from observed (noisy) warm-up states, and score against the
clean trajectory at every horizon.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import adaptive, nvar
from .dynamics import LORENZ_X0, NoiseSpec, TimeSeries, add_noise, decimate, lorenz_trajectory
from .features import EmbeddingSpec

HORIZONS = (25, 50, 75, 100)
NOISE_LEVELS = (0.0, 0.05, 0.10, 0.15)
COMPONENTS = ("x", "y", "z")
STANDARD = "standard"
ADAPTIVE = "adaptive"


def rmse(forecast, truth, horizon: int) -> np.ndarray:
    """Per-component root mean squared error over the first ``horizon`` steps."""
    f = nvar._as_array(forecast)
    t = nvar._as_array(truth)
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    if f.shape[0] < horizon or t.shape[0] < horizon:
        raise ValueError(f"need {horizon} rows, got forecast {f.shape[0]} and truth {t.shape[0]}")
    if f.shape[1] != t.shape[1]:
        raise ValueError(f"dimension mismatch: forecast {f.shape[1]}, truth {t.shape[1]}")
    err = f[:horizon] - t[:horizon]
    return np.sqrt(np.mean(err * err, axis=0))


# --- configuration ----------------------------------------------------------------


@dataclass(frozen=True)
class DataConfig:
    warmup: int = 200
    train: int = 1600
    test: int = 200
    dt: float = 0.025
    tolerance: float = 1e-3
    x0: tuple[float, ...] = LORENZ_X0
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0
    noise_mode: str = "relative"

    def __post_init__(self):
        if min(self.warmup, self.train, self.test) < 1:
            raise ValueError(f"warmup, train and test lengths must be positive: {self}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")

    @property
    def n_rows(self) -> int:
        return self.warmup + self.train + self.test

    def trajectory(self, n_rows: int, s: int = 1) -> TimeSeries:
        """``n_rows`` clean samples taken every ``s`` integrator grid steps."""
        full = _trajectory(n_rows * s, self.dt, self.tolerance, tuple(self.x0), self.sigma, self.rho, self.beta)
        return decimate(full, s)

    def clean(self, s: int = 1) -> TimeSeries:
        """The warm-up/train/test trajectory observed every ``s`` steps."""
        return self.trajectory(self.n_rows, s)


@lru_cache(maxsize=8)
def _trajectory(n, dt, tol, x0, sigma, rho, beta):
    return lorenz_trajectory(n, dt, tol, x0, sigma=sigma, rho=rho, beta=beta)


@dataclass(frozen=True)
class StandardConfig:
    """Per-noise-level ``(k, gamma)`` for the standard model.

    The settings are tuned for ``s = 1``. With ``search_skip`` a job on
    decimated data (``s > 1``) instead picks ``(k, gamma)`` by a grid search on
    its own training block, k in ``1..search_k_max``, scored at ``search_horizon``.
    """

    settings: tuple[tuple[float, int, float], ...] = (
        (0.0, 2, 2e-6), (0.05, 8, 119.0), (0.10, 7, 156.0), (0.15, 7, 118.5),
    )
    bias: float = 1.0
    search_skip: bool = True
    search_k_max: int = 10
    search_horizon: int = 50

    def lookup(self, noise: float) -> tuple[int, float]:
        for level, k, gamma in self.settings:
            if math.isclose(level, noise, rel_tol=0, abs_tol=1e-12):
                return int(k), float(gamma)
        raise KeyError(f"no standard-model setting for noise level {noise}")


@dataclass(frozen=True)
class AdaptiveConfig:
    k_clean: int = 2
    k_noisy: int = 30
    hidden: int = 2000
    m: int | None = None  # None: dk(dk+1)/2
    dropout_clean: float = 0.0
    dropout_noisy: float = 0.1
    adam_lr: float = 1e-2
    adam_epochs: int = 2000
    lbfgs_iters: int = 500
    lbfgs_memory: int = 10
    lbfgs_dropout: str = "off"

    def for_noise(self, noise: float) -> tuple[int, float]:
        return (self.k_clean, self.dropout_clean) if noise == 0 else (self.k_noisy, self.dropout_noisy)

    def train_config(self, seed: int) -> adaptive.TrainConfig:
        return adaptive.TrainConfig(self.adam_lr, self.adam_epochs, self.lbfgs_iters, self.lbfgs_memory,
                                    self.lbfgs_dropout, seed=seed)


@dataclass(frozen=True)
class SuiteConfig:
    data: DataConfig = field(default_factory=DataConfig)
    standard: StandardConfig = field(default_factory=StandardConfig)
    adaptive: AdaptiveConfig = field(default_factory=AdaptiveConfig)
    models: tuple[str, ...] = (ADAPTIVE, STANDARD)
    noise_levels: tuple[float, ...] = NOISE_LEVELS
    horizons: tuple[int, ...] = HORIZONS
    seeds: tuple[int, ...] = tuple(range(25))

    def __post_init__(self):
        if not (self.models and self.noise_levels and self.horizons and self.seeds):
            raise ValueError("models, noise_levels, horizons and seeds must all be non-empty")
        unknown = set(self.models) - {ADAPTIVE, STANDARD}
        if unknown:
            raise ValueError(f"unknown model labels: {sorted(unknown)}")
        if max(self.horizons) > self.data.test or min(self.horizons) < 1:
            raise ValueError(f"horizons must lie in [1, {self.data.test}]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SuiteConfig":
        d = dict(d)
        data = DataConfig(**d.pop("data", {}))
        data = replace(data, x0=tuple(data.x0))
        std = d.pop("standard", {})
        if "settings" in std:
            std = {**std, "settings": tuple(tuple(r) for r in std["settings"])}
        return cls(
            data=data,
            standard=StandardConfig(**std),
            adaptive=AdaptiveConfig(**d.pop("adaptive", {})),
            **{k: tuple(v) for k, v in d.items()},
        )


# --- results ------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentResult:
    model: str
    noise: float
    seed: int
    horizon: int
    rmse: tuple[float, ...]
    s: int = 1
    error: str = ""
    config: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if not self.error and not all(v >= 0 for v in self.rmse):
            raise ValueError(f"RMSE must be non-negative, got {self.rmse}")

    @property
    def ok(self) -> bool:
        return not self.error


@dataclass(frozen=True)
class AggregateRow:
    model: str
    noise: float
    horizon: int
    mean: tuple[float, ...]
    std: tuple[float, ...]
    count: int
    failures: int = 0
    s: int = 1


@dataclass(frozen=True)
class Job:
    model: str
    noise: float
    seed: int
    s: int = 1


def _sort_key(r):
    return (r.s, r.model, r.noise, r.seed, r.horizon)


def run_job(job: Job, config: SuiteConfig) -> list[ExperimentResult]:
    """Fit, forecast and score one model on one noise draw."""
    dc = config.data
    clean = dc.clean(job.s)
    observed = add_noise(clean, NoiseSpec(job.noise, dc.noise_mode, job.seed))
    a, b = dc.warmup, dc.warmup + dc.train
    train = observed.data[a:b]
    truth = clean.data[b:]
    horizon = max(config.horizons)
    snap: dict
    try:
        if job.model == STANDARD:
            sc = config.standard
            if job.s > 1 and sc.search_skip:
                rep = nvar.grid_search(*nvar.holdout_split(train), range(1, sc.search_k_max + 1),
                                       horizon=sc.search_horizon, bias=sc.bias)
                k, gamma = rep.best_k, rep.best_gamma
            else:
                k, gamma = sc.lookup(job.noise)
            spec = EmbeddingSpec(k)
            model = nvar.fit_standard(train, spec, gamma, config.standard.bias)
            pred = nvar.forecast(model, observed.data[b - spec.window:b], horizon)
            snap = {"k": k, "gamma": gamma}
        else:
            k, drop = config.adaptive.for_noise(job.noise)
            spec = EmbeddingSpec(k)
            ac = config.adaptive
            model = adaptive.AdaptiveNvarModel.initialize(spec, ac.hidden, ac.m, drop, seed=job.seed)
            res = adaptive.train(model, train, ac.train_config(job.seed))
            pred = adaptive.forecast(model, observed.data[b - spec.window:b], horizon)
            snap = {"k": k, "dropout": drop, "final_loss": res.final_loss, "lbfgs_status": res.lbfgs_status}
    except (nvar.DivergenceError, adaptive.TrainingError, FloatingPointError, np.linalg.LinAlgError) as exc:
        err = f"{type(exc).__name__}: {exc}"
        nan = (math.nan,) * clean.dim
        return [ExperimentResult(job.model, job.noise, job.seed, h, nan, job.s, err) for h in config.horizons]
    return [
        ExperimentResult(job.model, job.noise, job.seed, h, tuple(float(v) for v in rmse(pred, truth, h)),
                         job.s, "", snap)
        for h in config.horizons
    ]


class _Runner:
    # picklable callable for executor.map
    def __init__(self, config):
        self.config = config

    def __call__(self, job):
        return run_job(job, self.config)


def suite_jobs(config: SuiteConfig, s_values: Sequence[int] = (1,)) -> list[Job]:
    jobs = [Job(m, float(n), int(sd), int(s)) for s in s_values for m in config.models
            for n in config.noise_levels for sd in config.seeds]
    # adaptive jobs dominate run time; start them first so a pool balances well
    return sorted(jobs, key=lambda j: (j.model != ADAPTIVE, -j.noise, j.s, j.seed))


def aggregate(results: Iterable[ExperimentResult]) -> list[AggregateRow]:
    """Mean and sample std (ddof=1) per (s, model, noise, horizon) over seeds."""
    cells: dict[tuple, list[ExperimentResult]] = {}
    for r in results:
        cells.setdefault((r.s, r.model, r.noise, r.horizon), []).append(r)
    rows = []
    for key in sorted(cells):
        s, model, noise, h = key
        good = sorted((r for r in cells[key] if r.ok), key=lambda r: r.seed)
        fails = len(cells[key]) - len(good)
        if good:
            vals = np.array([r.rmse for r in good])
            mean = vals.mean(axis=0)
            std = vals.std(axis=0, ddof=1) if len(good) > 1 else np.zeros(vals.shape[1])
        else:
            mean = std = np.full(len(cells[key][0].rmse), math.nan)
        rows.append(AggregateRow(model, noise, h, tuple(map(float, mean)), tuple(map(float, std)),
                                 len(good), fails, s))
    return rows


def run_suite(config: SuiteConfig, s_values: Sequence[int] = (1,), map_fn: Callable = map,
              progress: Callable[[Job, list[ExperimentResult]], None] | None = None):
    """Run the full cross product; returns ``(results, aggregate rows)``.

    Individual failures (divergence, non-finite training) are recorded on
    their results and counted in the aggregate rather than raised.
    """
    jobs = suite_jobs(config, s_values)
    results: list[ExperimentResult] = []
    for job, res in zip(jobs, map_fn(_Runner(config), jobs)):
        results.extend(res)
        if progress is not None:
            progress(job, res)
    results.sort(key=_sort_key)
    return results, aggregate(results)


def skip_study(config: SuiteConfig, s_values: Sequence[int] = (2, 4), noise: float = 0.10,
               map_fn: Callable = map, progress=None):
    """Rerun the suite at one noise level on data observed every ``s`` steps.

    Each ``s`` keeps the same warm-up/train/test sample counts, so the
    underlying trajectory is ``s`` times longer. Horizons count observed
    samples.
    """
    if any(s < 1 for s in s_values):
        raise ValueError(f"s values must be >= 1, got {list(s_values)}")
    cfg = replace(config, noise_levels=(float(noise),))
    return run_suite(cfg, s_values, map_fn, progress)


# --- files --------------------------------------------------------------------------


def _g(v: float) -> str:
    return f"{v:.17g}"


def write_results_csv(path: str | Path, results: Iterable[ExperimentResult], with_skip: bool = False) -> None:
    """``model,noise,seed,horizon,component,rmse`` (``s`` first when ``with_skip``)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow((["s"] if with_skip else []) + ["model", "noise", "seed", "horizon", "component", "rmse"])
        for r in sorted(results, key=_sort_key):
            for c, v in zip(COMPONENTS, r.rmse):
                w.writerow(([r.s] if with_skip else []) + [r.model, _g(r.noise), r.seed, r.horizon, c, _g(v)])


def write_aggregate_csv(path: str | Path, rows: Iterable[AggregateRow], with_skip: bool = False) -> None:
    """``model,noise,horizon,component,mean,std,count,failures``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow((["s"] if with_skip else [])
                   + ["model", "noise", "horizon", "component", "mean", "std", "count", "failures"])
        for r in sorted(rows, key=lambda r: (r.s, r.model, r.noise, r.horizon)):
            for c, m, sd in zip(COMPONENTS, r.mean, r.std):
                w.writerow(([r.s] if with_skip else [])
                           + [r.model, _g(r.noise), r.horizon, c, _g(m), _g(sd), r.count, r.failures])


def read_results_csv(path: str | Path) -> list[ExperimentResult]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    cells: dict[tuple, list[float]] = {}
    for row in rows:
        key = (int(row.get("s", 1)), row["model"], float(row["noise"]), int(row["seed"]), int(row["horizon"]))
        cells.setdefault(key, []).append(float(row["rmse"]))
    out = []
    for (s, model, noise, seed, h), vals in cells.items():
        bad = any(math.isnan(v) for v in vals)
        out.append(ExperimentResult(model, noise, seed, h, tuple(vals), s, "failed" if bad else ""))
    return sorted(out, key=_sort_key)


def read_aggregate_csv(path: str | Path) -> list[AggregateRow]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    cells: dict[tuple, list[dict]] = {}
    for row in rows:
        key = (int(row.get("s", 1)), row["model"], float(row["noise"]), int(row["horizon"]))
        cells.setdefault(key, []).append(row)
    return [
        AggregateRow(model, noise, h, tuple(float(r["mean"]) for r in rs), tuple(float(r["std"]) for r in rs),
                     int(rs[0]["count"]), int(rs[0]["failures"]), s)
        for (s, model, noise, h), rs in sorted(cells.items())
    ]


def lookup(rows: Iterable[AggregateRow], model: str, noise: float, horizon: int, s: int = 1) -> AggregateRow:
    for r in rows:
        if r.model == model and r.horizon == horizon and r.s == s and math.isclose(r.noise, noise, abs_tol=1e-12):
            return r
    raise KeyError((model, noise, horizon, s))


def format_table(rows: Iterable[AggregateRow]) -> str:
    """Plain-text mean ± std table, one line per (s, model, noise, horizon)."""
    head = f"{'s':>2} {'model':<9} {'noise':>5} {'h':>4}" + "".join(f" {c:>17}" for c in COMPONENTS) + "    n"
    lines = [head]
    for r in sorted(rows, key=lambda r: (r.s, r.noise, r.model, r.horizon)):
        cells = "".join(f" {m:8.3f} ± {sd:6.3f}" for m, sd in zip(r.mean, r.std))
        lines.append(f"{r.s:>2} {r.model:<9} {r.noise:>5.2f} {r.horizon:>4}{cells} {r.count:>4}")
    return "\n".join(lines)


# --- charts -------------------------------------------------------------------------

_COLORS = {ADAPTIVE: "#1f77b4", STANDARD: "#d62728"}


def _fmt(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".")


def svg_chart(rows: Sequence[AggregateRow], noise: float, s: int = 1, title: str | None = None) -> str:
    """RMSE vs horizon, one panel per component, one line per model, +-1 std bars.

    The output depends only on ``rows``, so it is byte-stable across runs.
    """
    sel = [r for r in rows if math.isclose(r.noise, noise, abs_tol=1e-12) and r.s == s]
    if not sel:
        raise ValueError(f"no aggregate rows for noise={noise}, s={s}")
    models = sorted({r.model for r in sel})
    horizons = sorted({r.horizon for r in sel})
    d = len(sel[0].mean)
    pw, ph, ml, mt, mb = 260, 200, 50, 40, 40
    width, height = ml + d * (pw + ml), mt + ph + mb + 20
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="16" text-anchor="middle" font-size="13">'
        f'{title or f"RMSE vs horizon, noise {noise * 100:g}%" + (f", s={s}" if s != 1 else "")}</text>',
    ]
    hx0, hx1 = min(horizons), max(horizons)
    for c in range(d):
        vals = [r.mean[c] + (r.std[c] if math.isfinite(r.std[c]) else 0.0)
                for r in sel if math.isfinite(r.mean[c])]
        top = max(vals) * 1.1 if vals and max(vals) > 0 else 1.0
        x0 = ml + c * (pw + ml)

        def X(h):
            return x0 + (0.5 if hx1 == hx0 else (h - hx0) / (hx1 - hx0)) * pw

        def Y(v):
            return mt + ph - (v / top) * ph

        name = COMPONENTS[c] if c < len(COMPONENTS) else f"x{c + 1}"
        out.append(f'<rect x="{x0}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>')
        out.append(f'<text x="{x0 + pw / 2:.1f}" y="{mt - 6}" text-anchor="middle">{name}</text>')
        for t in range(5):
            v = top * t / 4
            out.append(f'<text x="{x0 - 4}" y="{Y(v) + 4:.1f}" text-anchor="end">{_fmt(v)}</text>')
        for h in horizons:
            out.append(f'<text x="{X(h):.1f}" y="{mt + ph + 14}" text-anchor="middle">{h}</text>')
        for mi, model in enumerate(models):
            pts = sorted((r.horizon, r.mean[c], r.std[c]) for r in sel if r.model == model)
            pts = [p for p in pts if math.isfinite(p[1])]
            color = _COLORS.get(model, "#555")
            if pts:
                poly = " ".join(f"{X(h):.1f},{Y(m):.1f}" for h, m, _ in pts)
                out.append(f'<polyline points="{poly}" fill="none" stroke="{color}" stroke-width="2"/>')
            for h, m, sd in pts:
                out.append(f'<circle cx="{X(h):.1f}" cy="{Y(m):.1f}" r="3" fill="{color}"/>')
                if sd > 0:
                    out.append(f'<line x1="{X(h):.1f}" y1="{Y(m - sd):.1f}" x2="{X(h):.1f}" y2="{Y(m + sd):.1f}" '
                               f'stroke="{color}"/>')
            if c == 0:
                ly = height - 8
                lx = ml + mi * 110
                out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 20}" y2="{ly - 4}" stroke="{color}" '
                           f'stroke-width="2"/>')
                out.append(f'<text x="{lx + 24}" y="{ly}">{model}</text>')
        out.append(f'<text x="{x0 + pw / 2:.1f}" y="{mt + ph + 28}" text-anchor="middle">horizon (steps)</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_charts(out_dir: str | Path, rows: Sequence[AggregateRow]) -> list[Path]:
    out_dir = Path(out_dir)
    paths = []
    for s, noise in sorted({(r.s, r.noise) for r in rows}):
        p = out_dir / (f"rmse_noise{noise * 100:g}" + (f"_s{s}" if s != 1 else "") + ".svg")
        p.write_text(svg_chart(rows, noise, s))
        paths.append(p)
    return paths
