"""Ground-truth trajectories: Lorenz-63, an embedded RK2(3) integrator, noise."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal

import numpy as np

from . import rng

Rhs = Callable[[float, np.ndarray], np.ndarray]

MIN_SUBSTEP = 1e-14


class IntegrationError(RuntimeError):
    """Raised when the integrator cannot make progress."""


@dataclass(frozen=True)
class OdeSystem:
    dimension: int
    rhs: Rhs
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dimension < 1:
            raise ValueError("dimension must be >= 1")


@dataclass(frozen=True)
class TimeSeries:
    """Time-major samples on a uniform grid. ``data`` has shape (T, d)."""

    data: np.ndarray
    dt: float
    t0: float = 0.0

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim == 1:
            data = data[:, None]
        if data.ndim != 2 or data.shape[0] < 1:
            raise ValueError(f"expected a (T, d) array with T >= 1, got shape {data.shape}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self))

    def slice(self, start: int, stop: int) -> "TimeSeries":
        """Rows ``[start, stop)`` with the time origin moved accordingly."""
        start, stop, _ = slice(start, stop).indices(len(self))
        return TimeSeries(self.data[start:stop], self.dt, self.t0 + start * self.dt)

    def to_csv(self, path: str | Path, names: list[str] | None = None) -> None:
        write_csv(self, path, names)


def lorenz63(sigma: float = 10.0, rho: float = 28.0, beta: float = 8.0 / 3.0) -> OdeSystem:
    """The Lorenz-63 system with the classic chaotic parameters by default."""

    def rhs(t: float, u: np.ndarray) -> np.ndarray:
        x, y, z = u
        return np.array([sigma * (y - x), x * (rho - z) - y, x * y - beta * z])

    return OdeSystem(3, rhs, {"sigma": sigma, "rho": rho, "beta": beta})


LORENZ_X0 = (-8.0, 7.0, 27.0)

# Bogacki-Shampine tableau, error weights and cubic dense-output coefficients
_A = np.array([[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [0.0, 0.75, 0.0]])
_C = np.array([0.0, 0.5, 0.75])
_B = np.array([2.0 / 9.0, 1.0 / 3.0, 4.0 / 9.0])
_E = np.array([5.0 / 72.0, -1.0 / 12.0, -1.0 / 9.0, 1.0 / 8.0])
_P = np.array([
    [1.0, -4.0 / 3.0, 5.0 / 9.0],
    [0.0, 1.0, -2.0 / 3.0],
    [0.0, 4.0 / 3.0, -8.0 / 9.0],
    [0.0, -1.0, 1.0],
])
_SAFETY, _MIN_FACTOR, _MAX_FACTOR = 0.9, 0.2, 10.0


def _rms(x: np.ndarray) -> float:
    return float(np.linalg.norm(x) / np.sqrt(x.size))


def _eval(system: OdeSystem, t: float, y: np.ndarray) -> np.ndarray:
    f = np.asarray(system.rhs(t, y), dtype=np.float64)
    if f.shape != y.shape:
        raise ValueError(f"rhs returned shape {f.shape}, expected {y.shape}")
    if not np.all(np.isfinite(f)):
        raise IntegrationError(f"non-finite derivative at t={t}: invalid parameters or state")
    return f


def _initial_step(system, t0, y0, f0, span, rtol, atol) -> float:
    # Hairer, Norsett & Wanner, Sec. II.4; error order 2
    scale = atol + np.abs(y0) * rtol
    d0, d1 = _rms(y0 / scale), _rms(f0 / scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    f1 = _eval(system, t0 + h0, y0 + h0 * f0)
    d2 = _rms((f1 - f0) / scale) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / 3.0)
    return min(100 * h0, h1, span)


def integrate_rk23(
    system: OdeSystem,
    initial_state,
    dt: float,
    n_steps: int,
    tolerance: float = 1e-3,
    atol: float | None = None,
    t0: float = 0.0,
) -> TimeSeries:
    """Integrate ``system`` and sample it at ``t0 + i*dt`` for ``i = 0..n_steps``.

    ``tolerance`` is the relative local error tolerance; ``atol`` defaults to
    ``tolerance * 1e-3``. A substep is accepted when the RMS over components of
    ``err_j / (atol + tolerance * max(|y_j|, |y_new_j|))`` is below one. The
    substep sequence does not depend on ``dt``: grid samples come from the
    cubic dense output of the substep that covers them. Step-size control and
    defaults follow the common ``RK23`` solver, so that Lorenz data generated
    here matches what that solver produces at its default settings.
    """
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    if not tolerance > 0:
        raise ValueError(f"tolerance must be positive, got {tolerance}")
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    rtol = tolerance
    atol = tolerance * 1e-3 if atol is None else atol
    y = np.array(initial_state, dtype=np.float64).reshape(-1)
    if y.shape[0] != system.dimension:
        raise ValueError(f"initial state has {y.shape[0]} components, system has {system.dimension}")
    if not np.all(np.isfinite(y)):
        raise ValueError("initial state must be finite")

    grid = t0 + dt * np.arange(n_steps + 1)
    t_bound = float(grid[-1])
    out = np.empty((n_steps + 1, y.shape[0]))
    out[0] = y
    next_row = 1
    t = t0
    f = _eval(system, t, y)
    h_abs = _initial_step(system, t, y, f, t_bound - t0, rtol, atol)
    K = np.empty((4, y.shape[0]))
    while t < t_bound:
        min_step = max(MIN_SUBSTEP, 10 * abs(np.nextafter(t, np.inf) - t))
        h_abs = max(h_abs, min_step)
        rejected = False
        while True:
            if h_abs < min_step:
                raise IntegrationError(
                    f"step size underflow ({h_abs:.3g}) at t={t}: stiff or diverging system"
                )
            t_new = min(t + h_abs, t_bound)
            h = t_new - t
            K[0] = f
            for j in (1, 2):
                dy = np.dot(K[:j].T, _A[j, :j]) * h
                K[j] = _eval(system, t + _C[j] * h, y + dy)
            y_new = y + h * np.dot(K[:3].T, _B)
            K[3] = f_new = _eval(system, t + h, y_new)
            scale = atol + np.maximum(np.abs(y), np.abs(y_new)) * rtol
            err = _rms(np.dot(K.T, _E) * h / scale)
            if err < 1:
                factor = _MAX_FACTOR if err == 0 else min(_MAX_FACTOR, _SAFETY * err ** (-1.0 / 3.0))
                if rejected:
                    factor = min(1.0, factor)
                h_abs = h * factor
                break
            h_abs = h * max(_MIN_FACTOR, _SAFETY * err ** (-1.0 / 3.0))
            rejected = True
        stop = int(np.searchsorted(grid, t_new, side="right"))
        if stop > next_row:
            Q = K.T @ _P
            x = (grid[next_row:stop] - t) / h
            powers = np.cumprod(np.tile(x, (3, 1)), axis=0)
            out[next_row:stop] = (y[:, None] + h * (Q @ powers)).T
            next_row = stop
        t, y, f = t_new, y_new, f_new
    if not np.all(np.isfinite(out)):
        raise IntegrationError("trajectory contains non-finite values")
    return TimeSeries(out, dt, t0)


def rk4_fixed(system: OdeSystem, initial_state, h: float, n_steps: int) -> np.ndarray:
    """Classical fixed-step RK4; returns all ``n_steps + 1`` states. Reference use only."""
    y = np.array(initial_state, dtype=np.float64)
    out = np.empty((n_steps + 1, y.shape[0]))
    out[0] = y
    t = 0.0
    for i in range(n_steps):
        a = system.rhs(t, y)
        b = system.rhs(t + h / 2, y + h / 2 * a)
        c = system.rhs(t + h / 2, y + h / 2 * b)
        e = system.rhs(t + h, y + h * c)
        y = y + h / 6 * (a + 2 * b + 2 * c + e)
        t += h
        out[i + 1] = y
    return out


@dataclass(frozen=True)
class NoiseSpec:
    """Additive Gaussian observation noise.

    In ``absolute`` mode ``sigma`` is the noise standard deviation in system
    units. In ``relative`` mode each component gets ``sigma`` times that
    component's standard deviation over the clean series.
    """

    sigma: float
    mode: Literal["absolute", "relative"] = "absolute"
    seed: int = 0

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if self.mode not in ("absolute", "relative"):
            raise ValueError(f"unknown noise mode {self.mode!r}")


# noise-level labels used throughout the experiments
NOISE_LEVELS = {"0%": 0.0, "5%": 0.05, "10%": 0.10, "15%": 0.15}


def add_noise(series: TimeSeries, spec: NoiseSpec) -> TimeSeries:
    if spec.sigma == 0:
        return TimeSeries(series.data.copy(), series.dt, series.t0)
    scale = spec.sigma
    if spec.mode == "relative":
        scale = spec.sigma * series.data.std(axis=0)
    eps = rng.stream(spec.seed, rng.NOISE).standard_normal(series.data.shape)
    return TimeSeries(series.data + scale * eps, series.dt, series.t0)


def decimate(series: TimeSeries, s: int) -> TimeSeries:
    """Keep every ``s``-th sample, i.e. observe the system ``s`` times less often."""
    if s < 1:
        raise ValueError(f"s must be >= 1, got {s}")
    return TimeSeries(series.data[::s], series.dt * s, series.t0)


def lorenz_trajectory(n_rows: int, dt: float = 0.025, tolerance: float = 1e-3,
                      x0=LORENZ_X0, **params) -> TimeSeries:
    """``n_rows`` samples of Lorenz-63 starting from ``x0`` at t=0."""
    return integrate_rk23(lorenz63(**params), x0, dt, n_rows - 1, tolerance)


def _column_names(d: int) -> list[str]:
    return ["x", "y", "z"] if d == 3 else [f"x{j + 1}" for j in range(d)]


def write_csv(series: TimeSeries, path: str | Path, names: list[str] | None = None) -> None:
    """Write ``t,<names...>`` with 17 significant digits per value."""
    names = names or _column_names(series.dim)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", *names])
        for t, row in zip(series.times, series.data):
            w.writerow([f"{t:.17g}", *(f"{v:.17g}" for v in row)])


def read_csv(path: str | Path) -> TimeSeries:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2 or rows[0][0] != "t":
        raise ValueError(f"{path}: expected a header starting with 't' and at least one row")
    arr = np.array([[float(v) for v in r] for r in rows[1:]])
    t = arr[:, 0]
    dt = float(t[1] - t[0]) if len(t) > 1 else 1.0
    if len(t) > 2 and not np.allclose(np.diff(t), dt, rtol=1e-9, atol=1e-12):
        raise ValueError(f"{path}: time column is not uniformly spaced")
    if not math.isfinite(dt) or dt <= 0:
        raise ValueError(f"{path}: non-increasing time column")
    return TimeSeries(arr[:, 1:], dt, float(t[0]))
