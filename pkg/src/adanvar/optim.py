"""Adam and L-BFGS on flat float64 parameter vectors.

Both work in place on a single contiguous array so that multi-million
parameter models do not pay for per-tensor bookkeeping.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numba
import numpy as np
from scipy.linalg.blas import daxpy

LossAndGrad = Callable[[np.ndarray], tuple[float, np.ndarray]]


class OptimizerError(FloatingPointError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")


@numba.njit(cache=True)
def _adam_kernel(p, g, m, v, b1, b2, step_size, inv_sqrt_bc2, eps):
    # one fused pass; same arithmetic as the textbook update
    for i in range(p.size):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * (gi * gi)
        m[i] = mi
        v[i] = vi
        p[i] -= step_size * (mi / (math.sqrt(vi) * inv_sqrt_bc2 + eps))


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray,
              scratch: np.ndarray | None = None) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update, applied to ``params`` in place.

    Contiguous 1-D float64 inputs take a compiled single-pass kernel; other
    inputs use the vectorized numpy path, with ``scratch`` as an optional
    reusable work array.
    """
    if grads.shape != params.shape:
        raise ValueError(f"gradient shape {grads.shape} does not match parameters {params.shape}")
    if not math.isfinite(float(np.vdot(grads, grads))):
        raise OptimizerError(f"non-finite gradient at Adam step {state.step + 1}")
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    m, v = state.m, state.v
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    if params.ndim == 1 and params.dtype == np.float64 and grads.dtype == np.float64 \
            and params.flags.c_contiguous and grads.flags.c_contiguous:
        _adam_kernel(params, grads, m, v, b1, b2, state.lr / bc1, 1.0 / math.sqrt(bc2), state.eps)
        return params, state
    tmp = np.empty_like(params) if scratch is None else scratch

    m *= b1
    np.multiply(grads, 1.0 - b1, out=tmp)
    m += tmp
    v *= b2
    np.multiply(grads, grads, out=tmp)
    tmp *= 1.0 - b2
    v += tmp

    # params -= lr/bc1 * m / (sqrt(v/bc2) + eps)
    np.sqrt(v, out=tmp)
    tmp *= 1.0 / math.sqrt(bc2)
    tmp += state.eps
    np.divide(m, tmp, out=tmp)
    tmp *= state.lr / bc1
    params -= tmp
    return params, state


# --- L-BFGS --------------------------------------------------------------------


@dataclass
class LbfgsState:
    memory: int = 10
    c1: float = 1e-4
    c2: float = 0.9
    grad_tol: float = 1e-10
    ftol: float = 1e-12
    max_ls: int = 25
    max_failures: int = 5
    curvature_eps: float = 1e-10
    s_hist: deque = field(default_factory=deque)
    y_hist: deque = field(default_factory=deque)
    rho_hist: deque = field(default_factory=deque)

    def push(self, s: np.ndarray, y: np.ndarray) -> bool:
        """Store a curvature pair unless ``s.y <= curvature_eps * |s| |y|``."""
        sy = float(np.dot(s, y))
        if not sy > self.curvature_eps * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            return False
        if len(self.s_hist) == self.memory:
            self.s_hist.popleft()
            self.y_hist.popleft()
            self.rho_hist.popleft()
        self.s_hist.append(s)
        self.y_hist.append(y)
        self.rho_hist.append(1.0 / sy)
        return True

    def clear(self) -> None:
        self.s_hist.clear()
        self.y_hist.clear()
        self.rho_hist.clear()


@dataclass
class LbfgsTrace:
    losses: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    steps: list[float] = field(default_factory=list)
    status: str = "running"
    n_evals: int = 0
    fallbacks: int = 0

    @property
    def iterations(self) -> int:
        return len(self.steps)


def _axpy(a: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``y += a * x`` in place without a temporary."""
    if y.dtype == np.float64 and y.ndim == 1 and y.flags.c_contiguous and x.flags.c_contiguous:
        return daxpy(x, y, a=a)
    y += a * x
    return y


def two_loop(g: np.ndarray, state: LbfgsState) -> np.ndarray:
    """Return ``-H g`` for the inverse-Hessian approximation held in ``state``."""
    q = g.copy()
    alphas = []
    for s, y, rho in zip(reversed(state.s_hist), reversed(state.y_hist), reversed(state.rho_hist)):
        a = rho * float(np.dot(s, q))
        q = _axpy(-a, y, q)
        alphas.append(a)
    if state.s_hist:
        s, y = state.s_hist[-1], state.y_hist[-1]
        q *= float(np.dot(s, y)) / float(np.dot(y, y))
    for (s, y, rho), a in zip(zip(state.s_hist, state.y_hist, state.rho_hist), reversed(alphas)):
        b = rho * float(np.dot(y, q))
        q = _axpy(a - b, s, q)
    q *= -1.0
    return q


def _cubic_min(x1, f1, g1, x2, f2, g2, lo, hi):
    # minimizer of the cubic through two points with slopes, clipped to [lo, hi]
    d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2)
    disc = d1 * d1 - g1 * g2
    if disc >= 0 and math.isfinite(disc):
        d2 = math.sqrt(disc)
        if x1 <= x2:
            t = x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2.0 * d2))
        else:
            t = x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2.0 * d2))
        if math.isfinite(t):
            return min(max(t, lo), hi)
    return 0.5 * (lo + hi)


def strong_wolfe(fg: LossAndGrad, x: np.ndarray, f0: float, g0: np.ndarray, d: np.ndarray,
                 alpha: float, c1: float = 1e-4, c2: float = 0.9, max_ls: int = 25):
    """Bracketing/zoom line search for the strong Wolfe conditions.

    Returns ``(alpha, f, g, n_evals)`` or ``None`` if no acceptable step was found.
    """
    dphi0 = float(np.dot(g0, d))
    if not dphi0 < 0:
        return None
    evals = 0

    def phi(a):
        nonlocal evals
        evals += 1
        f, g = fg(x + a * d)
        return f, g, float(np.dot(g, d))

    def ok_armijo(a, f):
        return f <= f0 + c1 * a * dphi0

    a_prev, f_prev, dp_prev = 0.0, f0, dphi0
    a_cur = alpha
    lo = hi = None
    for i in range(max_ls):
        f, g, dp = phi(a_cur)
        if not math.isfinite(f) or not ok_armijo(a_cur, f) or (i > 0 and f >= f_prev):
            lo, hi = (a_prev, f_prev, dp_prev, None), (a_cur, f, dp, g)
            break
        if abs(dp) <= -c2 * dphi0:
            return a_cur, f, g, evals
        if dp >= 0:
            lo, hi = (a_cur, f, dp, g), (a_prev, f_prev, dp_prev, None)
            break
        a_next = _cubic_min(a_prev, f_prev, dp_prev, a_cur, f, dp, a_cur + 0.01 * (a_cur - a_prev), a_cur * 10.0)
        a_prev, f_prev, dp_prev = a_cur, f, dp
        a_cur = a_next
    else:
        return None

    # zoom: lo always satisfies Armijo and has the lowest value seen in the bracket
    for _ in range(max_ls):
        a_lo, f_lo, d_lo, _g_lo = lo
        a_hi, f_hi, d_hi, _ = hi
        width = abs(a_hi - a_lo)
        if width < 1e-16 * max(1.0, abs(a_lo)):
            break
        left, right = min(a_lo, a_hi), max(a_lo, a_hi)
        if math.isfinite(f_hi):
            a_j = _cubic_min(a_lo, f_lo, d_lo, a_hi, f_hi, d_hi, left + 0.1 * width, right - 0.1 * width)
        else:
            a_j = 0.5 * (a_lo + a_hi)
        f_j, g_j, d_j = phi(a_j)
        if not math.isfinite(f_j) or not ok_armijo(a_j, f_j) or f_j >= f_lo:
            hi = (a_j, f_j, d_j, g_j)
        else:
            if abs(d_j) <= -c2 * dphi0:
                return a_j, f_j, g_j, evals
            if d_j * (a_hi - a_lo) >= 0:
                hi = lo
            lo = (a_j, f_j, d_j, g_j)
    return None


def lbfgs_minimize(fg: LossAndGrad, params: np.ndarray, state: LbfgsState | None = None,
                   max_iters: int = 500, callback: Callable[[int, float], None] | None = None):
    """Minimize with L-BFGS; ``params`` is updated in place and also returned.

    Stops when ``||g||_inf < grad_tol``, when the relative loss decrease falls
    below ``ftol``, or after ``max_iters`` iterations. If the line search
    fails along the quasi-Newton direction, the iteration retries along the
    steepest-descent direction with the history cleared; ``max_failures``
    consecutive failures end the run.
    """
    state = state or LbfgsState()
    trace = LbfgsTrace()
    x = params
    f, g = fg(x)
    trace.n_evals += 1
    if not math.isfinite(f):
        raise OptimizerError("non-finite loss at the L-BFGS starting point")
    trace.losses.append(f)
    trace.grad_norms.append(float(np.max(np.abs(g))))
    failures = 0
    for it in range(max_iters):
        if trace.grad_norms[-1] < state.grad_tol:
            trace.status = "converged: gradient norm"
            return x, trace
        d = two_loop(g, state)
        first = not state.s_hist
        alpha = min(1.0, 1.0 / float(np.sum(np.abs(g)))) if first else 1.0
        res = strong_wolfe(fg, x, f, g, d, alpha, state.c1, state.c2, state.max_ls)
        if res is None:
            trace.fallbacks += 1
            state.clear()
            d = -g
            res = strong_wolfe(fg, x, f, g, d, min(1.0, 1.0 / float(np.sum(np.abs(g)))),
                               state.c1, state.c2, state.max_ls)
            if res is None:
                failures += 1
                if failures >= state.max_failures:
                    trace.status = "failed: line search"
                    return x, trace
                continue
        failures = 0
        a, f_new, g_new, n = res
        trace.n_evals += n
        s = a * d
        x += s
        state.push(s, g_new - g)
        f_old, f, g = f, f_new, g_new
        trace.losses.append(f)
        trace.grad_norms.append(float(np.max(np.abs(g))))
        trace.steps.append(a)
        if callback is not None:
            callback(it + 1, f)
        if (f_old - f) <= state.ftol * max(abs(f_old), abs(f)):
            trace.status = "converged: relative loss change"
            return x, trace
    trace.status = "max_iters"
    return x, trace


def write_trace_csv(path: str | Path, rows) -> None:
    """Rows of ``(phase, iter, loss)`` as CSV."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["phase", "iter", "loss"])
        for phase, it, loss in rows:
            w.writerow([phase, it, f"{loss:.17g}"])
