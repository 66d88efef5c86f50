"""Adaptive NVAR: a trainable MLP feature map with a skip connection.

    H_total = H_lin + MLP(H_lin)          (concatenation, no bias constant)
    X_{i+1} - X_i = W_out @ H_total       (no readout bias)

The MLP and the readout are trained jointly on the mean squared increment
error (averaged over rows and components), first with Adam (dropout active) and then with L-BFGS on the
deterministic loss.

The readout only has ``d`` rows, so ``W_out_nn @ MLP(h)`` is computed as
``(W_out_nn @ W) @ hidden(h) + W_out_nn @ b2``; the (n, m) matrix of MLP
outputs is never formed during training.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Literal

import numpy as np

from . import rng as rngmod
from .dynamics import TimeSeries
from .features import EmbeddingSpec
from .neural import (
    LowRank,
    MlpCache,
    MlpParams,
    ParamLayout,
    hidden_forward,
    init_uniform,
    load_arrays,
    mlp_backward,
    save_arrays,
)
from .nvar import _as_array, increment_targets, rollout
from .optim import AdamState, LbfgsState, adam_step, lbfgs_minimize

PARAM_ORDER = ("W_in", "b1", "W", "b2", "W_out")


class TrainingError(FloatingPointError):
    pass


class AdaptiveNvarModel:
    """Parameters of one adaptive NVAR model, stored in a flat vector ``theta``."""

    def __init__(self, spec: EmbeddingSpec, hidden: int = 2000, m: int | None = None,
                 dropout_rate: float = 0.0, theta: np.ndarray | None = None):
        self.spec = spec
        self.hidden = int(hidden)
        self.m = spec.monomial_dim if m is None else int(m)
        self.dropout_rate = float(dropout_rate)
        dk = spec.linear_dim
        self.layout = ParamLayout({
            **MlpParams.layout(dk, self.hidden, self.m),
            "W_out": (spec.d, dk + self.m),
        })
        self.theta = np.zeros(self.layout.size) if theta is None else np.ascontiguousarray(theta, dtype=np.float64)
        self.views = self.layout.views(self.theta)
        self.mlp = MlpParams.from_views(self.views, self.dropout_rate)

    @classmethod
    def initialize(cls, spec: EmbeddingSpec, hidden: int = 2000, m: int | None = None,
                   dropout_rate: float = 0.0, seed: int = 0) -> "AdaptiveNvarModel":
        """Uniform(+-1/sqrt(fan_in)) init for every weight and bias."""
        model = cls(spec, hidden, m, dropout_rate)
        dk = spec.linear_dim
        fan_in = {"W_in": dk, "b1": dk, "W": model.hidden, "b2": model.hidden, "W_out": dk + model.m}
        init_uniform(model.views, fan_in, rngmod.stream(seed, rngmod.INIT))
        return model

    @property
    def W_out(self) -> np.ndarray:
        return self.views["W_out"]

    @property
    def n_params(self) -> int:
        return self.layout.size

    def copy(self) -> "AdaptiveNvarModel":
        return AdaptiveNvarModel(self.spec, self.hidden, self.m, self.dropout_rate, self.theta.copy())

    # -- evaluation --------------------------------------------------------------

    def _split_readout(self):
        dk = self.spec.linear_dim
        return self.W_out[:, :dk], self.W_out[:, dk:]

    def increment(self, h_lin: np.ndarray) -> np.ndarray:
        """Eval-mode increment for a single delay-embedded row."""
        W_lin, W_nn = self._split_readout()
        a = np.tanh(self.mlp.W_in @ h_lin + self.mlp.b1)
        return W_lin @ h_lin + W_nn @ (self.mlp.W @ a + self.mlp.b2)

    def save(self, stem: str | Path) -> None:
        meta = {
            "kind": "adaptive_nvar",
            "k": self.spec.k, "s": self.spec.s, "d": self.spec.d,
            "hidden": self.hidden, "m": self.m, "dropout_rate": self.dropout_rate,
        }
        save_arrays(stem, {n: self.views[n] for n in PARAM_ORDER}, meta)

    @classmethod
    def load(cls, stem: str | Path) -> "AdaptiveNvarModel":
        arrays, meta = load_arrays(stem)
        if meta.get("kind") != "adaptive_nvar":
            raise ValueError(f"{stem} is not an adaptive NVAR checkpoint (kind={meta.get('kind')!r})")
        spec = EmbeddingSpec(meta["k"], meta["s"], meta["d"])
        model = cls(spec, meta["hidden"], meta["m"], meta["dropout_rate"])
        for n in PARAM_ORDER:
            model.views[n][...] = arrays[n]
        return model


def forward(model: AdaptiveNvarModel, H_lin, mode: str = "eval", rng_seed=None) -> tuple[np.ndarray, MlpCache]:
    """Predicted increments ``W_out (H_lin + MLP(H_lin))`` for a batch of rows."""
    cache = hidden_forward(model.mlp, H_lin, mode, rng_seed)
    W_lin, W_nn = model._split_readout()
    V = W_nn @ model.mlp.W  # (d, hidden)
    Y_hat = cache.inputs @ W_lin.T
    Y_hat += cache.hidden_out @ V.T
    Y_hat += W_nn @ model.mlp.b2
    return Y_hat, cache


def loss_and_grad(model: AdaptiveNvarModel, H_lin: np.ndarray, Y: np.ndarray, mode: str = "eval",
                  rng_seed=None, mask: np.ndarray | None = None,
                  grad: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Mean squared increment error and its gradient w.r.t. ``theta``.

    The mean runs over every row and component, so this is the row-averaged
    squared norm divided by ``d``.

    ``mask`` replaces the random dropout draw with a fixed multiplier array.
    """
    if mask is not None:
        cache = hidden_forward(model.mlp, H_lin, "eval")
        cache = cache._replace(mask=mask, hidden_out=cache.act * mask)
        W_lin, W_nn = model._split_readout()
        Y_hat = cache.inputs @ W_lin.T + cache.hidden_out @ (W_nn @ model.mlp.W).T + W_nn @ model.mlp.b2
    else:
        Y_hat, cache = forward(model, H_lin, mode, rng_seed)
    R = Y_hat - Y
    n = R.size
    loss = float(np.sum(R * R)) / n
    G = R * (2.0 / n)
    grad = np.empty_like(model.theta) if grad is None else grad
    gv = model.layout.views(grad)
    W_lin, W_nn = model._split_readout()
    dk = model.spec.linear_dim
    np.matmul(G.T, cache.inputs, out=gv["W_out"][:, :dk])
    # dL/dW_nn = G^T (A W^T + b2) computed without the (n, m) feature matrix
    GtA = G.T @ cache.hidden_out
    np.matmul(GtA, model.mlp.W.T, out=gv["W_out"][:, dk:])
    gv["W_out"][:, dk:] += np.outer(G.sum(axis=0), model.mlp.b2)
    mlp_backward(model.mlp, cache, LowRank(G, W_nn), out=gv)
    return loss, grad


@dataclass
class TrainConfig:
    adam_lr: float = 1e-2
    adam_epochs: int = 2000
    lbfgs_iters: int = 500
    lbfgs_memory: int = 10
    # "off": eval-mode network during L-BFGS; "fixed": one frozen dropout mask
    lbfgs_dropout: Literal["off", "fixed"] = "off"
    batch_size: int | None = None
    frozen: tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if not self.adam_lr > 0 or self.adam_epochs < 0 or self.lbfgs_iters < 0:
            raise ValueError(f"invalid training configuration: {self}")
        if self.lbfgs_dropout not in ("off", "fixed"):
            raise ValueError(f"lbfgs_dropout must be 'off' or 'fixed', got {self.lbfgs_dropout!r}")
        unknown = set(self.frozen) - set(PARAM_ORDER)
        if unknown:
            raise ValueError(f"unknown parameter names in frozen: {sorted(unknown)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frozen"] = list(self.frozen)
        return d


@dataclass
class TrainResult:
    model: AdaptiveNvarModel
    trace: list[tuple[str, int, float]] = field(default_factory=list)
    lbfgs_status: str = ""
    wall_time: float = 0.0

    @property
    def adam_final(self) -> float:
        vals = [l for p, _, l in self.trace if p == "adam"]
        return vals[-1] if vals else math.nan

    @property
    def final_loss(self) -> float:
        return self.trace[-1][2] if self.trace else math.nan


def training_rows(series, spec: EmbeddingSpec) -> tuple[np.ndarray, np.ndarray]:
    return increment_targets(_as_array(series), spec)


def train(model: AdaptiveNvarModel, train_series, config: TrainConfig | None = None,
          callback: Callable[[str, int, float], None] | None = None) -> TrainResult:
    """Fit ``model`` in place: Adam on the dropout loss, then L-BFGS.

    The trace holds ``(phase, iteration, loss)`` rows. Adam rows record the
    loss of each epoch's forward pass before its update; the first L-BFGS
    row (iteration 0) is the deterministic loss at the hand-over point.
    """
    config = config or TrainConfig()
    t_start = time.perf_counter()
    X, Y = training_rows(train_series, model.spec)
    n = X.shape[0]
    grad = np.empty_like(model.theta)
    frozen = [model.layout.offsets[name] for name in config.frozen]

    def clear_frozen(g):
        for a, b in frozen:
            g[a:b] = 0.0
        return g

    trace: list[tuple[str, int, float]] = []

    def log(phase, it, loss):
        trace.append((phase, it, loss))
        if callback is not None:
            callback(phase, it, loss)

    drop_rng = rngmod.stream(config.seed, rngmod.DROPOUT)
    if config.adam_epochs:
        state = AdamState(lr=config.adam_lr)
        scratch = np.empty_like(model.theta)
        for epoch in range(1, config.adam_epochs + 1):
            if config.batch_size and config.batch_size < n:
                order = drop_rng.permutation(n)
                losses = []
                for a in range(0, n, config.batch_size):
                    idx = order[a:a + config.batch_size]
                    loss, _ = loss_and_grad(model, X[idx], Y[idx], "train", drop_rng, grad=grad)
                    _check(loss, "adam", epoch)
                    adam_step(state, model.theta, clear_frozen(grad), scratch)
                    losses.append(loss * len(idx))
                log("adam", epoch, sum(losses) / n)
            else:
                loss, _ = loss_and_grad(model, X, Y, "train", drop_rng, grad=grad)
                _check(loss, "adam", epoch)
                log("adam", epoch, loss)
                adam_step(state, model.theta, clear_frozen(grad), scratch)
        del state, scratch

    status = ""
    if config.lbfgs_iters:
        mask = None
        if config.lbfgs_dropout == "fixed" and model.dropout_rate > 0:
            from .neural import dropout_mask

            mask = dropout_mask((n, model.hidden), model.dropout_rate, drop_rng)
        evals = 0

        def fg(theta):
            nonlocal evals
            evals += 1
            probe = AdaptiveNvarModel(model.spec, model.hidden, model.m, model.dropout_rate, theta)
            loss, g = loss_and_grad(probe, X, Y, "eval", mask=mask)
            if not math.isfinite(loss):
                return math.inf, g
            return loss, clear_frozen(g)

        loss0, _ = fg(model.theta)
        _check(loss0, "lbfgs", 0)
        log("lbfgs", 0, loss0)
        lstate = LbfgsState(memory=config.lbfgs_memory)
        _, ltrace = lbfgs_minimize(fg, model.theta, lstate, config.lbfgs_iters,
                                   callback=lambda it, f: log("lbfgs", it, f))
        status = ltrace.status
    return TrainResult(model, trace, status, time.perf_counter() - t_start)


def _check(loss: float, phase: str, it: int) -> None:
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite training loss in {phase} phase at iteration {it}")


def forecast(model: AdaptiveNvarModel, warmup_window, horizon: int) -> TimeSeries | np.ndarray:
    """Closed-loop eval-mode forecast; see :func:`adanvar.nvar.forecast`."""
    W_lin, W_nn = model._split_readout()
    # fold the MLP output layer into the readout once per forecast
    V = W_nn @ model.mlp.W
    c = W_nn @ model.mlp.b2
    W_in, b1 = model.mlp.W_in, model.mlp.b1

    def increment(h):
        return W_lin @ h + V @ np.tanh(W_in @ h + b1) + c

    pred = rollout(increment, warmup_window, model.spec, horizon)
    if isinstance(warmup_window, TimeSeries) and horizon:
        w = warmup_window
        return TimeSeries(pred, w.dt, w.t0 + len(w) * w.dt)
    return pred
