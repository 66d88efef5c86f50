"""Delay embeddings and quadratic monomial features for NVAR models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import TimeSeries


class EmbeddingError(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingSpec:
    """``k`` delayed copies of a ``d``-dimensional state, ``s`` steps apart."""

    k: int
    s: int = 1
    d: int = 3

    def __post_init__(self):
        if self.k < 1 or self.s < 1 or self.d < 1:
            raise ValueError(f"k, s and d must all be >= 1, got {self}")

    @property
    def linear_dim(self) -> int:
        return self.d * self.k

    @property
    def monomial_dim(self) -> int:
        n = self.linear_dim
        return n * (n + 1) // 2

    @property
    def first_index(self) -> int:
        """Index of the first sample with a complete delay history."""
        return (self.k - 1) * self.s

    @property
    def window(self) -> int:
        """Number of most recent states needed to build one feature row."""
        return self.first_index + 1


@dataclass(frozen=True)
class FeatureMatrix:
    """Feature rows laid out as ``[bias] + linear + nonlinear``."""

    rows: np.ndarray
    linear_dim: int
    nonlinear_dim: int = 0
    has_bias: bool = False
    first_time_index: int = 0

    def __post_init__(self):
        width = int(self.has_bias) + self.linear_dim + self.nonlinear_dim
        if self.rows.ndim != 2 or self.rows.shape[1] != width:
            raise ValueError(f"rows of shape {self.rows.shape} do not match layout width {width}")

    def __len__(self) -> int:
        return self.rows.shape[0]

    @property
    def width(self) -> int:
        return self.rows.shape[1]

    @property
    def linear(self) -> np.ndarray:
        b = int(self.has_bias)
        return self.rows[:, b:b + self.linear_dim]


def embed_array(data: np.ndarray, spec: EmbeddingSpec) -> np.ndarray:
    """Delay-embed a (T, d) array; row ``r`` is ``X_i + X_{i-s} + ...`` with ``i = i0 + r``."""
    T = data.shape[0]
    i0 = spec.first_index
    if T <= i0:
        raise EmbeddingError(
            f"series of length {T} is too short for k={spec.k}, s={spec.s}: "
            f"need at least {i0 + 1} samples"
        )
    if data.shape[1] != spec.d:
        raise EmbeddingError(f"series has dimension {data.shape[1]}, spec expects d={spec.d}")
    # newest block first
    blocks = [data[i0 - j * spec.s: T - j * spec.s] for j in range(spec.k)]
    return np.concatenate(blocks, axis=1)


def delay_embed(series: TimeSeries, spec: EmbeddingSpec) -> FeatureMatrix:
    rows = embed_array(series.data, spec)
    return FeatureMatrix(rows, spec.linear_dim, first_time_index=spec.first_index)


def monomial_pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs ``(i, j)`` with ``i <= j``, ``i`` outer and ``j`` inner."""
    return np.triu_indices(n)


def quadratic_monomials(linear) -> np.ndarray:
    """All products ``x_i * x_j`` with ``i <= j``; works on one row or a batch of rows."""
    x = np.asarray(linear, dtype=np.float64)
    ii, jj = monomial_pairs(x.shape[-1])
    return x[..., ii] * x[..., jj]


def assemble_total(linear: FeatureMatrix, nonlinear_rows=None, bias: float | None = None) -> FeatureMatrix:
    lin = linear.linear
    n = lin.shape[0]
    if nonlinear_rows is None:
        nonlinear_rows = np.zeros((n, 0))
    nonlin = np.asarray(nonlinear_rows, dtype=np.float64)
    if nonlin.ndim == 1:
        nonlin = nonlin[None, :] if n == 1 else nonlin.reshape(n, -1)
    if nonlin.shape[0] != n:
        raise ValueError(f"row count mismatch: {n} linear rows, {nonlin.shape[0]} nonlinear rows")
    parts = [lin, nonlin]
    if bias is not None:
        parts.insert(0, np.full((n, 1), float(bias)))
    return FeatureMatrix(
        np.concatenate(parts, axis=1),
        linear.linear_dim,
        nonlin.shape[1],
        has_bias=bias is not None,
        first_time_index=linear.first_time_index,
    )


def nvar_features(data: np.ndarray, spec: EmbeddingSpec, bias: float = 1.0) -> np.ndarray:
    """Standard NVAR feature rows ``bias + H_lin + monomials(H_lin)`` for a (T, d) array."""
    lin = embed_array(data, spec)
    return np.concatenate([np.full((lin.shape[0], 1), bias), lin, quadratic_monomials(lin)], axis=1)
