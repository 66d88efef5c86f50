"""Closed-form ridge regression via Cholesky on the normal equations."""

from __future__ import annotations

import numpy as np
import scipy.linalg


class RidgeError(np.linalg.LinAlgError):
    pass


def ridge_solve(H, Y, gamma: float) -> np.ndarray:
    """Minimize ``||W H - Y||_F^2 + gamma ||W||_F^2`` over ``W``.

    ``H`` is (p, n) with one feature column per sample and ``Y`` is (d, n).
    Returns ``W`` of shape (d, p), i.e. ``Y H^T (H H^T + gamma I)^-1``.
    """
    H = np.asarray(H, dtype=np.float64)
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if H.ndim != 2 or H.shape[1] < 1:
        raise ValueError(f"H must be (p, n) with n >= 1, got {H.shape}")
    if Y.shape[1] != H.shape[1]:
        raise ValueError(f"H has {H.shape[1]} samples but Y has {Y.shape[1]}")
    if not gamma >= 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    A = H @ H.T
    A[np.diag_indices_from(A)] += gamma
    try:
        factor = scipy.linalg.cho_factor(A, lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise RidgeError(
            f"H H^T + gamma I is not positive definite (gamma={gamma:g}); "
            "increase gamma for rank-deficient features"
        ) from exc
    return scipy.linalg.cho_solve(factor, H @ Y.T).T


def normal_equation_residual(H, Y, gamma: float, W) -> float:
    """Relative residual ``||W (H H^T + gamma I) - Y H^T|| / ||Y H^T||``."""
    H = np.asarray(H, dtype=np.float64)
    Y = np.atleast_2d(Y)
    rhs = Y @ H.T
    lhs = (W @ H) @ H.T + gamma * W
    denom = np.linalg.norm(rhs)
    return float(np.linalg.norm(lhs - rhs) / (denom if denom > 0 else 1.0))
