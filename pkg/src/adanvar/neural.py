"""Shallow tanh MLP feature map with dropout and hand-written backprop.

    H_NN = W @ dropout(tanh(W_in @ h + b1)) + b2

Dropout is inverted: kept hidden units are scaled by ``1 / (1 - rate)`` in
train mode, and eval mode applies no mask at all.

Parameters live in one flat float64 buffer (see :class:`ParamLayout`) so the
optimizers can update everything in place with vectorized arithmetic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

MLP_FIELDS = ("W_in", "b1", "W", "b2")


class ParamLayout:
    """Named array views into one contiguous parameter vector."""

    def __init__(self, shapes: dict[str, tuple[int, ...]]):
        self.shapes = dict(shapes)
        self.offsets = {}
        pos = 0
        for name, shape in self.shapes.items():
            size = int(np.prod(shape))
            self.offsets[name] = (pos, pos + size)
            pos += size
        self.size = pos

    def views(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        if flat.shape != (self.size,):
            raise ValueError(f"expected a flat vector of length {self.size}, got {flat.shape}")
        return {n: flat[a:b].reshape(self.shapes[n]) for n, (a, b) in self.offsets.items()}


@dataclass
class MlpParams:
    W_in: np.ndarray  # (hidden, n_in)
    b1: np.ndarray  # (hidden,)
    W: np.ndarray  # (m, hidden)
    b2: np.ndarray  # (m,)
    dropout_rate: float = 0.0

    def __post_init__(self):
        h, n_in = self.W_in.shape
        if self.b1.shape != (h,) or self.W.shape[1] != h or self.b2.shape != (self.W.shape[0],):
            raise ValueError(
                f"inconsistent MLP shapes: W_in {self.W_in.shape}, b1 {self.b1.shape}, "
                f"W {self.W.shape}, b2 {self.b2.shape}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def n_in(self) -> int:
        return self.W_in.shape[1]

    @property
    def hidden(self) -> int:
        return self.W_in.shape[0]

    @property
    def m(self) -> int:
        return self.W.shape[0]

    @staticmethod
    def layout(n_in: int, hidden: int, m: int) -> dict[str, tuple[int, ...]]:
        return {"W_in": (hidden, n_in), "b1": (hidden,), "W": (m, hidden), "b2": (m,)}

    @classmethod
    def from_views(cls, views: dict[str, np.ndarray], dropout_rate: float = 0.0) -> "MlpParams":
        return cls(*(views[f] for f in MLP_FIELDS), dropout_rate=dropout_rate)


def init_uniform(views: dict[str, np.ndarray], fan_in: dict[str, int], rng: np.random.Generator) -> None:
    """Fill each named array with U(-1/sqrt(fan_in), 1/sqrt(fan_in)), in dict order."""
    for name, arr in views.items():
        bound = 1.0 / np.sqrt(fan_in[name])
        arr[...] = rng.uniform(-bound, bound, size=arr.shape)


def init_mlp(n_in: int, hidden: int, m: int, rng: np.random.Generator, dropout_rate: float = 0.0) -> MlpParams:
    layout = ParamLayout(MlpParams.layout(n_in, hidden, m))
    views = layout.views(np.empty(layout.size))
    init_uniform(views, {"W_in": n_in, "b1": n_in, "W": hidden, "b2": hidden}, rng)
    return MlpParams.from_views(views, dropout_rate)


def dropout_mask(shape: tuple[int, ...], rate: float, rng: np.random.Generator | None) -> np.ndarray | None:
    """Inverted-dropout multipliers (0 or 1/keep), or None when nothing is dropped."""
    if rate == 0.0:
        return None
    if rng is None:
        raise ValueError("train-mode dropout needs a random generator")
    keep = 1.0 - rate
    mask = rng.random(shape) < keep
    return mask * (1.0 / keep)


class MlpCache(NamedTuple):
    inputs: np.ndarray  # (n, n_in)
    act: np.ndarray  # tanh activations before dropout, (n, hidden)
    mask: np.ndarray | None  # inverted-dropout multipliers or None
    hidden_out: np.ndarray  # act * mask, (n, hidden)


class LowRank(NamedTuple):
    """An (n, m) matrix stored as ``left @ right`` with a thin inner dimension."""

    left: np.ndarray  # (n, r)
    right: np.ndarray  # (r, m)

    @property
    def shape(self) -> tuple[int, int]:
        return self.left.shape[0], self.right.shape[1]

    def dense(self) -> np.ndarray:
        return self.left @ self.right


def _rng(rng_seed):
    if rng_seed is None or isinstance(rng_seed, np.random.Generator):
        return rng_seed
    from . import rng as _r

    return _r.stream(int(rng_seed), _r.DROPOUT)


def hidden_forward(params: MlpParams, inputs, mode: str = "eval", rng_seed=None) -> MlpCache:
    """Hidden layer only: ``dropout(tanh(W_in x + b1))`` for a batch of rows."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    X = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if X.shape[1] != params.n_in:
        raise ValueError(f"input rows have length {X.shape[1]}, the network expects {params.n_in}")
    z = X @ params.W_in.T
    z += params.b1
    act = np.tanh(z, out=z)
    mask = None
    if mode == "train":
        mask = dropout_mask(act.shape, params.dropout_rate, _rng(rng_seed))
    hidden_out = act if mask is None else act * mask
    return MlpCache(X, act, mask, hidden_out)


def mlp_forward(params: MlpParams, inputs, mode: str = "eval", rng_seed=None) -> tuple[np.ndarray, MlpCache]:
    cache = hidden_forward(params, inputs, mode, rng_seed)
    out = cache.hidden_out @ params.W.T
    out += params.b2
    return out, cache


def mlp_backward(params: MlpParams, cache: MlpCache, upstream,
                 out: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """Gradients w.r.t. ``W_in, b1, W, b2`` given ``dL/dH_NN``.

    ``upstream`` is an (n, m) array or a :class:`LowRank` factorization of one.
    The low-rank form never materializes an (n, m) matrix.
    The dropout mask stored in ``cache`` is treated as a fixed multiplier.
    If ``out`` is given, gradients are written into its arrays.
    """
    n = cache.inputs.shape[0]
    if upstream.shape != (n, params.m):
        raise ValueError(f"upstream gradient has shape {upstream.shape}, expected {(n, params.m)}")
    if cache.act.shape != (n, params.hidden):
        raise ValueError("cache does not match these parameters (stale forward pass?)")
    out = out if out is not None else {
        "W_in": np.empty_like(params.W_in), "b1": np.empty_like(params.b1),
        "W": np.empty_like(params.W), "b2": np.empty_like(params.b2),
    }
    if isinstance(upstream, LowRank):
        G, R = upstream
        np.matmul(R.T, G.T @ cache.hidden_out, out=out["W"])
        np.matmul(R.T, G.sum(axis=0), out=out["b2"])
        d_hidden = G @ (R @ params.W)
    else:
        G = np.asarray(upstream, dtype=np.float64)
        np.matmul(G.T, cache.hidden_out, out=out["W"])
        np.sum(G, axis=0, out=out["b2"])
        d_hidden = G @ params.W
    if cache.mask is not None:
        d_hidden *= cache.mask
    d_hidden *= 1.0 - cache.act * cache.act
    np.matmul(d_hidden.T, cache.inputs, out=out["W_in"])
    np.sum(d_hidden, axis=0, out=out["b1"])
    return out


# --- checkpoints ---------------------------------------------------------------
#
# <stem>.bin: little-endian. Magic b"ANVR", uint32 array count, then per array uint32 ndim and
# ndim x uint64 dims, then all arrays as row-major float64 in the same order.
# <stem>.json: array names and shapes plus free-form metadata.

_MAGIC = b"ANVR"


def save_arrays(stem: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    stem = Path(stem)
    with open(stem.with_suffix(".bin"), "wb") as fh:
        fh.write(_MAGIC)
        fh.write(np.uint32(len(arrays)).astype("<u4").tobytes())
        for arr in arrays.values():
            fh.write(np.uint32(arr.ndim).astype("<u4").tobytes())
            fh.write(np.asarray(arr.shape, dtype="<u8").tobytes())
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    side = {"arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()], **(meta or {})}
    stem.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")


def load_arrays(stem: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    stem = Path(stem)
    side = json.loads(stem.with_suffix(".json").read_text())
    raw = stem.with_suffix(".bin").read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{stem}.bin is not a parameter checkpoint")
    pos = 4
    count = int(np.frombuffer(raw, "<u4", 1, pos)[0])
    pos += 4
    shapes = []
    for _ in range(count):
        nd = int(np.frombuffer(raw, "<u4", 1, pos)[0])
        pos += 4
        shapes.append(tuple(int(x) for x in np.frombuffer(raw, "<u8", nd, pos)))
        pos += 8 * nd
    names = [a["name"] for a in side["arrays"]]
    if len(names) != count or [tuple(a["shape"]) for a in side["arrays"]] != shapes:
        raise ValueError(f"{stem}: binary header and JSON sidecar disagree")
    arrays = {}
    for name, shape in zip(names, shapes):
        size = int(np.prod(shape))
        arrays[name] = np.frombuffer(raw, "<f8", size, pos).astype(np.float64).reshape(shape)
        pos += 8 * size
    meta = {k: v for k, v in side.items() if k != "arrays"}
    return arrays, meta


def save_mlp(stem: str | Path, params: MlpParams) -> None:
    save_arrays(stem, {f: getattr(params, f) for f in MLP_FIELDS}, {"dropout_rate": params.dropout_rate})


def load_mlp(stem: str | Path) -> MlpParams:
    arrays, meta = load_arrays(stem)
    return MlpParams(*(arrays[f] for f in MLP_FIELDS), dropout_rate=float(meta.get("dropout_rate", 0.0)))
