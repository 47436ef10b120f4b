"""Minimal numeric kernel: sparse rows, softmax, cosine, a two-layer MLP
with hand-derived gradients, RMSprop, dropout, and a finite-difference
gradient checker.

Everything runs in float64. The network architectures in this package are
static, so backprop is written out by hand instead of pulling in an
autodiff framework.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ContractViolationError,
    DegenerateRowError,
    ShapeError,
    TrainingDivergedError,
)

Array = np.ndarray


def rng_for(seed: int, *site) -> np.random.Generator:
    """Deterministic generator keyed by (global seed, site path).

    Every stochastic site in the toolkit draws from its own stream so that
    runs are bit-reproducible and adding a new site never shifts the draws
    of an existing one.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for part in site:
        entropy.append(zlib.crc32(str(part).encode("utf-8")))
    return np.random.default_rng(np.random.SeedSequence(entropy))


# ---------------------------------------------------------------------------
# sparse rows


@dataclass(frozen=True)
class SparseRowMatrix:
    """CSR-style sparse matrix with float64 weights.

    Column indices are strictly increasing within each row and all weights
    are finite; both are checked at construction.
    """

    rows: int
    cols: int
    indptr: Array
    indices: Array
    data: Array

    def __post_init__(self):
        if self.indptr.shape != (self.rows + 1,):
            raise ShapeError("indptr length must be rows + 1")
        if self.indices.shape != self.data.shape:
            raise ShapeError("indices and data must have equal length")
        if self.indices.size:
            if self.indices.min() < 0 or self.indices.max() >= self.cols:
                raise ShapeError("column index out of range")
            widths = np.diff(self.indptr)
            if widths.min() < 0:
                raise ShapeError("indptr must be nondecreasing")
            gaps = np.diff(self.indices)
            row_starts = self.indptr[1:-1]
            interior = np.ones(self.indices.size - 1, dtype=bool) if self.indices.size > 1 else np.zeros(0, dtype=bool)
            for start in row_starts:
                if 0 < start < self.indices.size:
                    interior[start - 1] = False
            if interior.size and not (gaps[interior] > 0).all():
                raise ShapeError("column indices must be strictly increasing per row")
        if not np.isfinite(self.data).all():
            raise ShapeError("sparse weights must be finite")

    @classmethod
    def from_rows(cls, rows: int, cols: int, row_entries) -> "SparseRowMatrix":
        """Build from an iterable of per-row [(col, weight), ...] lists."""
        indptr = np.zeros(rows + 1, dtype=np.int64)
        indices = []
        data = []
        for i, entries in enumerate(row_entries):
            entries = sorted(entries)
            indptr[i + 1] = indptr[i] + len(entries)
            indices.extend(c for c, _ in entries)
            data.extend(w for _, w in entries)
        return cls(
            rows=rows,
            cols=cols,
            indptr=indptr,
            indices=np.asarray(indices, dtype=np.int64),
            data=np.asarray(data, dtype=np.float64),
        )

    @classmethod
    def identity(cls, n: int) -> "SparseRowMatrix":
        return cls(
            rows=n,
            cols=n,
            indptr=np.arange(n + 1, dtype=np.int64),
            indices=np.arange(n, dtype=np.int64),
            data=np.ones(n, dtype=np.float64),
        )

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def row(self, i: int):
        lo, hi = self.indptr[i], self.indptr[i + 1]
        return self.indices[lo:hi], self.data[lo:hi]

    def row_lengths(self) -> Array:
        return np.diff(self.indptr)

    def row_sums(self) -> Array:
        out = np.zeros(self.rows)
        np.add.at(out, np.repeat(np.arange(self.rows), self.row_lengths()), self.data)
        return out

    def to_dense(self) -> Array:
        dense = np.zeros((self.rows, self.cols))
        r = np.repeat(np.arange(self.rows), self.row_lengths())
        dense[r, self.indices] = self.data
        return dense


def spmm(a: SparseRowMatrix, b: Array) -> Array:
    """Sparse-dense product a @ b; empty rows yield zero rows."""
    if a.cols != b.shape[0]:
        raise ShapeError(f"spmm: {a.rows}x{a.cols} @ {b.shape}")
    out = np.zeros((a.rows,) + b.shape[1:])
    if a.nnz:
        r = np.repeat(np.arange(a.rows), a.row_lengths())
        contrib = a.data[:, None] * b[a.indices] if b.ndim == 2 else a.data * b[a.indices]
        np.add.at(out, r, contrib)
    return out


def spmm_t(a: SparseRowMatrix, b: Array) -> Array:
    """Transposed product a.T @ b, used by backprop."""
    if a.rows != b.shape[0]:
        raise ShapeError(f"spmm_t: ({a.rows}x{a.cols}).T @ {b.shape}")
    out = np.zeros((a.cols,) + b.shape[1:])
    if a.nnz:
        r = np.repeat(np.arange(a.rows), a.row_lengths())
        contrib = a.data[:, None] * b[r] if b.ndim == 2 else a.data * b[r]
        np.add.at(out, a.indices, contrib)
    return out


# ---------------------------------------------------------------------------
# elementwise and row-wise kernels


def row_softmax(m: Array) -> Array:
    """Row-wise softmax with per-row max subtraction."""
    m = np.asarray(m, dtype=np.float64)
    peak = np.max(m, axis=-1, keepdims=True)
    if not np.isfinite(peak).all():
        raise DegenerateRowError("softmax row with no finite entry")
    e = np.exp(m - peak)
    return e / e.sum(axis=-1, keepdims=True)


def cosine(u: Array, v: Array) -> float:
    """Cosine similarity; 0 when either vector is numerically null."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ShapeError(f"cosine: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu < 1e-12 or nv < 1e-12:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def l2_normalize_rows(m: Array, eps: float = 1e-12):
    """Row L2 normalization; returns (normalized, norms) for backprop."""
    norms = np.maximum(np.linalg.norm(m, axis=1, keepdims=True), eps)
    return m / norms, norms


def l2_normalize_rows_backward(normalized: Array, norms: Array, grad: Array) -> Array:
    """Gradient of l2_normalize_rows w.r.t. its raw input."""
    inner = np.sum(grad * normalized, axis=1, keepdims=True)
    return (grad - inner * normalized) / norms


def relu(x: Array) -> Array:
    return np.maximum(x, 0.0)


def sigmoid(x: Array) -> Array:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# two-layer MLP


@dataclass
class MlpParams:
    """Parameters of a ReLU-hidden two-layer perceptron.

    output_activation is "sigmoid" or "identity".
    """

    W1: Array
    b1: Array
    W2: Array
    b2: Array
    output_activation: str = "sigmoid"

    def __post_init__(self):
        if self.output_activation not in ("sigmoid", "identity"):
            raise ShapeError(f"unknown output activation {self.output_activation!r}")
        in_dim, hidden = self.W1.shape
        if self.b1.shape != (hidden,):
            raise ShapeError("b1 does not match hidden dim")
        if self.W2.shape[0] != hidden:
            raise ShapeError("W2 does not chain from hidden dim")
        if self.b2.shape != (self.W2.shape[1],):
            raise ShapeError("b2 does not match output dim")

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[1]

    @classmethod
    def create(cls, in_dim, hidden_dim, out_dim, rng, output_activation="sigmoid",
               zero_output=False):
        """Random init with variance 1/fan_in; zero_output makes the net
        start as a constant map (sigmoid(0) = 0.5 resp. 0)."""
        W1 = rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(in_dim, hidden_dim))
        W2 = (np.zeros((hidden_dim, out_dim)) if zero_output
              else rng.normal(0.0, 1.0 / np.sqrt(hidden_dim), size=(hidden_dim, out_dim)))
        return cls(W1=W1, b1=np.zeros(hidden_dim), W2=W2, b2=np.zeros(out_dim),
                   output_activation=output_activation)

    def flat(self) -> dict:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def replace_arrays(self, arrays: dict) -> "MlpParams":
        return MlpParams(W1=arrays["W1"], b1=arrays["b1"], W2=arrays["W2"],
                         b2=arrays["b2"], output_activation=self.output_activation)


@dataclass
class MlpCache:
    params: MlpParams
    x: Array
    hidden_pre: Array
    hidden: Array
    out: Array


def mlp_forward(p: MlpParams, x: Array):
    """Forward pass; returns (output, cache) with cache sufficient for
    the exact backward pass."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] != p.W1.shape[0]:
        raise ShapeError(f"mlp input dim {x.shape[1]} != {p.W1.shape[0]}")
    hidden_pre = x @ p.W1 + p.b1
    hidden = relu(hidden_pre)
    out_pre = hidden @ p.W2 + p.b2
    out = sigmoid(out_pre) if p.output_activation == "sigmoid" else out_pre
    return out, MlpCache(params=p, x=x, hidden_pre=hidden_pre, hidden=hidden, out=out)


def mlp_backward(p: MlpParams, cache: MlpCache, upstream: Array):
    """Exact gradients of the forward map.

    Returns ({"W1","b1","W2","b2"} grads, input gradient). The cache must
    come from a forward call on the same parameter object.
    """
    if cache.params is not p:
        raise ContractViolationError("mlp cache does not match these parameters")
    if upstream.shape != cache.out.shape:
        raise ShapeError("upstream gradient shape mismatch")
    if p.output_activation == "sigmoid":
        d_pre2 = upstream * cache.out * (1.0 - cache.out)
    else:
        d_pre2 = upstream
    gW2 = cache.hidden.T @ d_pre2
    gb2 = d_pre2.sum(axis=0)
    d_hidden = d_pre2 @ p.W2.T
    d_pre1 = d_hidden * (cache.hidden_pre > 0)
    gW1 = cache.x.T @ d_pre1
    gb1 = d_pre1.sum(axis=0)
    dx = d_pre1 @ p.W1.T
    return {"W1": gW1, "b1": gb1, "W2": gW2, "b2": gb2}, dx


# ---------------------------------------------------------------------------
# RMSprop


@dataclass
class RmspropState:
    """Squared-gradient accumulators plus hyperparameters."""

    learning_rate: float = 0.005
    decay: float = 0.9
    epsilon: float = 1e-8
    acc: dict = field(default_factory=dict)


def rmsprop_step(state: RmspropState, params: dict, grads: dict,
                 lr_scale: float = 1.0) -> dict:
    """One RMSprop update over a flat dict of parameter arrays.

    Accumulators live in `state` and are updated in place; a fresh dict of
    updated parameter arrays is returned. lr_scale allows a parameter group
    to train at a fraction of the configured learning rate.
    """
    new_params = {}
    for key, p in params.items():
        g = grads.get(key)
        if g is None:
            new_params[key] = p
            continue
        if not np.isfinite(g).all():
            raise TrainingDivergedError(f"non-finite gradient for {key!r}")
        acc = state.acc.get(key)
        if acc is None:
            acc = np.zeros_like(p)
        acc *= state.decay
        acc += (1.0 - state.decay) * g * g
        state.acc[key] = acc
        new_params[key] = p - state.learning_rate * lr_scale * g / np.sqrt(acc + state.epsilon)
    return new_params


# ---------------------------------------------------------------------------
# dropout


def dropout_mask(shape, rate: float, rng_seed) -> Array:
    """Inverted-dropout mask: entries are 0 or 1/(1-rate), expectation 1.

    rng_seed may be an int or a Generator; the same seed always yields the
    same mask.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


# ---------------------------------------------------------------------------
# finite differences


def finite_difference(f, x: Array, step: float = 1e-5) -> Array:
    """Central-difference gradient of a scalar function at x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + step
        up = f(x)
        xf[i] = orig - step
        down = f(x)
        xf[i] = orig
        flat[i] = (up - down) / (2.0 * step)
    return grad


def max_relative_error(a: Array, b: Array, floor: float = 1e-6) -> float:
    """Worst per-element relative deviation, floored to avoid blowing up
    on components that are numerically zero on both sides."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale)) if a.size else 0.0
