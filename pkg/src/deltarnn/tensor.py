"""Dense numeric kernel: activations, stable softmax, seeded Gaussian init.

Tensors are plain numpy arrays, rank <= 2, row-major, float64 by default
(float32 is opt-in for speed).  Everything here is pure: identical inputs
produce identical outputs, and sampling is fully determined by the seed.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeError

DEFAULT_DTYPE = np.float64

ACTIVATIONS = ("tanh", "logistic", "identity", "rectifier")


def _as_array(v) -> np.ndarray:
    a = np.asarray(v)
    if a.dtype.kind != "f":
        a = a.astype(DEFAULT_DTYPE)
    if a.ndim > 2:
        raise ShapeError(f"rank {a.ndim} tensor not supported (max rank 2)")
    return a


def require_finite(v: np.ndarray, name: str = "tensor") -> np.ndarray:
    """Reject non-finite entries with a diagnostic naming the offender."""
    if not np.all(np.isfinite(v)):
        bad = int(np.size(v) - np.count_nonzero(np.isfinite(v)))
        raise NumericError(f"{name} contains {bad} non-finite entries")
    return v


def sigmoid(v: np.ndarray) -> np.ndarray:
    """Numerically stable logistic 1/(1+exp(-v)); exact 0/1 in saturation."""
    v = np.asarray(v)
    out = np.empty_like(v, dtype=v.dtype if v.dtype.kind == "f" else DEFAULT_DTYPE)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def activation(kind: str, v) -> np.ndarray:
    """Apply an elementwise activation; `kind` one of ACTIVATIONS.

    `identity` returns the input unchanged (bitwise).  Inputs must be finite.
    """
    a = _as_array(v)
    require_finite(a, f"activation({kind}) input")
    if kind == "identity":
        return a
    if kind == "tanh":
        return np.tanh(a)
    if kind == "logistic":
        return sigmoid(a)
    if kind == "rectifier":
        return np.maximum(a, 0.0)
    raise ShapeError(f"unknown activation kind {kind!r}; expected one of {ACTIVATIONS}")


def activation_grad(kind: str, pre: np.ndarray, out: np.ndarray) -> np.ndarray:
    """d(activation)/d(pre), written in terms of whichever of pre/out is cheaper."""
    if kind == "identity":
        return np.ones_like(out)
    if kind == "tanh":
        return 1.0 - out * out
    if kind == "logistic":
        return out * (1.0 - out)
    if kind == "rectifier":
        return (pre > 0).astype(out.dtype)
    raise ShapeError(f"unknown activation kind {kind!r}")


def softmax(v) -> np.ndarray:
    """Stable softmax of a vector: strictly positive, sums to 1 within 1e-12."""
    a = _as_array(v)
    if a.ndim != 1:
        raise ShapeError(f"softmax expects a vector, got shape {a.shape}")
    if a.size == 0:
        raise ShapeError("softmax of an empty vector is undefined")
    require_finite(a, "softmax input")
    shifted = a - a.max()
    e = np.exp(shifted)
    return e / e.sum()


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax of a (B, V) matrix, max-subtracted for stability."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 stream; same seed + same call sequence = same samples."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def gaussian_init(dims, sigma: float, rng: np.random.Generator,
                  dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Zero-mean Gaussian sample of the given shape and standard deviation."""
    if sigma <= 0:
        raise ShapeError(f"gaussian_init requires sigma > 0, got {sigma}")
    dims = (dims,) if isinstance(dims, int) else tuple(dims)
    if any(d < 1 for d in dims) or len(dims) > 2:
        raise ShapeError(f"invalid dims {dims}: positive extents, rank <= 2")
    return rng.normal(0.0, sigma, size=dims).astype(dtype)
