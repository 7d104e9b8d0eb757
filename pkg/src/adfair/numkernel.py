"""Dense float64 primitives with hand-written backward rules.

Every primitive returns a :class:`DualResult`: the forward output plus a
``backward`` callable mapping the output gradient to a tuple of input
gradients. Forward activations are captured in the closure, there is no
tape or graph.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

EPS_NORM = 1e-12


class DimensionError(ValueError):
    pass


class DegenerateRowError(ValueError):
    pass


class EmptyPoolError(ValueError):
    pass


@dataclass(frozen=True)
class DualResult:
    output: np.ndarray
    backward: Callable[[np.ndarray], tuple]


def as_tensor(x) -> np.ndarray:
    """Coerce to a 2-D float64 array (scalars and vectors become one row)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(f"expected a 2-D tensor, got shape {arr.shape}")
    return arr


def matmul(a, b) -> DualResult:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a @ b

    def backward(dout):
        return dout @ b.T, a.T @ dout

    return DualResult(out, backward)


def affine(x, W, b) -> DualResult:
    """``x @ W + b`` with ``b`` broadcast over rows."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.shape[1] != W.shape[0]:
        raise DimensionError(f"affine input {x.shape} incompatible with weight {W.shape}")
    if b.shape != (1, W.shape[1]):
        raise DimensionError(f"affine bias {b.shape} incompatible with weight {W.shape}")
    out = x @ W + b

    def backward(dout):
        return dout @ W.T, x.T @ dout, dout.sum(axis=0, keepdims=True)

    return DualResult(out, backward)


def nonlinearity(x, kind: str = "relu") -> DualResult:
    x = as_tensor(x)
    if kind == "relu":
        mask = x > 0
        out = np.where(mask, x, 0.0)

        def backward(dout):
            return (np.where(mask, dout, 0.0),)

    elif kind == "tanh":
        out = np.tanh(x)

        def backward(dout):
            return (dout * (1.0 - out * out),)

    elif kind == "identity":
        out = x.copy()

        def backward(dout):
            return (dout,)

    else:
        raise ValueError(f"unknown nonlinearity {kind!r}")
    return DualResult(out, backward)


def l2_normalize_rows(x) -> DualResult:
    x = as_tensor(x)
    norms = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
    bad = np.flatnonzero(norms[:, 0] <= EPS_NORM)
    if bad.size:
        raise DegenerateRowError(
            f"cannot normalize rows with norm <= {EPS_NORM}: rows {bad.tolist()}"
        )
    out = x / norms

    def backward(dout):
        # (I/|x| - x x^T/|x|^3) applied per row
        proj = np.sum(dout * out, axis=1, keepdims=True)
        return ((dout - out * proj) / norms,)

    return DualResult(out, backward)


def masked_mean_pool(tokens, mask) -> DualResult:
    """Mean of the rows of ``tokens`` (L x d) whose mask entry is 1."""
    tokens = as_tensor(tokens)
    mask = np.asarray(mask, dtype=np.float64).reshape(-1)
    if mask.shape[0] != tokens.shape[0]:
        raise DimensionError(f"mask length {mask.shape[0]} != token count {tokens.shape[0]}")
    count = mask.sum()
    if count <= 0:
        raise EmptyPoolError("mask selects no tokens")
    weights = mask / count
    out = (weights @ tokens).reshape(1, -1)

    def backward(dout):
        return (np.outer(weights, dout.reshape(-1)),)

    return DualResult(out, backward)


def masked_mean_pool_batch(tokens, masks) -> DualResult:
    """Batched pool: ``tokens`` is (N*L) x d, ``masks`` is N x L."""
    tokens = as_tensor(tokens)
    masks = as_tensor(masks)
    n, length = masks.shape
    if tokens.shape[0] != n * length:
        raise DimensionError(
            f"token rows {tokens.shape[0]} != N*L = {n}*{length}"
        )
    counts = masks.sum(axis=1, keepdims=True)
    empty = np.flatnonzero(counts[:, 0] <= 0)
    if empty.size:
        raise EmptyPoolError(f"samples with no unmasked tokens: {empty.tolist()}")
    weights = masks / counts
    d = tokens.shape[1]
    out = np.einsum("nl,nld->nd", weights, tokens.reshape(n, length, d))

    def backward(dout):
        grad = weights[:, :, None] * dout[:, None, :]
        return (grad.reshape(n * length, d),)

    return DualResult(out, backward)


def softmax_rows(x) -> DualResult:
    x = as_tensor(x)
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(dout):
        inner = np.sum(dout * out, axis=1, keepdims=True)
        return (out * (dout - inner),)

    return DualResult(out, backward)


def log_softmax_rows(x) -> DualResult:
    """Fused log-softmax; used by the losses to avoid ``log(0)``."""
    x = as_tensor(x)
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(dout):
        return (dout - probs * dout.sum(axis=1, keepdims=True),)

    return DualResult(out, backward)


def concat_cols(a, b) -> DualResult:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat row mismatch: {a.shape} vs {b.shape}")
    k = a.shape[1]
    out = np.concatenate([a, b], axis=1)

    def backward(dout):
        return dout[:, :k], dout[:, k:]

    return DualResult(out, backward)
