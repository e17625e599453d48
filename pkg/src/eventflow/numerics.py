"""Deterministic float64 numeric substrate.

Everything in this package computes in 64-bit floats with fixed reduction
order (numpy's sequential row-major kernels). Randomness comes from a
counter-based Philox generator wrapped in :class:`Rng`, which is splittable
by string label so that every consumer of randomness owns an independent,
reproducible stream. NaN or Inf anywhere is a hard error, never a warning.

The model-side layer primitives (linear, layer norm, silu, softmax) live here
as explicit forward/backward pairs; the backward passes are hand-derived and
validated against :func:`grad_check`, the central-difference oracle.
"""

from __future__ import annotations

import hashlib
from typing import Callable

import numpy as np

__all__ = [
    "Rng",
    "assert_finite",
    "softmax_rows",
    "softmax_rows_bwd",
    "grad_check",
    "linear",
    "linear_bwd",
    "layer_norm",
    "layer_norm_bwd",
    "silu",
    "silu_bwd",
]

F64 = np.float64


def assert_finite(x: np.ndarray | float, context: str) -> None:
    """Raise FloatingPointError if `x` contains NaN or Inf.

    Args:
        x: array or scalar to check.
        context: short description used in the error message.
    """
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite value in {context}")


class Rng:
    """Counter-based splittable random stream.

    A stream is identified by (seed, label path). Child streams derived with
    :meth:`split` are pure functions of the parent's identity and the label,
    so they never depend on how much the parent has drawn. Identical seeds
    give identical streams; distinct labels give uncorrelated streams.
    """

    def __init__(self, seed: int, label: str = "root") -> None:
        self.seed = int(seed)
        self.label = str(label)
        digest = hashlib.blake2b(
            f"{self.seed}:{self.label}".encode("utf-8"), digest_size=16
        ).digest()
        self._key = int.from_bytes(digest, "little")
        self._gen = np.random.Generator(np.random.Philox(key=self._key))

    def split(self, label: str) -> "Rng":
        """Return an independent child stream for `label`."""
        return Rng(self.seed, f"{self.label}/{label}")

    def uniform(
        self,
        shape: tuple[int, ...] | int = (),
        low: float = 0.0,
        high: float = 1.0,
    ) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape).astype(F64, copy=False)

    def normal(self, shape: tuple[int, ...] | int = ()) -> np.ndarray:
        return self._gen.standard_normal(size=shape, dtype=F64)

    def integers(
        self, low: int, high: int, shape: tuple[int, ...] | int = ()
    ) -> np.ndarray:
        """Integers in [low, high)."""
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Rng(seed={self.seed}, label={self.label!r})"


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction.

    Rows containing -inf entries are supported (masked attention); a row of
    all -inf is an error because it has no finite probability mass.
    """
    m = np.asarray(m, dtype=F64)
    if m.ndim < 1:
        raise ValueError("softmax_rows expects at least one dimension")
    if np.any(np.isnan(m)) or np.any(np.isposinf(m)):
        raise FloatingPointError("non-finite value in softmax_rows input")
    rowmax = np.max(m, axis=-1, keepdims=True)
    if np.any(np.isneginf(rowmax)):
        raise FloatingPointError("softmax_rows: row with no finite entries")
    e = np.exp(m - rowmax)
    out = e / np.sum(e, axis=-1, keepdims=True)
    assert_finite(out, "softmax_rows output")
    return out


def softmax_rows_bwd(dp: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Backward of softmax_rows given output `p` and cotangent `dp`."""
    inner = np.sum(dp * p, axis=-1, keepdims=True)
    return (dp - inner) * p


def grad_check(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x: np.ndarray,
    eps: float = 1e-5,
) -> float:
    """Central-difference oracle for an analytic gradient.

    Args:
        f: maps a parameter array to (scalar value, analytic gradient).
        x: evaluation point (any shape, float64).
        eps: central-difference step.

    Returns:
        max over coordinates of |analytic - numeric| / max(1, |analytic|).
    """
    x = np.asarray(x, dtype=F64)
    value, analytic = f(x)
    assert_finite(value, "grad_check f(x)")
    assert_finite(analytic, "grad_check analytic gradient")
    analytic = np.asarray(analytic, dtype=F64)
    if analytic.shape != x.shape:
        raise ValueError("analytic gradient shape mismatch")
    worst = 0.0
    for idx in np.ndindex(*x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        fp, _ = f(xp)
        fm, _ = f(xm)
        assert_finite(fp, "grad_check f(x+eps)")
        assert_finite(fm, "grad_check f(x-eps)")
        numeric = (fp - fm) / (2.0 * eps)
        err = abs(analytic[idx] - numeric) / max(1.0, abs(analytic[idx]))
        if err > worst:
            worst = err
    return float(worst)


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    y = x @ w
    if b is not None:
        y = y + b
    return y


def linear_bwd(
    dy: np.ndarray, x: np.ndarray, w: np.ndarray, with_bias: bool = True
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    dx = dy @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = x2.T @ dy2
    db = dy2.sum(axis=0) if with_bias else None
    return dx, dw, db


def layer_norm(x: np.ndarray, eps: float = 1e-6) -> tuple[np.ndarray, tuple]:
    """Affine-free layer norm over the last axis. Returns (y, cache)."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    return y, (xc, inv)


def layer_norm_bwd(dy: np.ndarray, cache: tuple) -> np.ndarray:
    xc, inv = cache
    n = xc.shape[-1]
    xhat = xc * inv
    dsum = dy.sum(axis=-1, keepdims=True)
    ddot = np.sum(dy * xhat, axis=-1, keepdims=True)
    return inv * (dy - dsum / n - xhat * ddot / n)


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def silu_bwd(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    s = 1.0 / (1.0 + np.exp(-x))
    return dy * s * (1.0 + x * (1.0 - s))
