"""Dense float64 primitives, seeded random numbers and initializers.

Matrices and vectors are plain ``numpy.ndarray`` objects of dtype float64,
row-major (C order). The helpers here add the shape and finiteness checks
the rest of the package relies on.

Random numbers come from numpy's PCG64 bit generator. PCG64 is a fixed,
published algorithm whose output for a given seed does not depend on the
platform; ``tests/test_numerics.py`` pins its first draws as test vectors.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, NumericFault

DTYPE = np.float64


class Rng:
    """Seeded random stream. Same seed, same draws, on every platform."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        """Integers in ``[low, high)``."""
        return self._gen.integers(low, high, size=size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def permutation(self, n: int) -> np.ndarray:
        # Generator.permutation is a Fisher-Yates shuffle of arange(n).
        return self._gen.permutation(n)

    def spawn(self, stream: int) -> "Rng":
        """Derive an independent child stream keyed by ``stream``."""
        return Rng(hash_seed(self.seed, stream))

    def __repr__(self):
        return f"Rng(seed={self.seed})"


def hash_seed(*parts: int) -> int:
    """Combine integers into one 63-bit seed (deterministic, order sensitive)."""
    ss = np.random.SeedSequence([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def check_finite(x: np.ndarray, what: str = "array", step=None) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericFault(f"non-finite values in {what}", step=step)
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit shape check."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.shape[-1] != b.shape[0]:
        raise ConfigurationError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul result")


def _same_shape(a, b, op):
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.shape != b.shape:
        raise ConfigurationError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def add(a, b):
    a, b = _same_shape(a, b, "add")
    return a + b


def sub(a, b):
    a, b = _same_shape(a, b, "sub")
    return a - b


def mul(a, b):
    a, b = _same_shape(a, b, "mul")
    return a * b


def sigmoid(x):
    x = np.asarray(x, dtype=DTYPE)
    # Branch on sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(x):
    return np.tanh(np.asarray(x, dtype=DTYPE))


def softmax_stable(logits, axis=-1):
    z = np.asarray(logits, dtype=DTYPE)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=DTYPE)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def xavier_uniform(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    """``fan_in x fan_out`` matrix, i.i.d. U(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    if fan_in < 1 or fan_out < 1:
        raise ConfigurationError(f"xavier_uniform needs positive fans, got {fan_in}, {fan_out}")
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))
