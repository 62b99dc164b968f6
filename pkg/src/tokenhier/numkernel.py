"""Deterministic dense float64 primitives and the counter-based RNG.

Matrices are plain 2-D ``numpy.ndarray`` objects with dtype float64 and
row-major layout; ``Mat`` is an alias documenting that contract.  All
operations here are pure functions over immutable inputs and are safe to
call concurrently.

Randomness comes from :class:`RngStream`, a counter-based generator built
on the splitmix64 finalizer.  The n-th draw of a stream is a pure function
of ``(seed, stream_id, n)``, so per-item streams (``stream_id = item
index``) make parallel execution order-independent, and identical
``(seed, stream_id)`` pairs replay bit-identical sequences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import NumericError, ParameterError, ShapeError

Mat = np.ndarray

_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_STREAM_SALT = 0xD6E8FEB86659FD93


def as_mat(a, name: str = "matrix") -> Mat:
    """Coerce to a 2-D float64 array, rejecting anything else."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got ndim={m.ndim}")
    return m


def _check_finite(m: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{op} produced non-finite values")
    return m


def matmul(a: Mat, b: Mat) -> Mat:
    """Standard matrix product with shape validation."""
    a = as_mat(a, "a")
    b = as_mat(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ ({a.shape} x {b.shape})")
    return _check_finite(a @ b, "matmul")


def softmax_rows(m: Mat) -> Mat:
    """Row-wise softmax with max-subtraction so large magnitudes cannot
    overflow.  Each output row sums to 1."""
    m = np.asarray(m, dtype=np.float64)
    shifted = m - np.max(m, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def layer_norm(x: Mat, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-6) -> Mat:
    """Per-row standardization followed by an affine map.

    The denominator is ``sqrt(max(var, eps))`` rather than
    ``sqrt(var + eps)`` so rows that are already exactly normalized pass
    through unchanged and constant rows collapse to the bias instead of
    dividing by zero.
    """
    if eps <= 0:
        raise ParameterError("layer_norm: eps must be > 0")
    x = np.asarray(x, dtype=np.float64)
    mu = np.mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(np.maximum(var, eps))
    return centered * inv * gain + bias


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact (erf-based) GELU."""
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    """Derivative of the exact GELU."""
    phi = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return 0.5 * (1.0 + erf(x / np.sqrt(2.0))) + x * phi


def _mix64(x: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer, vectorized over uint64 arrays."""
    with np.errstate(over="ignore"):  # wraparound mod 2^64 is the point
        z = (x + _GOLDEN) & _M64
        z = ((z ^ (z >> np.uint64(30))) * _MIX1) & _M64
        z = ((z ^ (z >> np.uint64(27))) * _MIX2) & _M64
        return z ^ (z >> np.uint64(31))


def _mix_scalar(x: int) -> int:
    return int(_mix64(np.uint64(x & 0xFFFFFFFFFFFFFFFF)))


@dataclass
class RngStream:
    """Counter-based random stream.

    The raw 64-bit word at counter ``n`` is
    ``mix64(key + n * golden)`` where ``key`` is derived from
    ``(seed, stream_id)``; drawing advances ``counter``.  Distinct
    ``stream_id`` values give statistically independent streams.
    """

    seed: int
    stream_id: int = 0
    counter: int = 0
    _key: int = field(init=False, repr=False)

    def __post_init__(self):
        key = _mix_scalar(self.seed ^ _STREAM_SALT)
        self._key = _mix_scalar(key ^ _mix_scalar(self.stream_id))

    def derive(self, *ids: int) -> "RngStream":
        """A fresh stream whose identity folds in the given sub-ids.

        Used to hand out per-item / per-purpose streams (e.g. one per
        batch element) whose draws do not depend on scheduling order.
        """
        sid = self.stream_id
        for i in ids:
            sid = _mix_scalar(sid ^ _mix_scalar(int(i) ^ _STREAM_SALT))
        return RngStream(self.seed, sid)

    def _raw(self, n: int) -> np.ndarray:
        counters = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            states = (np.uint64(self._key) + (counters + np.uint64(1)) * _GOLDEN) & _M64
        return _mix64(states)

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in [0, 1) with 53-bit resolution."""
        return (self._raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def gaussian(self, n: int, mu: float = 0.0, sigma: float = 1.0) -> np.ndarray:
        """n normal draws via Box-Muller on the uniform stream."""
        if sigma < 0:
            raise ParameterError(f"gaussian: sigma must be >= 0, got {sigma}")
        m = (n + 1) // 2
        # u1 in (0, 1] keeps log finite; u2 in [0, 1).
        u1 = ((self._raw(m) >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (self._raw(m) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return mu + sigma * z

    def integers(self, n: int, bound: int) -> np.ndarray:
        """n integers uniform over [0, bound). Modulo bias is negligible
        for the small bounds used here (bound << 2^64)."""
        if bound <= 0:
            raise ParameterError("integers: bound must be positive")
        return (self._raw(n) % np.uint64(bound)).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic Fisher-Yates permutation of range(n)."""
        perm = np.arange(n)
        if n > 1:
            js = self._raw(n - 1)
        for i in range(n - 1, 0, -1):
            j = int(js[n - 1 - i] % np.uint64(i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def gaussian(rng: RngStream, n: int, mu: float, sigma: float) -> np.ndarray:
    """Module-level spelling of :meth:`RngStream.gaussian`."""
    return rng.gaussian(n, mu, sigma)
