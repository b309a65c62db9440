"""Dense matrices, special functions, seeded generators and a gradient checker.

Matrices are plain ``numpy.ndarray`` objects of dtype float64; :func:`as_matrix`
is the single entry point that validates shape and finiteness.
"""

from __future__ import annotations

import zlib
from typing import Callable

import numpy as np

from .errors import DomainError, ShapeError

# Below this argument the special functions shift upwards via recurrence.
_SHIFT = 6.0

# Bernoulli-number coefficients B_2k / (2k), k = 1..6 (digamma tail, x^-2..x^-12).
_DIGAMMA_SERIES = (1.0 / 12, -1.0 / 120, 1.0 / 252, -1.0 / 240, 1.0 / 132, -691.0 / 32760)
# B_2k, k = 1..7 (trigamma tail, x^-3..x^-15).
_TRIGAMMA_SERIES = (1.0 / 6, -1.0 / 30, 1.0 / 42, -1.0 / 30, 5.0 / 66, -691.0 / 2730, 7.0 / 6)
# B_2k / (2k (2k - 1)), k = 1..7 (Stirling series, x^-1..x^-13).
_STIRLING_SERIES = (
    1.0 / 12,
    -1.0 / 360,
    1.0 / 1260,
    -1.0 / 1680,
    1.0 / 1188,
    -691.0 / 360360,
    1.0 / 156,
)
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Return ``data`` as a finite 2-D float64 array, checking optional dimensions."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {arr.shape}")
    if rows is not None and arr.shape[0] != rows:
        raise ShapeError(f"expected {rows} rows, got {arr.shape[0]}")
    if cols is not None and arr.shape[1] != cols:
        raise ShapeError(f"expected {cols} columns, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise DomainError("matrix contains non-finite entries")
    return arr


def make_rng(seed: int, stream: str | None = None) -> np.random.Generator:
    """Seeded PCG64 generator.

    ``stream`` names an independent sub-stream (``"data"``, ``"init"``, ...), so
    that one top-level seed can drive several components without coupling them.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    if stream is not None:
        entropy.append(zlib.crc32(stream.encode("utf-8")))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, stream: str) -> int:
    """A 63-bit integer seed for ``stream``, for libraries that want plain ints."""
    return int(make_rng(seed, stream).integers(0, 2**63 - 1))


def _check_positive(x: np.ndarray, name: str) -> None:
    bad = x[~(x > 0)]
    if bad.size:
        raise DomainError(f"{name} requires x > 0, got {bad.flat[0]}")


def _unwrap(x_in, out: np.ndarray):
    return float(out) if np.ndim(x_in) == 0 else out


def digamma(x):
    """Digamma function psi(x) for x > 0 (scalar or array)."""
    x_arr = np.array(x, dtype=np.float64, copy=True, ndmin=1)
    _check_positive(x_arr, "digamma")
    acc = np.zeros_like(x_arr)
    small = x_arr < _SHIFT
    while np.any(small):
        acc[small] -= 1.0 / x_arr[small]
        x_arr[small] += 1.0
        small = x_arr < _SHIFT
    inv2 = 1.0 / (x_arr * x_arr)
    tail = np.zeros_like(x_arr)
    for c in reversed(_DIGAMMA_SERIES):
        tail = (tail + c) * inv2
    out = acc + np.log(x_arr) - 0.5 / x_arr - tail
    return _unwrap(x, out.reshape(np.shape(x)))


def trigamma(x):
    """Trigamma function psi'(x) for x > 0 (scalar or array)."""
    x_arr = np.array(x, dtype=np.float64, copy=True, ndmin=1)
    _check_positive(x_arr, "trigamma")
    acc = np.zeros_like(x_arr)
    small = x_arr < _SHIFT
    while np.any(small):
        acc[small] += 1.0 / (x_arr[small] * x_arr[small])
        x_arr[small] += 1.0
        small = x_arr < _SHIFT
    inv = 1.0 / x_arr
    inv2 = inv * inv
    tail = np.zeros_like(x_arr)
    for c in reversed(_TRIGAMMA_SERIES):
        tail = (tail + c) * inv2
    out = acc + inv + 0.5 * inv2 + tail * inv
    return _unwrap(x, out.reshape(np.shape(x)))


def lgamma(x):
    """log Gamma(x) for x > 0 (scalar or array)."""
    x_arr = np.array(x, dtype=np.float64, copy=True, ndmin=1)
    _check_positive(x_arr, "lgamma")
    acc = np.zeros_like(x_arr)
    small = x_arr < _SHIFT
    while np.any(small):
        acc[small] -= np.log(x_arr[small])
        x_arr[small] += 1.0
        small = x_arr < _SHIFT
    inv = 1.0 / x_arr
    inv2 = inv * inv
    tail = np.zeros_like(x_arr)
    for c in reversed(_STIRLING_SERIES):
        tail = tail * inv2 + c
    out = acc + (x_arr - 0.5) * np.log(x_arr) - x_arr + _HALF_LOG_2PI + tail * inv
    return _unwrap(x, out.reshape(np.shape(x)))


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    Raises ``FloatingPointError`` naming the coordinate when ``f`` is not finite
    at one of the probe points.
    """
    if not h > 0:
        raise DomainError(f"step h must be positive, got {h}")
    x = np.array(x, dtype=np.float64, copy=True)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        f_plus = float(f(x))
        flat[k] = orig - h
        f_minus = float(f(x))
        flat[k] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise FloatingPointError(f"non-finite function value when perturbing coordinate {k}")
        grad[k] = (f_plus - f_minus) / (2.0 * h)
    return grad.reshape(x.shape)


def max_rel_error(analytic, numeric, floor: float = 1e-8) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
