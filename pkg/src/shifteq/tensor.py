"""Small deterministic dense-tensor layer.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Spatial data
always lives on the last two axes (``[..., H, W]``); token matrices are
``[N, d]``. Every reduction here has a fixed evaluation order so results are
bit-reproducible from run to run.
"""
from __future__ import annotations

import hashlib
import math
from typing import NamedTuple, Sequence

import numba
import numpy as np


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class NumericError(FloatingPointError):
    """Raised on non-finite input where finite values are required."""


class Shift2D(NamedTuple):
    """Circular translation of the last two axes (rows down, columns right)."""

    dy: int
    dx: int

    def __add__(self, other):  # type: ignore[override]
        return Shift2D(self.dy + other[0], self.dx + other[1])

    def __neg__(self):
        return Shift2D(-self.dy, -self.dx)

    def mod(self, h: int, w: int) -> "Shift2D":
        return Shift2D(self.dy % h, self.dx % w)


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


def circular_shift(t, s) -> np.ndarray:
    """``out[..., i, j] = t[..., (i - dy) % H, (j - dx) % W]``."""
    t = np.asarray(t)
    if t.ndim < 2:
        raise ShapeError(f"circular_shift needs >= 2 axes, got shape {t.shape}")
    dy, dx = int(s[0]), int(s[1])
    h, w = t.shape[-2:]
    dy %= h
    dx %= w
    if dy == 0 and dx == 0:
        return t.copy()
    return np.roll(t, (dy, dx), axis=(-2, -1))


@numba.njit(cache=True)
def _matmul_batched(a, b, out):
    for z in range(a.shape[0]):
        for i in range(a.shape[1]):
            for j in range(b.shape[2]):
                out[z, i, j] = a[z, i, 0] * b[z, 0, j]
            for k in range(1, a.shape[2]):
                aik = a[z, i, k]
                for j in range(b.shape[2]):
                    out[z, i, j] = out[z, i, j] + aik * b[z, k, j]
    return out


@numba.njit(cache=True)
def _matmul_shared(a, b, out):
    for z in range(a.shape[0]):
        for i in range(a.shape[1]):
            for j in range(b.shape[1]):
                out[z, i, j] = a[z, i, 0] * b[0, j]
            for k in range(1, a.shape[2]):
                aik = a[z, i, k]
                for j in range(b.shape[1]):
                    out[z, i, j] = out[z, i, j] + aik * b[k, j]
    return out


def matmul(a, b) -> np.ndarray:
    """Matrix product with a fixed ascending-inner-index accumulation order.

    Accepts ``a[..., N, k]`` and ``b[..., k, m]`` with broadcasting over the
    leading axes. Every output entry is ``((a0*b0 + a1*b1) + a2*b2) + ...``
    with no fused multiply-add, independent of any BLAS.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    n, k = a.shape[-2:]
    m = b.shape[-1]
    if b.shape[-2] != k or k == 0:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    lead = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    a3 = np.ascontiguousarray(np.broadcast_to(a, lead + (n, k))).reshape(-1, n, k)
    out = np.empty((a3.shape[0], n, m))
    if b.ndim == 2:
        _matmul_shared(a3, np.ascontiguousarray(b), out)
    else:
        b3 = np.ascontiguousarray(np.broadcast_to(b, lead + (k, m))).reshape(-1, k, m)
        _matmul_batched(a3, b3, out)
    return out.reshape(lead + (n, m))


def softmax_rows(t) -> np.ndarray:
    """Softmax over the last axis, max-subtracted."""
    t = np.asarray(t, dtype=np.float64)
    if np.isnan(t).any():
        raise NumericError("softmax_rows received NaN input")
    z = np.exp(t - t.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


@numba.njit(cache=True)
def _sorted_compensated_rows(v, out):
    # Neumaier summation over each row after sorting it: the sorted sequence
    # is canonical, so the result cannot depend on the original element order.
    for r in range(v.shape[0]):
        row = np.sort(v[r])
        total = 0.0
        comp = 0.0
        for x in row:
            t = total + x
            if abs(total) >= abs(x):
                comp += (total - t) + x
            else:
                comp += (x - t) + total
            total = t
        out[r] = total + comp
    return out


def power_sum_rows(v, p: int = 2) -> np.ndarray:
    """``sum |x|**p`` along the last axis with order-independent compensated summation."""
    if p not in (1, 2):
        raise ValueError(f"norm order must be 1 or 2, got {p}")
    v = np.abs(np.asarray(v, dtype=np.float64))
    if p == 2:
        v = v * v
    lead = v.shape[:-1]
    v2 = np.ascontiguousarray(v.reshape(-1, v.shape[-1] if v.ndim else 1))
    out = np.empty(v2.shape[0])
    return _sorted_compensated_rows(v2, out).reshape(lead)


def power_sum(t, p: int = 2) -> float:
    """``sum |x|**p`` over every element of ``t``."""
    return float(power_sum_rows(np.ravel(t), p))


def lp_norm(t, p: int = 2) -> float:
    s = power_sum(t, p)
    return s if p == 1 else math.sqrt(s)


# --------------------------------------------------------------------------
# Random numbers
# --------------------------------------------------------------------------

_TWO53 = float(2**53)


class Rng:
    """Seeded counter-based generator (Philox-4x64 raw stream).

    Uniforms take the top 53 bits of each raw 64-bit word. Normals use the
    Box-Muller transform on two consecutive blocks of uniforms. Because only the raw
    Philox words are consumed, streams do not depend on numpy's higher-level
    sampling routines.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & (2**64 - 1)
        self._bitgen = np.random.Philox(key=self.seed)

    def child(self, name: str) -> "Rng":
        """Independent stream keyed by ``(seed, name)``."""
        digest = hashlib.blake2b(
            f"{self.seed}:{name}".encode(), digest_size=8
        ).digest()
        return Rng(int.from_bytes(digest, "little"))

    def raw(self, n: int) -> np.ndarray:
        return self._bitgen.random_raw(n).astype(np.uint64)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in (0, 1]."""
        return ((self.raw(n) >> np.uint64(11)).astype(np.float64) + 1.0) / _TWO53

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        """``n`` integers in ``[low, high]`` (modulo reduction of raw words)."""
        span = np.uint64(high - low + 1)
        return (self.raw(n) % span).astype(np.int64) + low


def _size(shape: Sequence[int]) -> int:
    n = 1
    for d in shape:
        if int(d) <= 0:
            raise ShapeError(f"axis lengths must be positive, got {tuple(shape)}")
        n *= int(d)
    return n


def rng_normal(r: Rng, shape: Sequence[int]) -> np.ndarray:
    n = _size(shape)
    m = (n + 1) // 2
    u1 = r.uniform(m)
    u2 = r.uniform(m)
    rad = np.sqrt(-2.0 * np.log(u1))
    ang = 2.0 * np.pi * u2
    z = np.concatenate([rad * np.cos(ang), rad * np.sin(ang)])[:n]
    return z.reshape(tuple(shape))


def rng_lattice(r: Rng, shape: Sequence[int], k: int = 4) -> np.ndarray:
    """Integers in ``[-2**k, 2**k]`` scaled by ``2**-k``; exact in float64."""
    n = _size(shape)
    ints = r.integers(-(2**k), 2**k, n)
    return np.ldexp(ints.astype(np.float64), -k).reshape(tuple(shape))
