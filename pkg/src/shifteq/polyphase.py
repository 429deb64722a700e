"""Polyphase anchoring.

The input is circularly shifted so that its largest-norm polyphase lands on
the grid of positions congruent to ``(0, 0)`` modulo the stride. Any strided
or windowed operator applied afterwards sees the same token groupings no
matter how the input was translated.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .tensor import circular_shift, power_sum_rows
from .validation import check_divisible, check_p_norm, check_spatial


class PolyphaseIndex(NamedTuple):
    p: int
    q: int


@dataclass(frozen=True)
class AnchorResult:
    anchored: np.ndarray
    phase: PolyphaseIndex
    stride: int


def polyphase_extract(x, idx, s: int) -> np.ndarray:
    """``out[..., i, j] = x[..., p + s*i, q + s*j]``."""
    x = check_spatial(x)
    h, w = x.shape[-2:]
    check_divisible(h, w, s)
    p, q = int(idx[0]), int(idx[1])
    if not (0 <= p < s and 0 <= q < s):
        raise ValueError(f"polyphase index {(p, q)} out of range for stride {s}")
    return x[..., p::s, q::s].copy()


def _grouped(x: np.ndarray, s: int) -> np.ndarray:
    """``x[B, ..., H, W]`` -> ``[B, s, s, n]``: row ``(p, q)`` holds polyphase ``(p, q)``."""
    b = x.shape[0]
    h, w = x.shape[-2:]
    y = x.reshape(b, -1, h // s, s, w // s, s)
    return y.transpose(0, 3, 5, 1, 2, 4).reshape(b, s, s, -1)


def polyphase_power_sums(x, s: int, p_norm: int = 2) -> np.ndarray:
    """``s x s`` table of ``sum |x|^p`` per polyphase (order-independent sums)."""
    x = check_spatial(x)
    check_divisible(*x.shape[-2:], s)
    check_p_norm(p_norm)
    return power_sum_rows(_grouped(x[None], s), p_norm)[0]


def _argmax_lex(table: np.ndarray) -> PolyphaseIndex:
    # np.argmax returns the first maximum in row-major order, which is the
    # lexicographically smallest (p, q) on ties.
    flat = int(np.argmax(table))
    s = table.shape[1]
    return PolyphaseIndex(flat // s, flat % s)


def max_polyphase(x, s: int, p_norm: int = 2) -> PolyphaseIndex:
    """Index of the largest-norm polyphase; ties go to the smallest ``(p, q)``."""
    return _argmax_lex(polyphase_power_sums(x, s, p_norm))


def has_unique_max(x, s: int, p_norm: int = 2) -> bool:
    table = polyphase_power_sums(x, s, p_norm)
    return int(np.count_nonzero(table == table.max())) == 1


def anchor(x, s: int, p_norm: int = 2) -> AnchorResult:
    x = check_spatial(x)
    phase = max_polyphase(x, s, p_norm)
    return AnchorResult(circular_shift(x, (-phase.p, -phase.q)), phase, int(s))


def restore(r: AnchorResult) -> np.ndarray:
    return circular_shift(r.anchored, (r.phase.p, r.phase.q))


def anchor_batch(x, s: int, p_norm: int = 2):
    """Anchor each sample of ``x[B, ..., H, W]`` independently.

    Returns the anchored batch and an int array of phases shaped ``[B, 2]``.
    """
    x = check_spatial(x, 3)
    check_divisible(*x.shape[-2:], s)
    check_p_norm(p_norm)
    tables = power_sum_rows(_grouped(x, s), p_norm)
    flat = tables.reshape(x.shape[0], -1).argmax(axis=1)
    phases = np.stack([flat // s, flat % s], axis=1)
    return shift_batch(x, -phases), phases


def shift_batch(x, shifts) -> np.ndarray:
    """Circularly shift sample ``b`` of ``x`` by ``shifts[b]``."""
    out = np.empty_like(x)
    for b in range(x.shape[0]):
        out[b] = circular_shift(x[b], shifts[b])
    return out
