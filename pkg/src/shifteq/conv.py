"""Circularly padded convolutions (cross-correlation, no kernel flip).

Kernel alignment: an odd ``k`` is centred on the output pixel; an even ``k``
starts at it, so ``k == stride`` tiles the input into disjoint patches. The
accumulation order for every output entry is ``ky``, then ``kx``, then input
channel, each ascending; the reference loops in the tests use the same order.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .polyphase import PolyphaseIndex, anchor, anchor_batch
from .tensor import ShapeError, matmul
from .validation import check_divisible, check_spatial


@dataclass(frozen=True)
class ConvFilter:
    weights: np.ndarray  # [C_out, C_in, k, k]
    stride: int = 1
    bias: Optional[np.ndarray] = None  # [C_out]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ShapeError(f"conv weights must be [C_out, C_in, k, k], got {w.shape}")
        if self.stride < 1:
            raise ValueError(f"stride must be positive, got {self.stride}")
        if self.bias is not None and np.shape(self.bias) != (w.shape[0],):
            raise ShapeError(f"bias must have shape ({w.shape[0]},), got {np.shape(self.bias)}")
        object.__setattr__(self, "weights", w)

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[-1]


@dataclass(frozen=True)
class DepthwiseFilter:
    weights: np.ndarray  # [C, k, k]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 3 or w.shape[1] != w.shape[2]:
            raise ShapeError(f"depthwise weights must be [C, k, k], got {w.shape}")
        if w.shape[-1] % 2 == 0:
            raise ValueError(f"depthwise kernel size must be odd, got {w.shape[-1]}")
        object.__setattr__(self, "weights", w)


def kernel_offset(k: int) -> int:
    return k // 2 if k % 2 else 0


def _correlate(x: np.ndarray, w: np.ndarray, s: int, bias=None) -> np.ndarray:
    """Shared kernel: x ``[..., C_in, H, W]``, w ``[C_out, C_in, k, k]``."""
    c_out, c_in, k, _ = w.shape
    if x.shape[-3] != c_in:
        raise ShapeError(f"filter expects {c_in} input channels, got {x.shape[-3]}")
    h, wd = x.shape[-2:]
    if k > h or k > wd:
        raise ShapeError(f"kernel {k} larger than input {h}x{wd}")
    check_divisible(h, wd, s)
    off = kernel_offset(k)
    # rows[ky, i] = (s*i + ky - off) mod H, likewise for columns
    rows = (np.arange(0, h, s)[None, :] + np.arange(k)[:, None] - off) % h
    cols = (np.arange(0, wd, s)[None, :] + np.arange(k)[:, None] - off) % wd
    # gathered as [..., c, ky, kx, i, j]; reorder to [..., i, j, ky, kx, c] so the
    # flattened reduction axis runs (ky, kx, c)
    patches = x[..., :, rows[:, None, :, None], cols[None, :, None, :]]
    nd = patches.ndim
    patches = np.moveaxis(patches, (nd - 2, nd - 1, nd - 4, nd - 3, nd - 5), range(nd - 5, nd))
    ho, wo = h // s, wd // s
    cols_mat = patches.reshape(x.shape[:-3] + (ho * wo, k * k * c_in))
    kernel = w.transpose(2, 3, 1, 0).reshape(k * k * c_in, c_out)
    out = matmul(cols_mat, kernel)
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.float64)
    return np.moveaxis(out.reshape(x.shape[:-3] + (ho, wo, c_out)), -1, -3)


def conv2d_circular(x, f: ConvFilter) -> np.ndarray:
    """Stride-1 circular cross-correlation; output keeps the input's spatial size."""
    x = check_spatial(x, 3)
    return _correlate(x, f.weights, 1, f.bias)


def strided_conv(x, f: ConvFilter, s: Optional[int] = None) -> np.ndarray:
    """Circular cross-correlation evaluated only on the ``(0, 0)`` polyphase."""
    x = check_spatial(x, 3)
    s = f.stride if s is None else int(s)
    return _correlate(x, f.weights, s, f.bias)


def depthwise_conv_circular(x, f: DepthwiseFilter) -> np.ndarray:
    x = check_spatial(x, 3)
    w = f.weights
    c, k, _ = w.shape
    if x.shape[-3] != c:
        raise ShapeError(f"depthwise filter has {c} channels, input has {x.shape[-3]}")
    off = kernel_offset(k)
    acc = None
    for ky in range(k):
        for kx in range(k):
            term = np.roll(x, (off - ky, off - kx), axis=(-2, -1)) * w[:, ky, kx][:, None, None]
            acc = term if acc is None else acc + term
    return acc


def patch_embed_poly(x, f: ConvFilter, s: Optional[int] = None, p_norm: int = 2):
    """Anchor with stride ``s`` then apply the ``s``-strided convolution."""
    x = check_spatial(x, 3)
    s = f.stride if s is None else int(s)
    r = anchor(x, s, p_norm)
    return strided_conv(r.anchored, f, s), PolyphaseIndex(*r.phase)


def patch_embed_poly_batch(x, f: ConvFilter, s: Optional[int] = None, p_norm: int = 2):
    """Per-sample anchoring over ``x[B, C, H, W]``; returns outputs and ``[B, 2]`` phases."""
    s = f.stride if s is None else int(s)
    anchored, phases = anchor_batch(x, s, p_norm)
    return strided_conv(anchored, f, s), phases
