"""Single-head attention operators on token matrices and token grids.

Grids are ``[..., C, H, W]``; each pixel is one token of width ``C``.
Tokens are flattened in row-major order wherever a grid (or a window of it)
becomes a matrix.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .conv import ConvFilter, strided_conv
from .polyphase import PolyphaseIndex, anchor, anchor_batch, shift_batch
from .tensor import ShapeError, circular_shift, matmul, softmax_rows
from .validation import check_divisible, check_spatial


@dataclass(frozen=True)
class AttentionParams:
    Wq: np.ndarray  # [d, d_k]
    Wk: np.ndarray  # [d, d_k]
    Wv: np.ndarray  # [d, d_v]

    def __post_init__(self):
        for name in ("Wq", "Wk", "Wv"):
            m = np.asarray(getattr(self, name), dtype=np.float64)
            if m.ndim != 2 or min(m.shape) < 1:
                raise ShapeError(f"{name} must be a non-empty matrix, got {m.shape}")
            object.__setattr__(self, name, m)
        if self.Wq.shape != self.Wk.shape:
            raise ShapeError(f"Wq {self.Wq.shape} and Wk {self.Wk.shape} differ")
        if self.Wv.shape[0] != self.Wq.shape[0]:
            raise ShapeError("Wv must take the same token width as Wq")

    @property
    def d(self) -> int:
        return self.Wq.shape[0]

    @property
    def d_k(self) -> int:
        return self.Wq.shape[1]

    @property
    def d_v(self) -> int:
        return self.Wv.shape[1]


@dataclass(frozen=True)
class RelBias:
    """Additive attention-logit bias ``B`` of shape ``[n, n]``.

    ``structure="circulant"`` is verified on construction: ``B[i, j]`` must
    depend only on ``(i - j) mod n``.
    """

    B: np.ndarray
    structure: str = "free"

    def __post_init__(self):
        B = np.asarray(self.B, dtype=np.float64)
        if B.ndim != 2 or B.shape[0] != B.shape[1]:
            raise ShapeError(f"bias must be square, got {B.shape}")
        if self.structure not in ("free", "circulant"):
            raise ValueError(f"unknown bias structure {self.structure!r}")
        if self.structure == "circulant":
            n = B.shape[0]
            idx = (np.arange(n)[:, None] - np.arange(n)[None, :]) % n
            if not np.array_equal(B, B[idx, 0]):
                raise ValueError("bias tagged circulant is not circulant")
        object.__setattr__(self, "B", B)

    @classmethod
    def circulant(cls, b) -> "RelBias":
        b = np.asarray(b, dtype=np.float64)
        n = b.shape[0]
        idx = (np.arange(n)[:, None] - np.arange(n)[None, :]) % n
        return cls(b[idx], "circulant")

    @classmethod
    def basis_pair(cls, n: int) -> "RelBias":
        """Zero bias except ones at (0, 0) and (1, 1)."""
        B = np.zeros((n, n))
        B[0, 0] = B[1, 1] = 1.0
        return cls(B, "free")


@dataclass(frozen=True)
class WindowSpec:
    w: int
    grid: Optional[tuple] = None

    def for_shape(self, h: int, wd: int) -> "WindowSpec":
        check_divisible(h, wd, self.w, "window size")
        return WindowSpec(self.w, (h // self.w, wd // self.w))


def image_to_tokens(x) -> np.ndarray:
    """``[..., C, H, W]`` -> ``[..., H*W, C]``."""
    x = np.asarray(x)
    c, h, w = x.shape[-3:]
    return np.moveaxis(x, -3, -1).reshape(x.shape[:-3] + (h * w, c))


def tokens_to_image(t, h: int, w: int) -> np.ndarray:
    """``[..., H*W, C]`` -> ``[..., C, H, W]``."""
    t = np.asarray(t)
    return np.moveaxis(t.reshape(t.shape[:-2] + (h, w, t.shape[-1])), -1, -3)


def _attend(q, k, v, scale: bool, bias=None) -> np.ndarray:
    logits = matmul(q, np.swapaxes(k, -1, -2))
    if scale:
        logits = logits / math.sqrt(q.shape[-1])
    if bias is not None:
        logits = logits + bias
    return matmul(softmax_rows(logits), v)


def _check_width(X, theta: AttentionParams) -> None:
    if X.shape[-1] != theta.d:
        raise ShapeError(f"token width {X.shape[-1]} does not match params d={theta.d}")


def self_attention(X, theta: AttentionParams, scale: bool = False) -> np.ndarray:
    """``SoftMax(X Wq (X Wk)^T) X Wv`` over ``X[..., N, d]``; unscaled by default."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim < 2:
        raise ShapeError(f"tokens must be [N, d], got {X.shape}")
    _check_width(X, theta)
    return _attend(*_project(X, theta), scale)


def _project(X, theta: AttentionParams):
    # one fused product; each column is computed exactly as in a separate matmul
    qkv = matmul(X, np.concatenate([theta.Wq, theta.Wk, theta.Wv], axis=1))
    dk = theta.d_k
    return qkv[..., :dk], qkv[..., dk : 2 * dk], qkv[..., 2 * dk :]


def attention_with_bias(X, theta: AttentionParams, B: RelBias, scale: bool = True) -> np.ndarray:
    """Self-attention with an additive logit bias, ``SoftMax(QK^T/sqrt(d_k) + B) V``."""
    X = np.asarray(X, dtype=np.float64)
    _check_width(X, theta)
    n = X.shape[-2]
    if B.B.shape != (n, n):
        raise ShapeError(f"bias shape {B.B.shape} does not match {n} tokens")
    return _attend(*_project(X, theta), scale, B.B)


def _window_size(spec) -> int:
    return spec.w if isinstance(spec, WindowSpec) else int(spec)


def window_attention(x, spec, theta: AttentionParams, scale: bool = False) -> np.ndarray:
    """Self-attention inside each non-overlapping ``w x w`` window of ``x[..., C, H, W]``."""
    x = check_spatial(x, 3)
    w = _window_size(spec)
    c, h, wd = x.shape[-3:]
    check_divisible(h, wd, w, "window size")
    if c != theta.d:
        raise ShapeError(f"{c} channels but params expect d={theta.d}")
    lead = x.shape[:-3]
    nh, nw = h // w, wd // w
    # [..., C, nh, w, nw, w] -> [..., nh, nw, w, w, C] -> [..., nh, nw, w*w, C]
    blocks = x.reshape(lead + (c, nh, w, nw, w))
    n = len(lead)
    blocks = blocks.transpose(tuple(range(n)) + (n + 1, n + 3, n + 2, n + 4, n))
    tokens = blocks.reshape(lead + (nh, nw, w * w, c))
    out = self_attention(tokens, theta, scale)
    dv = out.shape[-1]
    out = out.reshape(lead + (nh, nw, w, w, dv))
    out = out.transpose(tuple(range(n)) + (n + 4, n, n + 2, n + 1, n + 3))
    return np.ascontiguousarray(out.reshape(lead + (dv, h, wd)))


def gsa(x, s: int, h: ConvFilter, theta: AttentionParams, scale: bool = False) -> np.ndarray:
    """Global subsampled attention: queries from every token, keys/values from ``h *_s x``."""
    x = check_spatial(x, 3)
    c, hh, ww = x.shape[-3:]
    check_divisible(hh, ww, s)
    if h.stride != s:
        raise ValueError(f"subsampling filter stride {h.stride} differs from s={s}")
    if c != theta.d:
        raise ShapeError(f"{c} channels but params expect d={theta.d}")
    tokens = image_to_tokens(x)
    sub = image_to_tokens(strided_conv(x, h, s))
    _check_width(sub, theta)
    out = _attend(matmul(tokens, theta.Wq), matmul(sub, theta.Wk), matmul(sub, theta.Wv), scale)
    return tokens_to_image(out, hh, ww)


def abs_pos_embed(x, E) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    E = np.asarray(E, dtype=np.float64)
    if x.shape[-E.ndim :] != E.shape:
        raise ShapeError(f"positional table {E.shape} does not match input {x.shape}")
    return x + E


def _poly(op, x, s: int, p_norm: int, restore: bool):
    """Anchor, apply ``op``, optionally undo the anchoring shift on the output.

    A single grid ``[C, H, W]`` yields a ``PolyphaseIndex``; a batch
    ``[B, C, H, W]`` is anchored per sample and yields ``[B, 2]`` phases.
    """
    x = check_spatial(x, 3)
    if x.ndim == 3:
        r = anchor(x, s, p_norm)
        out = op(r.anchored)
        if restore:
            out = circular_shift(out, r.phase)
        return out, PolyphaseIndex(*r.phase)
    anchored, phases = anchor_batch(x, s, p_norm)
    out = op(anchored)
    if restore:
        out = shift_batch(out, phases)
    return out, phases


def window_attention_poly(x, spec, theta: AttentionParams, p_norm: int = 2,
                          restore: bool = False, scale: bool = False):
    w = _window_size(spec)
    return _poly(lambda a: window_attention(a, w, theta, scale), x, w, p_norm, restore)


def gsa_poly(x, s: int, h: ConvFilter, theta: AttentionParams, p_norm: int = 2,
             restore: bool = False, scale: bool = False):
    return _poly(lambda a: gsa(a, s, h, theta, scale), x, s, p_norm, restore)
