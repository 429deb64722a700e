"""Argument checks shared by the operators and estimators."""
from __future__ import annotations

import numpy as np

from .tensor import NumericError, ShapeError


def check_spatial(x, min_ndim: int = 2, name: str = "x") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < min_ndim:
        raise ShapeError(f"{name} needs at least {min_ndim} axes, got shape {x.shape}")
    return x


def check_divisible(h: int, w: int, s: int, what: str = "stride") -> None:
    if s < 1:
        raise ValueError(f"{what} must be positive, got {s}")
    if h % s or w % s:
        raise ShapeError(f"{what} {s} does not divide spatial size {h}x{w}")


def check_p_norm(p) -> int:
    if p not in (1, 2):
        raise ValueError(f"p_norm must be 1 or 2, got {p!r}")
    return int(p)


def check_finite(x, name: str = "x") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise NumericError(f"{name} contains non-finite values")
    return x


def check_images(X, n_channels=None, size=None) -> np.ndarray:
    """Validate a batch of images ``[n, C, H, W]`` (a single ``[C, H, W]`` is promoted)."""
    X = check_finite(X, "X")
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ShapeError(f"expected images shaped [n, C, H, W], got {X.shape}")
    if n_channels is not None and X.shape[1] != n_channels:
        raise ShapeError(f"expected {n_channels} channels, got {X.shape[1]}")
    if size is not None and tuple(X.shape[2:]) != tuple(size):
        raise ShapeError(f"expected spatial size {tuple(size)}, got {X.shape[2:]}")
    return X
