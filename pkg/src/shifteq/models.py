"""Toy end-to-end classifiers assembled from the operators.

Four variants share one weight-generation scheme:

``vit``        plain strided patch embedding, absolute positional table,
               global self-attention blocks.
``vit_poly``   anchored patch embedding, circular depthwise positional
               encoding, global self-attention blocks.
``twins``      plain embedding, alternating window-attention / GSA blocks.
``twins_poly`` anchored embedding and anchored window-attention / GSA blocks.

All variants end in a layer norm, global average pooling over the token grid
and a linear head. Weights are random (normal, std 0.02); nothing is trained.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.special import erf

from . import attention as att
from .conv import ConvFilter, DepthwiseFilter, depthwise_conv_circular, patch_embed_poly_batch, strided_conv
from .polyphase import anchor_batch, shift_batch
from .tensor import Rng, ShapeError, matmul, rng_normal
from .validation import check_images

VARIANTS = ("vit", "vit_poly", "twins", "twins_poly")
POS_ENCODINGS = ("absolute", "depthwise_circular", "none")
INIT_STD = 0.02
PE_KERNEL = 3
LN_EPS = 1e-5


@dataclass
class ModelSpec:
    """Declarative model description; also the JSON config schema (field names verbatim).

    ``pos_encoding=None`` resolves to ``absolute`` for ``vit`` and to
    ``depthwise_circular`` for every other variant. In the Twins variants
    ``depth`` counts [window-attention, GSA] block pairs and the GSA
    subsampling stride equals ``window``.
    """

    variant: str = "vit_poly"
    image: Tuple[int, int, int] = (3, 32, 32)
    patch_stride: int = 4
    embed_dim: int = 16
    depth: int = 2
    window: int = 2
    mlp_dim: int = 32
    pos_encoding: Optional[str] = None
    classes: int = 10
    seed: int = 0
    p_norm: int = 2
    restore_mode: bool = True

    def __post_init__(self):
        self.image = tuple(int(v) for v in self.image)
        if self.pos_encoding is None:
            self.pos_encoding = "absolute" if self.variant == "vit" else "depthwise_circular"
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.pos_encoding not in POS_ENCODINGS:
            raise ValueError(f"unknown pos_encoding {self.pos_encoding!r}")
        if len(self.image) != 3 or min(self.image) < 1:
            raise ValueError(f"image must be (C, H, W) with positive entries, got {self.image}")
        for name in ("patch_stride", "embed_dim", "window", "mlp_dim", "classes"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.depth < 0:
            raise ValueError("depth must be non-negative")
        if self.p_norm not in (1, 2):
            raise ValueError(f"p_norm must be 1 or 2, got {self.p_norm}")
        _, h, w = self.image
        s = self.patch_stride
        if h % s or w % s:
            raise ValueError(f"patch stride {s} does not divide image {h}x{w}")
        if self.is_twins and ((h // s) % self.window or (w // s) % self.window):
            raise ValueError(f"window {self.window} does not divide token grid {h // s}x{w // s}")

    @property
    def is_poly(self) -> bool:
        return self.variant.endswith("_poly")

    @property
    def is_twins(self) -> bool:
        return self.variant.startswith("twins")

    @property
    def grid(self) -> Tuple[int, int]:
        return self.image[1] // self.patch_stride, self.image[2] // self.patch_stride

    def block_kinds(self) -> List[str]:
        if self.is_twins:
            return ["window", "gsa"] * self.depth
        return ["global"] * self.depth

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["image"] = list(self.image)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown ModelSpec fields: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class ModelWeights:
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> List[str]:
        return list(self.tensors)


def layer_norm(X, gamma, beta, eps: float = LN_EPS) -> np.ndarray:
    """Normalize each token (last axis) then apply the affine map."""
    X = np.asarray(X, dtype=np.float64)
    mu = X.mean(axis=-1, keepdims=True)
    c = X - mu
    var = (c * c).mean(axis=-1, keepdims=True)
    return c / np.sqrt(var + eps) * gamma + beta


def gelu(x) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def relu(x) -> np.ndarray:
    return np.maximum(x, 0.0)


_ACTIVATIONS = {"gelu": gelu, "relu": relu}


def mlp_block(X, W1, b1, W2, b2, activation="gelu") -> np.ndarray:
    """Row-wise two-layer feed-forward map ``phi(X W1 + b1) W2 + b2``."""
    phi = _ACTIVATIONS[activation] if isinstance(activation, str) else activation
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != np.shape(W1)[0] or np.shape(W1)[1] != np.shape(W2)[0]:
        raise ShapeError(f"MLP shapes do not chain: X{X.shape} W1{np.shape(W1)} W2{np.shape(W2)}")
    return matmul(phi(matmul(X, W1) + b1), W2) + b2


# --------------------------------------------------------------------------
# Weights
# --------------------------------------------------------------------------

def weight_shapes(spec: ModelSpec) -> Dict[str, Tuple[int, ...]]:
    """Every weight tensor name and shape, in generation order."""
    c = spec.image[0]
    d, s, hid = spec.embed_dim, spec.patch_stride, spec.mlp_dim
    hp, wp = spec.grid
    shapes: Dict[str, Tuple[int, ...]] = {
        "embed.weight": (d, c, s, s),
        "embed.bias": (d,),
    }
    if spec.pos_encoding == "absolute":
        shapes["pos.table"] = (d, hp, wp)
    elif spec.pos_encoding == "depthwise_circular":
        shapes["pos.depthwise"] = (d, PE_KERNEL, PE_KERNEL)
    for i, kind in enumerate(spec.block_kinds()):
        pre = f"blocks.{i}"
        shapes[f"{pre}.ln1.gamma"] = (d,)
        shapes[f"{pre}.ln1.beta"] = (d,)
        shapes[f"{pre}.attn.wq"] = (d, d)
        shapes[f"{pre}.attn.wk"] = (d, d)
        shapes[f"{pre}.attn.wv"] = (d, d)
        if kind == "gsa":
            shapes[f"{pre}.attn.sub.weight"] = (d, d, spec.window, spec.window)
            shapes[f"{pre}.attn.sub.bias"] = (d,)
        shapes[f"{pre}.ln2.gamma"] = (d,)
        shapes[f"{pre}.ln2.beta"] = (d,)
        shapes[f"{pre}.mlp.w1"] = (d, hid)
        shapes[f"{pre}.mlp.b1"] = (hid,)
        shapes[f"{pre}.mlp.w2"] = (hid, d)
        shapes[f"{pre}.mlp.b2"] = (d,)
    shapes["norm.gamma"] = (d,)
    shapes["norm.beta"] = (d,)
    shapes["head.weight"] = (d, spec.classes)
    shapes["head.bias"] = (spec.classes,)
    return shapes


def build_model(spec: ModelSpec) -> ModelWeights:
    """Deterministic weights: matrices ~ N(0, 0.02^2); biases 0; norm gains 1.

    Each tensor draws from its own stream keyed by ``(seed, name)``, so two
    variants with the same seed share every tensor they have in common.
    """
    spec.validate()
    root = Rng(spec.seed)
    tensors = {}
    for name, shape in weight_shapes(spec).items():
        if name.endswith("gamma"):
            tensors[name] = np.ones(shape)
        elif name.rsplit(".", 1)[-1] in ("beta", "bias", "b1", "b2"):
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = INIT_STD * rng_normal(root.child(name), shape)
    return ModelWeights(tensors)


# --------------------------------------------------------------------------
# Forward pass
# --------------------------------------------------------------------------

def _grid_ln(t, gamma, beta) -> np.ndarray:
    # layer norm over the channel axis of a [B, d, H, W] grid
    return np.moveaxis(layer_norm(np.moveaxis(t, 1, -1), gamma, beta), -1, 1)


def _block_attention(spec: ModelSpec, W: ModelWeights, pre: str, kind: str, t, u):
    """Return ``(t, a)``: the (possibly re-anchored) residual stream and the attention output."""
    theta = att.AttentionParams(W[f"{pre}.attn.wq"], W[f"{pre}.attn.wk"], W[f"{pre}.attn.wv"])
    if kind == "global":
        h, w = t.shape[-2:]
        return t, att.tokens_to_image(att.self_attention(att.image_to_tokens(u), theta), h, w)
    if kind == "window":
        stride = spec.window
        op = lambda a: att.window_attention(a, stride, theta)
    else:
        stride = spec.window
        sub = ConvFilter(W[f"{pre}.attn.sub.weight"], stride, W[f"{pre}.attn.sub.bias"])
        op = lambda a: att.gsa(a, stride, sub, theta)
    if not spec.is_poly:
        return t, op(u)
    anchored, phases = anchor_batch(u, stride, spec.p_norm)
    a = op(anchored)
    if spec.restore_mode:
        return t, shift_batch(a, phases)
    # without restore the whole residual stream moves onto the anchor grid
    return shift_batch(t, -phases), a


def forward_batch(spec: ModelSpec, weights: ModelWeights, X):
    """Run ``X[B, C, H, W]``; returns logits ``[B, classes]`` and feature maps ``[B, d, h, w]``."""
    X = check_images(X, spec.image[0], spec.image[1:])
    W = weights
    s = spec.patch_stride
    embed = ConvFilter(W["embed.weight"], s, W["embed.bias"])
    if spec.is_poly:
        t, _ = patch_embed_poly_batch(X, embed, s, spec.p_norm)
    else:
        t = strided_conv(X, embed, s)
    features = [t]
    if spec.pos_encoding == "absolute":
        t = att.abs_pos_embed(t, W["pos.table"])
        features.append(t)
    elif spec.pos_encoding == "depthwise_circular":
        t = t + depthwise_conv_circular(t, DepthwiseFilter(W["pos.depthwise"]))
        features.append(t)
    for i, kind in enumerate(spec.block_kinds()):
        pre = f"blocks.{i}"
        u = _grid_ln(t, W[f"{pre}.ln1.gamma"], W[f"{pre}.ln1.beta"])
        t, a = _block_attention(spec, W, pre, kind, t, u)
        t = t + a
        u = np.moveaxis(_grid_ln(t, W[f"{pre}.ln2.gamma"], W[f"{pre}.ln2.beta"]), 1, -1)
        m = mlp_block(u, W[f"{pre}.mlp.w1"], W[f"{pre}.mlp.b1"], W[f"{pre}.mlp.w2"], W[f"{pre}.mlp.b2"])
        t = t + np.moveaxis(m, -1, 1)
        features.append(t)
    tokens = att.image_to_tokens(_grid_ln(t, W["norm.gamma"], W["norm.beta"]))
    pooled = tokens.mean(axis=-2)
    logits = matmul(pooled[:, None, :], W["head.weight"])[:, 0, :] + W["head.bias"]
    return logits, features


def forward(spec: ModelSpec, weights: ModelWeights, x):
    """Single image ``[C, H, W]`` -> ``(logits[classes], [feature maps [d, h, w]])``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"forward expects one image [C, H, W], got {x.shape}")
    logits, feats = forward_batch(spec, weights, x[None])
    return logits[0], [f[0] for f in feats]


def predict(spec: ModelSpec, weights: ModelWeights, x) -> int:
    """Argmax of the logits; the smallest index wins ties."""
    logits, _ = forward(spec, weights, x)
    return int(np.argmax(logits))


class Model:
    """A built ``(spec, weights)`` pair; the callable form the harness consumes."""

    def __init__(self, spec: ModelSpec, weights: Optional[ModelWeights] = None):
        self.spec = spec
        self.weights = build_model(spec) if weights is None else weights

    def logits(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 3:
            return forward_batch(self.spec, self.weights, X[None])[0][0]
        return forward_batch(self.spec, self.weights, X)[0]

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.logits(X), axis=-1)

    def features(self, x) -> List[np.ndarray]:
        return forward(self.spec, self.weights, x)[1]

    def __repr__(self):
        return f"Model({self.spec.variant}, seed={self.spec.seed})"
