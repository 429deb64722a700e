"""Shift-equivariant vision-transformer building blocks and an equivariance audit harness."""

__version__ = "0.1.0"

from .tensor import (  # noqa: E402
    NumericError,
    Rng,
    ShapeError,
    Shift2D,
    circular_shift,
    lp_norm,
    matmul,
    rng_lattice,
    rng_normal,
    softmax_rows,
)
from .polyphase import AnchorResult, PolyphaseIndex, anchor, max_polyphase, polyphase_extract, restore  # noqa: E402
from .conv import (  # noqa: E402
    ConvFilter,
    DepthwiseFilter,
    conv2d_circular,
    depthwise_conv_circular,
    patch_embed_poly,
    strided_conv,
)
from .attention import (  # noqa: E402
    AttentionParams,
    RelBias,
    WindowSpec,
    abs_pos_embed,
    attention_with_bias,
    gsa,
    gsa_poly,
    self_attention,
    window_attention,
    window_attention_poly,
)
from .models import Model, ModelSpec, ModelWeights, build_model, forward, layer_norm, mlp_block, predict  # noqa: E402
from .estimators import PolyphaseAnchor, ShiftEquivariantClassifier  # noqa: E402
