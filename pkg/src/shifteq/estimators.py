"""scikit-learn style wrappers around the anchoring operator and the toy models."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .models import ModelSpec, build_model, forward_batch
from .polyphase import anchor_batch
from .validation import check_divisible, check_images, check_p_norm, check_spatial


class PolyphaseAnchor(TransformerMixin, BaseEstimator):
    """Stateless transformer: circularly shift each sample onto its max-norm polyphase.

    ``X`` is ``[n_samples, ..., H, W]``; each sample is anchored on its own.
    """

    def __init__(self, stride=2, p_norm=2):
        self.stride = stride
        self.p_norm = p_norm

    def fit(self, X, y=None):
        X = check_spatial(X, 3, "X")
        check_p_norm(self.p_norm)
        check_divisible(*X.shape[-2:], self.stride)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        return anchor_batch(check_spatial(X, 3, "X"), self.stride, self.p_norm)[0]

    def phases(self, X):
        """``[n_samples, 2]`` polyphase indices that ``transform`` would shift away."""
        return anchor_batch(check_spatial(X, 3, "X"), self.stride, self.p_norm)[1]


class ShiftEquivariantClassifier(ClassifierMixin, BaseEstimator):
    """Randomly initialised ViT / Twins-style classifier (no training).

    ``fit`` only reads the image shape from ``X`` and generates the weights
    from ``seed``; labels are ignored. The ``*_poly`` variants produce logits
    that are invariant to every circular shift of the input.
    """

    def __init__(self, variant="vit_poly", patch_stride=4, embed_dim=16, depth=2, window=2,
                 mlp_dim=32, pos_encoding=None, n_classes=10, seed=0, p_norm=2,
                 restore_mode=True):
        self.variant = variant
        self.patch_stride = patch_stride
        self.embed_dim = embed_dim
        self.depth = depth
        self.window = window
        self.mlp_dim = mlp_dim
        self.pos_encoding = pos_encoding
        self.n_classes = n_classes
        self.seed = seed
        self.p_norm = p_norm
        self.restore_mode = restore_mode

    def fit(self, X, y=None):
        X = check_images(X)
        self.spec_ = ModelSpec(
            variant=self.variant, image=X.shape[1:], patch_stride=self.patch_stride,
            embed_dim=self.embed_dim, depth=self.depth, window=self.window,
            mlp_dim=self.mlp_dim, pos_encoding=self.pos_encoding, classes=self.n_classes,
            seed=self.seed, p_norm=self.p_norm, restore_mode=self.restore_mode,
        )
        self.weights_ = build_model(self.spec_)
        self.classes_ = np.arange(self.n_classes)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "weights_")
        X = check_images(X, self.spec_.image[0], self.spec_.image[1:])
        return forward_batch(self.spec_, self.weights_, X)[0]

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def transform(self, X):
        """Final token-grid feature maps ``[n, embed_dim, h, w]``."""
        check_is_fitted(self, "weights_")
        X = check_images(X, self.spec_.image[0], self.spec_.image[1:])
        return forward_batch(self.spec_, self.weights_, X)[1][-1]

    # harness protocol
    def logits(self, X):
        X = np.asarray(X, dtype=np.float64)
        return self.decision_function(X)[0] if X.ndim == 3 else self.decision_function(X)

    def features(self, x):
        check_is_fitted(self, "weights_")
        return [f[0] for f in forward_batch(self.spec_, self.weights_, np.asarray(x)[None])[1]]

    @property
    def spec(self):
        return self.spec_
