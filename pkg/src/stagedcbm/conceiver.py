"""Stage 2: encoder from the masked stack to property-concept predictions.

The conceiver trains exclusively on ground-truth-mask stacks and predicts
all d property concepts through sigmoid heads: BCE drives the binary
columns, MSE the scalar ones, padded entries included.  Two constant
coordinate channels are appended to the stack so the pooled features can
express where mass sits relative to the image midline (the symmetry
concepts need this).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .autodiff import Tensor
from .layers import ConvBlock, Linear, Module
from .losses import cross_entropy_loss, masked_bce_mse_loss
from .metrics import concept_metrics
from .observer import GROUND_TRUTH, MaskedStack
from .training import batched_forward, run_training
from .validation import ShapeMismatch, check_concept_matrix, check_labels


def stack_input(masked: MaskedStack) -> np.ndarray:
    """Flatten a masked stack to the (N, H, W, mu) conceiver input."""
    return masked.values


def add_coord_channels(x) -> np.ndarray:
    """Append normalized x/y coordinate planes as two extra channels."""
    n, h, w, _ = x.shape
    ys = np.linspace(-1.0, 1.0, h, dtype=x.dtype)
    xs = np.linspace(-1.0, 1.0, w, dtype=x.dtype)
    yy = np.broadcast_to(ys[:, None], (h, w))
    xx = np.broadcast_to(xs[None, :], (h, w))
    coords = np.stack([yy, xx], axis=-1)
    coords = np.broadcast_to(coords, (n, h, w, 2))
    return np.concatenate([x, coords], axis=-1)


class EncoderNet(Module):
    """Three stride-2 conv blocks, global average pooling, linear head."""

    def __init__(self, rng, in_channels, out_dim, widths=(24, 48, 96)):
        super().__init__()
        w1, w2, w3 = widths
        self.c1 = self.add_child("c1", ConvBlock(rng, in_channels, w1, stride=2))
        self.c2 = self.add_child("c2", ConvBlock(rng, w1, w2, stride=2))
        self.c3 = self.add_child("c3", ConvBlock(rng, w2, w3, stride=2))
        self.fc = self.add_child("fc", Linear(rng, w3, out_dim))

    def features(self, x: Tensor) -> Tensor:
        z = self.c3(self.c2(self.c1(x)))
        n, h, w, c = z.data.shape
        pooled = ad.reshape(ad.sum_axis(ad.sum_axis(z, 1), 1), (n, c))
        return ad.scale(pooled, 1.0 / (h * w))

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc(self.features(x))


class ConceptConceiver(BaseEstimator):
    """Masked stack -> concept vector regressor/classifier.

    ``binary_indices``/``scalar_indices`` select the loss per output head.
    fit() refuses stacks whose provenance is not ground truth unless
    ``allow_predicted_train`` is set (the CBM baseline trains on raw
    images wrapped in a stack with its own provenance tag).
    """

    def __init__(self, n_concepts=None, binary_indices=(), scalar_indices=(),
                 widths=(24, 48, 96), epochs=50, batch_size=64, lr=3e-4,
                 weight_decay=1e-6, lr_patience=10, seed=0, dtype="float64",
                 use_coords=True, allow_predicted_train=False):
        self.n_concepts = n_concepts
        self.binary_indices = binary_indices
        self.scalar_indices = scalar_indices
        self.widths = widths
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.lr_patience = lr_patience
        self.seed = seed
        self.dtype = dtype
        self.use_coords = use_coords
        self.allow_predicted_train = allow_predicted_train

    def _np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def _prep(self, stacks):
        x = stacks.values if isinstance(stacks, MaskedStack) else np.asarray(stacks)
        x = x.astype(self._np_dtype())
        if self.use_coords:
            x = add_coord_channels(x)
        return np.ascontiguousarray(x)

    def fit(self, stacks, C, stacks_val=None, C_val=None):
        if isinstance(stacks, MaskedStack) and not self.allow_predicted_train \
                and stacks.source != GROUND_TRUTH:
            raise ValueError(
                f"conceiver training requires ground-truth stacks, got "
                f"{stacks.source!r}")
        ad.DEFAULT_DTYPE = self._np_dtype()
        X = self._prep(stacks)
        d = self.n_concepts or np.asarray(C).shape[1]
        C = check_concept_matrix(C, d).astype(self._np_dtype())
        Xv = self._prep(stacks_val) if stacks_val is not None else X
        Cv = (check_concept_matrix(C_val, d).astype(self._np_dtype())
              if C_val is not None else C)

        bmask = np.zeros(d, dtype=bool)
        bmask[list(self.binary_indices)] = True
        smask = np.zeros(d, dtype=bool)
        smask[list(self.scalar_indices)] = True

        rng = np.random.default_rng(np.random.SeedSequence((self.seed, 23)))
        self.net_ = EncoderNet(rng, X.shape[-1], d, self.widths)
        self.n_concepts_ = d
        self.net_in_channels_ = X.shape[-1]

        def step(batch):
            pred = ad.sigmoid(self.net_(Tensor(X[batch])))
            return masked_bce_mse_loss(pred, C[batch], bmask, smask)

        def val_loss():
            total, n = 0.0, 0
            with ad.no_grad():
                for lo in range(0, len(Xv), 128):
                    sl = slice(lo, lo + 128)
                    pred = ad.sigmoid(self.net_(Tensor(Xv[sl])))
                    loss = masked_bce_mse_loss(pred, Cv[sl], bmask, smask)
                    bs = len(Cv[sl])
                    total += float(loss.data) * bs
                    n += bs
            return total / max(n, 1)

        self.history_ = run_training(
            self.net_, np.arange(len(X)), step, val_loss,
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            weight_decay=self.weight_decay, seed=self.seed,
            lr_patience=self.lr_patience)
        return self

    def predict(self, stacks) -> np.ndarray:
        """Concept predictions in (0, 1), schema order (N, d)."""
        X = self._prep(stacks)
        self.net_.train(False)
        out = batched_forward(
            lambda b: 1.0 / (1.0 + np.exp(-self.net_(Tensor(b)).data)), X,
            batch_size=128)
        return out.astype(np.float64)

    def score(self, stacks, C, applicability) -> dict:
        return concept_metrics(self.predict(stacks), C, applicability,
                               np.asarray(self.binary_indices, dtype=int),
                               np.asarray(self.scalar_indices, dtype=int))


class EncoderClassifier(BaseEstimator):
    """Classifier head directly on the masked stack (segmentation-only model)."""

    def __init__(self, n_classes=None, widths=(24, 48, 96), epochs=50,
                 batch_size=64, lr=3e-4, weight_decay=1e-6, lr_patience=10,
                 seed=0, dtype="float64", use_coords=True):
        self.n_classes = n_classes
        self.widths = widths
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.lr_patience = lr_patience
        self.seed = seed
        self.dtype = dtype
        self.use_coords = use_coords

    def _np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def _prep(self, stacks):
        x = stacks.values if isinstance(stacks, MaskedStack) else np.asarray(stacks)
        x = x.astype(self._np_dtype())
        if self.use_coords:
            x = add_coord_channels(x)
        return np.ascontiguousarray(x)

    def fit(self, stacks, y, stacks_val=None, y_val=None,
            train_index_list=None):
        ad.DEFAULT_DTYPE = self._np_dtype()
        X = self._prep(stacks)
        k = self.n_classes or int(np.max(y)) + 1
        y = check_labels(y, k)
        Xv = self._prep(stacks_val) if stacks_val is not None else X
        yv = check_labels(y_val, k) if y_val is not None else y
        rng = np.random.default_rng(np.random.SeedSequence((self.seed, 31)))
        self.net_ = EncoderNet(rng, X.shape[-1], k, self.widths)
        self.n_classes_ = k
        self.net_in_channels_ = X.shape[-1]
        indices = (np.asarray(train_index_list)
                   if train_index_list is not None else np.arange(len(X)))

        def step(batch):
            return cross_entropy_loss(self.net_(Tensor(X[batch])), y[batch])

        def val_loss():
            total, n = 0.0, 0
            with ad.no_grad():
                for lo in range(0, len(Xv), 128):
                    sl = slice(lo, lo + 128)
                    loss = cross_entropy_loss(self.net_(Tensor(Xv[sl])), yv[sl])
                    total += float(loss.data) * len(yv[sl])
                    n += len(yv[sl])
            return total / max(n, 1)

        self.history_ = run_training(
            self.net_, indices, step, val_loss,
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            weight_decay=self.weight_decay, seed=self.seed,
            lr_patience=self.lr_patience)
        return self

    def predict_proba(self, stacks) -> np.ndarray:
        X = self._prep(stacks)
        self.net_.train(False)

        def fwd(b):
            z = self.net_(Tensor(b)).data
            z = z - z.max(axis=1, keepdims=True)
            e = np.exp(z)
            return e / e.sum(axis=1, keepdims=True)

        return batched_forward(fwd, X, batch_size=128).astype(np.float64)

    def predict(self, stacks) -> np.ndarray:
        return np.argmax(self.predict_proba(stacks), axis=1)
