"""Stage 1: segmentation network plus the soft-masking that feeds stage 2.

The observer maps an image to per-pixel class probabilities.  Soft-masking
multiplies each probability plane with the image, producing one masked
copy of the image per segmentation concept; the conceiver never sees the
raw image, only this stack.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .autodiff import Tensor
from .layers import ConvBlock, ConvTranspose2d, Module
from .losses import dice_loss, weighted_focal_loss
from .metrics import iou_per_class, mean_foreground_iou
from .training import batched_forward, run_training
from .validation import ShapeMismatch, check_image_batch, check_mask_batch

GROUND_TRUTH = "ground-truth"
PREDICTED = "predicted"
USER = "user"


@dataclass
class MaskedStack:
    """Soft-masked image stack (N, H, W, n*m) with provenance.

    ``source`` records whether the masks came from ground truth, from the
    observer, or from a user override; the training/testing asymmetry
    checks key off it.
    """

    values: np.ndarray
    source: str

    @property
    def channels(self):
        return self.values.shape[-1]


def soft_mask(prob_map, image, source=PREDICTED) -> MaskedStack:
    """Per-concept soft masking: stack_i = p(class i | x) * x, channelwise.

    Channel order is segmentation-index major, image-channel minor.
    Linear in the map: scaling probabilities scales the stack.
    """
    p = np.asarray(prob_map)
    x = np.asarray(image)
    if x.ndim == 3:
        x = x[..., None]
    if p.shape[:3] != x.shape[:3]:
        raise ShapeMismatch("soft-mask", p.shape, x.shape)
    stack = p[..., :, None] * x[..., None, :]
    n, h, w = stack.shape[:3]
    return MaskedStack(stack.reshape(n, h, w, -1), source=source)


def one_hot_masks(masks, n_classes) -> np.ndarray:
    m = np.asarray(masks)
    return np.eye(n_classes, dtype=np.float64)[m]


class ObserverNet(Module):
    """Four-scale encoder-decoder with skip connections.

    Widths are the encoder channel counts per scale; the decoder mirrors
    the two middle scales and a final 2x transposed conv emits the class
    map at input resolution.
    """

    def __init__(self, rng, in_channels, n_classes, widths=(16, 32, 64, 128)):
        super().__init__()
        w1, w2, w3, w4 = widths
        self.enc1 = self.add_child("enc1", ConvBlock(rng, in_channels, w1))
        self.enc2 = self.add_child("enc2", ConvBlock(rng, w1, w2))
        self.enc3 = self.add_child("enc3", ConvBlock(rng, w2, w3))
        self.enc4 = self.add_child("enc4", ConvBlock(rng, w3, w4))
        self.up3 = self.add_child("up3", ConvTranspose2d(rng, w4, w3))
        self.dec3 = self.add_child("dec3", ConvBlock(rng, 2 * w3, w3))
        self.up2 = self.add_child("up2", ConvTranspose2d(rng, w3, w2))
        self.dec2 = self.add_child("dec2", ConvBlock(rng, 2 * w2, w2))
        self.head = self.add_child("head", ConvTranspose2d(rng, w2, n_classes))

    def __call__(self, x: Tensor) -> Tensor:
        a1 = self.enc1(x)
        a2 = self.enc2(ad.max_pool2d(a1))
        a3 = self.enc3(ad.max_pool2d(a2))
        a4 = self.enc4(ad.max_pool2d(a3))
        d3 = self.dec3(ad.concat([self.up3(a4), a3]))
        d2 = self.dec2(ad.concat([self.up2(d3), a2]))
        return ad.softmax(self.head(d2))


class SegmentationObserver(BaseEstimator):
    """Trainable observer stage with an sklearn-style surface.

    fit(X, y) expects images (N, H, W, m) in [-1, 1] and integer class
    maps (N, H, W).  The loss is loss_mix * dice + (1 - loss_mix) *
    weighted focal; class weights are inverse pixel frequencies clipped
    to ``weight_clip``.  The model keeps its best validation epoch.
    """

    def __init__(self, n_classes=None, widths=(16, 32, 64, 128), epochs=30,
                 batch_size=8, lr=1e-4, weight_decay=1e-6, loss_mix=0.5,
                 focal_gamma=2.0, weight_clip=(0.5, 20.0), lr_patience=10,
                 seed=0, dtype="float64"):
        self.n_classes = n_classes
        self.widths = widths
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.loss_mix = loss_mix
        self.focal_gamma = focal_gamma
        self.weight_clip = weight_clip
        self.lr_patience = lr_patience
        self.seed = seed
        self.dtype = dtype

    def _np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def fit(self, X, y, X_val=None, y_val=None):
        ad.DEFAULT_DTYPE = self._np_dtype()
        X = check_image_batch(X).astype(self._np_dtype())
        n_cls = self.n_classes or int(np.max(y)) + 1
        y = check_mask_batch(y, n_cls)
        if X_val is None:
            X_val, y_val = X, y
        else:
            X_val = check_image_batch(X_val).astype(self._np_dtype())
            y_val = check_mask_batch(y_val, n_cls)

        freq = np.bincount(y.reshape(-1), minlength=n_cls) / y.size
        weights = 1.0 / np.maximum(freq, 1e-6) / n_cls
        self.class_weights_ = np.clip(weights, *self.weight_clip)

        rng = np.random.default_rng(np.random.SeedSequence((self.seed, 11)))
        self.net_ = ObserverNet(rng, X.shape[-1], n_cls, self.widths)
        self.n_classes_ = n_cls
        self.net_in_channels_ = X.shape[-1]
        onehot = np.eye(n_cls, dtype=self._np_dtype())

        def step(batch):
            probs = self.net_(Tensor(X[batch]))
            tgt = onehot[y[batch]]
            return (dice_loss(probs, tgt) * self.loss_mix
                    + weighted_focal_loss(probs, tgt, self.class_weights_,
                                          self.focal_gamma) * (1.0 - self.loss_mix))

        def val_loss():
            total, n = 0.0, 0
            with ad.no_grad():
                for lo in range(0, len(X_val), 32):
                    sl = slice(lo, lo + 32)
                    probs = self.net_(Tensor(X_val[sl]))
                    tgt = onehot[y_val[sl]]
                    loss = (dice_loss(probs, tgt) * self.loss_mix
                            + weighted_focal_loss(probs, tgt, self.class_weights_,
                                                  self.focal_gamma)
                            * (1.0 - self.loss_mix))
                    bs = len(tgt)
                    total += float(loss.data) * bs
                    n += bs
            return total / max(n, 1)

        self.history_ = run_training(
            self.net_, np.arange(len(X)), step, val_loss,
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            weight_decay=self.weight_decay, seed=self.seed,
            lr_patience=self.lr_patience)
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Per-pixel class probabilities (N, H, W, n); rows sum to one."""
        X = check_image_batch(X).astype(self._np_dtype())
        self.net_.train(False)
        return batched_forward(lambda b: self.net_(Tensor(b)).data, X,
                               batch_size=16).astype(np.float64)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=-1).astype(np.uint8)

    def score(self, X, y) -> float:
        """Mean foreground IoU of argmax predictions."""
        return mean_foreground_iou(self.predict(X), np.asarray(y), self.n_classes_)

    def iou_report(self, X, y) -> np.ndarray:
        return iou_per_class(self.predict(X), np.asarray(y), self.n_classes_)
