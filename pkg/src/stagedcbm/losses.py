"""Loss functions recorded on the autodiff tape.

All losses are mean-reduced scalars.  Probability inputs are clamped to
``[1e-7, 1 - 1e-7]`` before any log or division, so no loss ever returns
NaN on valid inputs.  Spatial arguments are channels-last (N, H, W, n).
"""

from __future__ import annotations

import numpy as np

from .autodiff import EPS_CLAMP, Tensor, _make
from .validation import ShapeMismatch


def dice_loss(pred: Tensor, target: np.ndarray, smooth=1.0) -> Tensor:
    """1 - mean over classes of (2*overlap + s) / (pred_sum + target_sum + s).

    ``pred`` holds per-pixel class probabilities (N, H, W, n); ``target`` is
    a one-hot array of the same shape.  Sums run over batch and space, so
    the result lies in [0, 1].
    """
    if pred.data.shape != target.shape:
        raise ShapeMismatch("dice", pred.data.shape, target.shape)
    target = target.astype(pred.data.dtype, copy=False)
    axes = (0, 1, 2)
    overlap = (pred.data * target).sum(axis=axes)
    num = 2.0 * overlap + smooth
    den = pred.data.sum(axis=axes) + target.sum(axis=axes) + smooth
    n_cls = pred.data.shape[-1]
    loss = 1.0 - (num / den).mean()

    def bwd(g):
        # d dice_c / d pred = (2*target*den - num) / den^2, mean over classes
        coeff = g / n_cls
        pred._accumulate(-coeff * (2.0 * target * den - num) / (den * den))

    return _make(np.asarray(loss, dtype=pred.data.dtype), (pred,), bwd)


def weighted_focal_loss(pred: Tensor, target: np.ndarray, class_weights,
                        gamma=2.0) -> Tensor:
    """Mean over pixels of -w_class * (1 - p_true)^gamma * log(p_true).

    With gamma == 0 and unit weights this reduces to pixel cross-entropy.
    """
    if pred.data.shape != target.shape:
        raise ShapeMismatch("focal", pred.data.shape, target.shape)
    target = target.astype(pred.data.dtype, copy=False)
    w = np.asarray(class_weights, dtype=pred.data.dtype)
    if w.shape != (pred.data.shape[-1],):
        raise ShapeMismatch("focal-weights", w.shape, (pred.data.shape[-1],))

    # p_true per pixel: probability assigned to the target class
    p = np.clip((pred.data * target).sum(axis=-1), EPS_CLAMP, 1.0 - EPS_CLAMP)
    wmap = (target * w).sum(axis=-1)
    focus = (1.0 - p) ** gamma
    logp = np.log(p)
    n_pix = p.size
    loss = (-wmap * focus * logp).sum() / n_pix

    def bwd(g):
        # d/dp [-w (1-p)^g log p] = w*g*(1-p)^(g-1)*log p - w*(1-p)^g / p
        if gamma == 0.0:
            dp = -wmap / p
        else:
            dp = wmap * (gamma * (1.0 - p) ** (gamma - 1.0) * logp - focus / p)
        pred._accumulate(target * (g * dp / n_pix)[..., None])

    return _make(np.asarray(loss, dtype=pred.data.dtype), (pred,), bwd)


def bce_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Binary cross entropy, mean over all entries; inputs clamped."""
    if pred.data.shape != target.shape:
        raise ShapeMismatch("bce", pred.data.shape, target.shape)
    target = target.astype(pred.data.dtype, copy=False)
    p = np.clip(pred.data, EPS_CLAMP, 1.0 - EPS_CLAMP)
    n = p.size
    loss = -(target * np.log(p) + (1.0 - target) * np.log(1.0 - p)).sum() / n

    def bwd(g):
        pred._accumulate(g * (p - target) / (p * (1.0 - p)) / n)

    return _make(np.asarray(loss, dtype=pred.data.dtype), (pred,), bwd)


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    if pred.data.shape != target.shape:
        raise ShapeMismatch("mse", pred.data.shape, target.shape)
    target = target.astype(pred.data.dtype, copy=False)
    diff = pred.data - target
    n = diff.size
    loss = (diff ** 2).sum() / n

    def bwd(g):
        pred._accumulate(g * 2.0 * diff / n)

    return _make(np.asarray(loss, dtype=pred.data.dtype), (pred,), bwd)


def masked_bce_mse_loss(pred: Tensor, target: np.ndarray, binary_mask,
                        scalar_mask) -> Tensor:
    """BCE over binary columns plus MSE over scalar columns of (N, d) output.

    Each term is mean-reduced over its own entries; the two means are
    summed.  Padded entries stay in the loss (their targets are 0).
    """
    target = target.astype(pred.data.dtype, copy=False)
    bm = np.asarray(binary_mask, dtype=bool)
    sm = np.asarray(scalar_mask, dtype=bool)
    n = pred.data.shape[0]
    p = np.clip(pred.data, EPS_CLAMP, 1.0 - EPS_CLAMP)
    total = 0.0
    grads = np.zeros_like(pred.data)
    if bm.any():
        cols = np.where(bm)[0]
        cnt = n * len(cols)
        pm, tm = p[:, cols], target[:, cols]
        total += -(tm * np.log(pm) + (1 - tm) * np.log(1 - pm)).sum() / cnt
        grads[:, cols] = (pm - tm) / (pm * (1 - pm)) / cnt
    if sm.any():
        cols = np.where(sm)[0]
        cnt = n * len(cols)
        diff = pred.data[:, cols] - target[:, cols]
        total += (diff ** 2).sum() / cnt
        grads[:, cols] = 2.0 * diff / cnt

    def bwd(g):
        pred._accumulate(g * grads)

    return _make(np.asarray(total, dtype=pred.data.dtype), (pred,), bwd)


def cross_entropy_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Softmax cross entropy from logits (N, K) and integer labels (N,)."""
    if logits.data.ndim != 2 or labels.shape != (logits.data.shape[0],):
        raise ShapeMismatch("cross-entropy", logits.data.shape, labels.shape)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    n = labels.shape[0]
    loss = -np.log(np.clip(probs[np.arange(n), labels], EPS_CLAMP, None)).sum() / n

    def bwd(g):
        grad = probs.copy()
        grad[np.arange(n), labels] -= 1.0
        logits._accumulate(g * grad / n)

    return _make(np.asarray(loss, dtype=logits.data.dtype), (logits,), bwd)
