"""Stage 3: pairwise concept interaction and the class predictor.

The interaction module turns binary-concept probabilities into a single
scalar: a weight network produces non-negative per-concept weights, and
the interaction is the weighted mean of all pairwise products

    cbar = sum_{i != j} w_i w_j c_i c_j / sum_{i != j} w_i w_j

computed in closed form from running sums.  Zero-weight concepts drop out
of the sum entirely (value and gradient).  sqrt(cbar) is appended to the
concept vector before the classifier MLP; the two are trained jointly.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .autodiff import Tensor, _make
from .layers import BatchNorm, Linear, Module
from .losses import cross_entropy_loss
from .metrics import classification_metrics  # noqa: F401  (stage metric surface)
from .training import batched_forward, run_training
from .validation import check_concept_matrix, check_labels

_DEGENERATE_EPS = 0.0  # exact: ReLU produces exact zeros


def pairwise_interaction(c: Tensor, w: Tensor) -> Tensor:
    """Tape op: closed-form pairwise interaction per row of (N, d_b).

    Requires w >= 0.  Rows with fewer than two strictly positive weights
    (denominator 0) yield 0 with zero gradient.
    """
    cd, wd = c.data, w.data
    if np.any(wd < 0):
        raise ValueError("interaction weights must be non-negative")
    s1 = (cd * wd).sum(axis=1)
    s2 = ((cd * wd) ** 2).sum(axis=1)
    sw = wd.sum(axis=1)
    sw2 = (wd ** 2).sum(axis=1)
    num = s1 * s1 - s2
    den = sw * sw - sw2
    active = den > _DEGENERATE_EPS
    safe_den = np.where(active, den, 1.0)
    out = np.where(active, num / safe_den, 0.0).astype(cd.dtype)

    def bwd(g):
        ga = (g[:, 0] * active) / safe_den
        if c.requires_grad or c._parents:
            dc = ga[:, None] * 2.0 * (s1[:, None] * wd - cd * wd * wd)
            c._accumulate(dc)
        dw = ga[:, None] * (2.0 * (s1[:, None] * cd - cd * cd * wd)
                            - out[:, None] * 2.0 * (sw[:, None] - wd))
        w._accumulate(dw)

    return _make(out[:, None], (c, w), bwd)


def interact_concepts(c_b, w) -> np.ndarray:
    """Closed-form interaction on plain arrays; batch or single vector."""
    c_b = np.atleast_2d(np.asarray(c_b, dtype=np.float64))
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    if np.any(w < 0):
        raise ValueError("interaction weights must be non-negative")
    s1 = (c_b * w).sum(axis=1)
    s2 = ((c_b * w) ** 2).sum(axis=1)
    sw = w.sum(axis=1)
    sw2 = (w ** 2).sum(axis=1)
    den = sw * sw - sw2
    out = np.where(den > _DEGENERATE_EPS, (s1 * s1 - s2) / np.where(den > 0, den, 1.0), 0.0)
    return out if out.shape[0] > 1 else float(out[0])


def interact_concepts_bruteforce(c_b, w) -> float:
    """Explicit pairwise-sum oracle; quadratic, for verification only."""
    c_b = np.asarray(c_b, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    num = den = 0.0
    d = len(c_b)
    for i in range(d):
        for j in range(d):
            if i == j:
                continue
            num += w[i] * w[j] * c_b[i] * c_b[j]
            den += w[i] * w[j]
    return num / den if den > 0 else 0.0


def augment_concepts(c, cbar) -> np.ndarray:
    """Append sqrt(cbar) to the concept vector(s)."""
    c = np.asarray(c, dtype=np.float64)
    extra = np.sqrt(np.maximum(np.asarray(cbar, dtype=np.float64), 0.0))
    if c.ndim == 1:
        return np.concatenate([c, np.atleast_1d(extra)])
    return np.concatenate([c, extra.reshape(len(c), 1)], axis=1)


class EpsilonMLP(Module):
    """Weight network: three hidden layers of 12 with batch norm + ReLU."""

    def __init__(self, rng, d_b, width=12, n_hidden=3):
        super().__init__()
        self.blocks = []
        f_in = d_b
        for i in range(n_hidden):
            lin = self.add_child(f"lin{i}", Linear(rng, f_in, width))
            bn = self.add_child(f"bn{i}", BatchNorm(width))
            self.blocks.append((lin, bn))
            f_in = width
        self.out = self.add_child("out", Linear(rng, f_in, d_b))

    def __call__(self, x: Tensor) -> Tensor:
        for lin, bn in self.blocks:
            x = ad.relu(bn(lin(x)))
        return self.out(x)


def interaction_weights(epsilon: EpsilonMLP, c_b) -> np.ndarray:
    """omega = ReLU(epsilon(c_b)) in eval mode, on plain arrays."""
    epsilon.train(False)
    with ad.no_grad():
        z = epsilon(Tensor(np.atleast_2d(np.asarray(c_b, dtype=np.float64))))
    return np.maximum(z.data, 0.0)


class PredictorMLP(Module):
    """One hidden layer of 1024 with ReLU, then class logits."""

    def __init__(self, rng, d_in, n_classes, hidden=1024):
        super().__init__()
        self.h = self.add_child("h", Linear(rng, d_in, hidden))
        self.out = self.add_child("out", Linear(rng, hidden, n_classes))

    def __call__(self, x: Tensor) -> Tensor:
        return self.out(ad.relu(self.h(x)))


class _JointModule(Module):
    def __init__(self, rng, d, d_b_idx, n_classes, hidden, eps_width,
                 use_interaction):
        super().__init__()
        self.d_b_idx = np.asarray(d_b_idx, dtype=int)
        self.use_interaction = use_interaction and len(self.d_b_idx) >= 2
        d_in = d + (1 if self.use_interaction else 0)
        if self.use_interaction:
            self.eps = self.add_child("eps", EpsilonMLP(rng, len(self.d_b_idx),
                                                        width=eps_width))
        self.mlp = self.add_child("mlp", PredictorMLP(rng, d_in, n_classes,
                                                      hidden=hidden))

    def forward(self, c: Tensor):
        """Returns (logits, omega, cbar); omega/cbar are None without CI."""
        if not self.use_interaction:
            return self.mlp(c), None, None
        cb = Tensor(c.data[:, self.d_b_idx], dtype=c.data.dtype)
        omega = ad.relu(self.eps(cb))
        cbar = pairwise_interaction(cb, omega)
        feats = ad.concat([c, ad.sqrt(cbar)], axis=1)
        return self.mlp(feats), omega, cbar


class InteractionClassifier(BaseEstimator):
    """Joint interaction + predictor stage over concept vectors.

    fit() consumes smoothed ground-truth concepts; prediction consumes
    whatever the conceiver produced.  With ``use_interaction=False`` this
    is the plain concept-bottleneck predictor.
    """

    def __init__(self, n_classes=None, binary_indices=(), hidden=1024,
                 eps_width=12, use_interaction=True, epochs=50, batch_size=64,
                 lr=1e-4, weight_decay=1e-6, lr_patience=10, seed=0,
                 dtype="float64"):
        self.n_classes = n_classes
        self.binary_indices = binary_indices
        self.hidden = hidden
        self.eps_width = eps_width
        self.use_interaction = use_interaction
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.lr_patience = lr_patience
        self.seed = seed
        self.dtype = dtype

    def _np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def fit(self, C, y, C_val=None, y_val=None, train_index_list=None):
        ad.DEFAULT_DTYPE = self._np_dtype()
        d = np.asarray(C).shape[1]
        C = check_concept_matrix(C, d).astype(self._np_dtype())
        k = self.n_classes or int(np.max(y)) + 1
        y = check_labels(y, k)
        Cv = (check_concept_matrix(C_val, d).astype(self._np_dtype())
              if C_val is not None else C)
        yv = check_labels(y_val, k) if y_val is not None else y
        rng = np.random.default_rng(np.random.SeedSequence((self.seed, 47)))
        self.net_ = _JointModule(rng, d, np.asarray(self.binary_indices, dtype=int),
                                 k, self.hidden, self.eps_width,
                                 self.use_interaction)
        self.n_classes_ = k
        self.n_features_ = d
        indices = (np.asarray(train_index_list)
                   if train_index_list is not None else np.arange(len(C)))

        def step(batch):
            logits, _, _ = self.net_.forward(Tensor(C[batch]))
            return cross_entropy_loss(logits, y[batch])

        def val_loss():
            total, n = 0.0, 0
            with ad.no_grad():
                for lo in range(0, len(Cv), 256):
                    sl = slice(lo, lo + 256)
                    logits, _, _ = self.net_.forward(Tensor(Cv[sl]))
                    total += float(cross_entropy_loss(logits, yv[sl]).data) * len(yv[sl])
                    n += len(yv[sl])
            return total / max(n, 1)

        self.history_ = run_training(
            self.net_, indices, step, val_loss,
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            weight_decay=self.weight_decay, seed=self.seed,
            lr_patience=self.lr_patience)
        return self

    def forward_full(self, C) -> dict:
        """Logits plus interaction internals for transparency/intervention."""
        C = np.asarray(C, dtype=self._np_dtype())
        self.net_.train(False)
        with ad.no_grad():
            logits, omega, cbar = self.net_.forward(Tensor(C))
        z = logits.data.astype(np.float64)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        probs = e / e.sum(axis=1, keepdims=True)
        return {
            "logits": logits.data.astype(np.float64),
            "probs": probs,
            "omega": None if omega is None else omega.data.astype(np.float64),
            "cbar": None if cbar is None else cbar.data[:, 0].astype(np.float64),
        }

    def predict_proba(self, C) -> np.ndarray:
        return self.forward_full(C)["probs"]

    def predict(self, C) -> np.ndarray:
        return np.argmax(self.predict_proba(C), axis=1)
