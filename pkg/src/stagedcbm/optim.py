"""AdamW with decoupled weight decay, plus a plateau learning-rate schedule."""

from __future__ import annotations

import numpy as np


class NanGradient(RuntimeError):
    def __init__(self, param_name):
        self.param_name = param_name
        super().__init__(f"NaN gradient in parameter {param_name!r}")


class AdamW:
    """Decoupled-weight-decay Adam over named parameter tensors.

    ``step()`` applies the update and zeroes gradients afterwards.  Moment
    buffers are allocated per parameter at construction, shape-matched.
    """

    def __init__(self, named_params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=1e-6):
        self.params = list(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for (name, p), m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NanGradient(name)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        self.zero_grad()

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()


class PlateauSchedule:
    """Multiply lr by ``factor`` when the watched loss stalls for ``patience`` epochs."""

    def __init__(self, optimizer, factor=0.1, patience=10):
        self.opt = optimizer
        self.factor = factor
        self.patience = patience
        self.best = np.inf
        self.stale = 0

    def update(self, val_loss):
        if val_loss < self.best - 1e-12:
            self.best = val_loss
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.opt.lr *= self.factor
                self.stale = 0
