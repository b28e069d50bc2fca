"""Central finite-difference verification of tape gradients.

The oracle is independent of the backward rules: it re-runs the forward
function with perturbed entries and compares (f(x+e) - f(x-e)) / 2e against
the accumulated ``.grad``.  Works in float64; tensors above a size cutoff
are spot-checked on a seeded random subset of coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward


@dataclass
class GradCheckReport:
    tolerance: float
    entries: dict = field(default_factory=dict)

    def add(self, name, max_rel_err):
        self.entries[name] = {"max_rel_err": float(max_rel_err),
                              "passed": bool(max_rel_err <= self.tolerance)}

    @property
    def passed(self):
        return all(e["passed"] for e in self.entries.values())

    def worst(self):
        return max((e["max_rel_err"] for e in self.entries.values()), default=0.0)


def _coords(arr, rng, limit=64):
    if arr.size <= limit:
        return list(np.ndindex(arr.shape))
    flat = rng.choice(arr.size, size=limit, replace=False)
    return [np.unravel_index(i, arr.shape) for i in sorted(flat)]


def _rel_err(a, b):
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), 1e-6)
    return np.max(np.abs(a - b), initial=0.0) / scale


def finite_difference_check(scalar_fn, named_tensors, tolerance=1e-4,
                            eps=1e-5, rng=None) -> GradCheckReport:
    """Compare tape gradients of ``scalar_fn()`` against central differences.

    ``scalar_fn`` recomputes the scalar loss from the current contents of the
    tensors in ``named_tensors`` (an iterable of (name, Tensor)).  Failures
    are flagged in the report, never raised.
    """
    rng = rng or np.random.default_rng(0)
    tensors = list(named_tensors)
    for _, t in tensors:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.zero_grad()
    loss = scalar_fn()
    backward(loss)
    analytic = {name: t.grad.copy() for name, t in tensors}

    report = GradCheckReport(tolerance=tolerance)
    for name, t in tensors:
        coords = _coords(t.data, rng)
        fd = np.zeros(len(coords))
        ref = np.array([analytic[name][c] for c in coords])
        for i, c in enumerate(coords):
            orig = t.data[c]
            t.data[c] = orig + eps
            with ad.no_grad():
                hi = float(scalar_fn().data)
            t.data[c] = orig - eps
            with ad.no_grad():
                lo = float(scalar_fn().data)
            t.data[c] = orig
            fd[i] = (hi - lo) / (2.0 * eps)
        report.add(name, _rel_err(ref, fd))
    return report


def _rand(rng, *shape):
    return rng.uniform(-1.0, 1.0, size=shape)


def check_layer_kind(kind: str, seed: int, tolerance=1e-4) -> GradCheckReport:
    """Gradient-check one layer kind on small random inputs.

    Inputs are nudged away from non-differentiable points (relu kink,
    pooling ties are measure zero for continuous draws).
    """
    rng = np.random.default_rng(seed)

    def scalarize(out):
        r = readout[:out.data.size].reshape(out.data.shape)
        return ad.mean(ad.hadamard(out, Tensor(r)))

    if kind == "conv2d":
        x = Tensor(_rand(rng, 2, 6, 8, 3), requires_grad=True, name="x")
        w = Tensor(0.5 * _rand(rng, 4, 3, 3, 3), requires_grad=True, name="w")
        b = Tensor(0.1 * _rand(rng, 4), requires_grad=True, name="b")
        readout = rng.normal(size=2 * 6 * 8 * 4)
        fn = lambda: scalarize(ad.conv2d(x, w, b, stride=1, pad=1))
        tensors = [("x", x), ("w", w), ("b", b)]
    elif kind == "conv2d-strided":
        x = Tensor(_rand(rng, 2, 6, 8, 3), requires_grad=True, name="x")
        w = Tensor(0.5 * _rand(rng, 4, 3, 3, 3), requires_grad=True, name="w")
        b = Tensor(0.1 * _rand(rng, 4), requires_grad=True, name="b")
        readout = rng.normal(size=2 * 3 * 4 * 4)
        fn = lambda: scalarize(ad.conv2d(x, w, b, stride=2, pad=1))
        tensors = [("x", x), ("w", w), ("b", b)]
    elif kind == "transposed-conv2d":
        x = Tensor(_rand(rng, 2, 4, 5, 3), requires_grad=True, name="x")
        w = Tensor(0.5 * _rand(rng, 3, 2, 2, 4), requires_grad=True, name="w")
        b = Tensor(0.1 * _rand(rng, 4), requires_grad=True, name="b")
        readout = rng.normal(size=2 * 8 * 10 * 4)
        fn = lambda: scalarize(ad.conv_transpose2d(x, w, b, stride=2))
        tensors = [("x", x), ("w", w), ("b", b)]
    elif kind == "linear":
        x = Tensor(_rand(rng, 4, 6), requires_grad=True, name="x")
        w = Tensor(0.5 * _rand(rng, 6, 3), requires_grad=True, name="w")
        b = Tensor(0.1 * _rand(rng, 3), requires_grad=True, name="b")
        readout = rng.normal(size=12)
        fn = lambda: scalarize(ad.add_bias(ad.matmul(x, w), b))
        tensors = [("x", x), ("w", w), ("b", b)]
    elif kind == "relu":
        data = _rand(rng, 3, 5, 4, 4)
        data += np.where(data >= 0, 0.05, -0.05)   # keep clear of the kink
        x = Tensor(data, requires_grad=True, name="x")
        readout = rng.normal(size=data.size)
        fn = lambda: scalarize(ad.relu(x))
        tensors = [("x", x)]
    elif kind == "sigmoid":
        x = Tensor(2.0 * _rand(rng, 3, 7), requires_grad=True, name="x")
        readout = rng.normal(size=21)
        fn = lambda: scalarize(ad.sigmoid(x))
        tensors = [("x", x)]
    elif kind == "softmax-over-channel":
        x = Tensor(2.0 * _rand(rng, 2, 3, 3, 5), requires_grad=True, name="x")
        readout = rng.normal(size=x.data.size)
        fn = lambda: scalarize(ad.softmax(x, axis=-1))
        tensors = [("x", x)]
    elif kind == "max-pool":
        x = Tensor(_rand(rng, 2, 6, 8, 3), requires_grad=True, name="x")
        readout = rng.normal(size=2 * 3 * 4 * 3)
        fn = lambda: scalarize(ad.max_pool2d(x, 2))
        tensors = [("x", x)]
    elif kind == "batch-norm":
        x = Tensor(_rand(rng, 6, 3, 3, 4) + 0.2, requires_grad=True, name="x")
        gamma = Tensor(1.0 + 0.2 * _rand(rng, 4), requires_grad=True, name="gamma")
        beta = Tensor(0.2 * _rand(rng, 4), requires_grad=True, name="beta")
        rm, rv = np.zeros(4), np.ones(4)
        readout = rng.normal(size=x.data.size)
        fn = lambda: scalarize(ad.batch_norm(x, gamma, beta, rm, rv, train=True))
        tensors = [("x", x), ("gamma", gamma), ("beta", beta)]
    elif kind == "concat":
        a = Tensor(_rand(rng, 2, 4, 4, 3), requires_grad=True, name="a")
        b = Tensor(_rand(rng, 2, 4, 4, 2), requires_grad=True, name="b")
        readout = rng.normal(size=2 * 4 * 4 * 5)
        fn = lambda: scalarize(ad.concat([a, b], axis=-1))
        tensors = [("a", a), ("b", b)]
    elif kind == "flatten":
        x = Tensor(_rand(rng, 2, 3, 4, 5), requires_grad=True, name="x")
        readout = rng.normal(size=x.data.size)
        fn = lambda: scalarize(ad.flatten(x))
        tensors = [("x", x)]
    elif kind == "hadamard":
        a = Tensor(_rand(rng, 3, 4, 5), requires_grad=True, name="a")
        b = Tensor(_rand(rng, 3, 4, 5), requires_grad=True, name="b")
        readout = rng.normal(size=a.data.size)
        fn = lambda: scalarize(ad.hadamard(a, b))
        tensors = [("a", a), ("b", b)]
    else:
        raise ValueError(f"unknown layer kind {kind!r}")

    return finite_difference_check(fn, tensors, tolerance=tolerance, rng=rng)
