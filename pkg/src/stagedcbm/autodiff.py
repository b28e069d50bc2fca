"""Minimal reverse-mode automatic differentiation on numpy arrays.

A ``Tensor`` wraps an ndarray together with a gradient buffer and, while
grad mode is on, a backward closure linking it to its parents.  Calling
:func:`backward` on a scalar tensor walks the recorded graph in reverse
topological order and accumulates ``d loss / d node`` into ``.grad`` of
every reachable node.  Gradients always accumulate (never overwrite), so
shared subgraphs and parameter reuse work out of the box.

Everything runs in float64 by default; float32 can be selected per tensor
for speed.  All computation is plain numpy, single process.
"""

from __future__ import annotations

import itertools

import numpy as np

from .validation import ShapeMismatch

DEFAULT_DTYPE = np.float64

# clamp constant used before log()/division in losses and activations
EPS_CLAMP = 1e-7

_node_counter = itertools.count()

_grad_enabled = True


class no_grad:
    """Context manager: disable tape recording (eval mode, no graph growth)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-dimensional value participating in a recorded computation graph.

    Attributes:
        data: the ndarray payload (shape is fixed at creation).
        grad: same-shape gradient buffer; zeros until backward reaches it.
        node_id: monotonically increasing id, doubles as tape position.
        name: optional identifier, used by the optimizer for error messages.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "node_id",
                 "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.data = arr
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.requires_grad = requires_grad
        self.name = name
        self.node_id = next(_node_counter)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        nm = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{nm})"

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def _accumulate(self, delta):
        if self.grad is None:
            # steal freshly allocated arrays; copy views/shared buffers
            if isinstance(delta, np.ndarray) and delta.base is None \
                    and delta.flags.owndata and delta.dtype == self.data.dtype:
                self.grad = delta
            else:
                self.grad = np.array(delta, dtype=self.data.dtype)
        else:
            self.grad += delta

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    # -- composition helpers ------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        return hadamard(self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward_fn) -> Tensor:
    """Create an op output; records the edge only while grad mode is on."""
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every node reachable from ``loss``.

    ``loss`` must be scalar (shape ``()`` or size 1).  Unreachable
    parameters keep their all-zero gradient buffers.
    """
    if loss.data.size != 1:
        raise ValueError(
            f"backward expects a scalar loss, got shape {loss.data.shape}")

    topo: list[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeMismatch("add", a.data.shape, b.data.shape)

    def bwd(g):
        a._accumulate(g)
        b._accumulate(g)

    return _make(a.data + b.data, (a, b), bwd)


def scale(a: Tensor, alpha: float) -> Tensor:
    def bwd(g):
        a._accumulate(alpha * g)

    return _make(a.data * alpha, (a,), bwd)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; broadcasting allowed when one side is smaller."""
    out = a.data * b.data

    def bwd(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), bwd)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    # sum out broadcast axes, then reshape
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bwd(g):
        x._accumulate(g * mask)

    return _make(np.where(mask, x.data, 0.0), (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))

    def bwd(g):
        x._accumulate(g * s * (1.0 - s))

    return _make(s, (x,), bwd)


def sqrt(x: Tensor) -> Tensor:
    """Elementwise square root with subgradient 0 at x == 0."""
    r = np.sqrt(np.maximum(x.data, 0.0))

    def bwd(g):
        denom = 2.0 * r
        safe = denom > 0
        x._accumulate(np.where(safe, g / np.where(safe, denom, 1.0), 0.0))

    return _make(r, (x,), bwd)


def square(x: Tensor) -> Tensor:
    def bwd(g):
        x._accumulate(g * 2.0 * x.data)

    return _make(x.data * x.data, (x,), bwd)


def mean(x: Tensor) -> Tensor:
    n = x.data.size

    def bwd(g):
        x._accumulate(np.full_like(x.data, float(g) / n))

    return _make(np.asarray(x.data.mean(), dtype=x.dtype), (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    def bwd(g):
        x._accumulate(np.full_like(x.data, float(g)))

    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,), bwd)


def sum_axis(x: Tensor, axis: int) -> Tensor:
    def bwd(g):
        x._accumulate(np.repeat(np.expand_dims(g, axis), x.data.shape[axis],
                                axis=axis))

    return _make(x.data.sum(axis=axis), (x,), bwd)


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    n = x.data.shape[0]
    shp = x.data.shape

    def bwd(g):
        x._accumulate(g.reshape(shp))

    return _make(x.data.reshape(n, -1), (x,), bwd)


def reshape(x: Tensor, new_shape) -> Tensor:
    shp = x.data.shape

    def bwd(g):
        x._accumulate(g.reshape(shp))

    return _make(x.data.reshape(new_shape), (x,), bwd)


def concat(tensors, axis=-1) -> Tensor:
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t._accumulate(g[tuple(idx)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), bwd)


def softmax(x: Tensor, axis=-1) -> Tensor:
    """Softmax along ``axis``; rows sum to one."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        x._accumulate(s * (g - dot))

    return _make(s, (x,), bwd)


def matmul(x: Tensor, w: Tensor) -> Tensor:
    """x (N, F_in) @ w (F_in, F_out)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeMismatch("linear", x.data.shape, w.data.shape)

    def bwd(g):
        if _wants_grad(x):
            x._accumulate(g @ w.data.T)
        w._accumulate(x.data.T @ g)

    return _make(x.data @ w.data, (x, w), bwd)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-feature bias; bias shape must broadcast over the batch."""
    out = x.data + b.data.reshape((1,) * (x.data.ndim - b.data.ndim) + b.data.shape) \
        if b.data.ndim < x.data.ndim else x.data + b.data

    def bwd(g):
        x._accumulate(g)
        b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out, (x, b), bwd)


# ---------------------------------------------------------------------------
# spatial ops (NHWC layout; channels-last keeps im2col copies sequential)
# ---------------------------------------------------------------------------


def _im2col(x, k, stride, pad_h=0, pad_w=0):
    """x (N,H,W,C) -> (N*HO*WO, k*k*C) gemm-ready row matrix."""
    if pad_h or pad_w:
        x = np.pad(x, ((0, 0), (pad_h, pad_h), (pad_w, pad_w), (0, 0)))
    n, h, w, c = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    sn, sh, sw, sc = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, (n, ho, wo, k, k, c), (sn, sh * stride, sw * stride, sh, sw, sc))
    return view.reshape(n * ho * wo, k * k * c), ho, wo


def _corr2d(x, w2, k, stride, pad=0):
    """Correlate x (N,H,W,C) with w2 (O, k*k*C); returns (N,HO,WO,O)."""
    cols, ho, wo = _im2col(x, k, stride, pad, pad)
    out = cols @ w2.T
    return out.reshape(x.shape[0], ho, wo, w2.shape[0]), cols


def _dilate(y, stride, pad=0, extra_h=0, extra_w=0):
    """Insert stride-1 zeros between elements and an optional zero border."""
    if stride == 1 and not pad and not extra_h and not extra_w:
        return y
    n, h, w, c = y.shape
    out = np.zeros((n, (h - 1) * stride + 1 + extra_h + 2 * pad,
                    (w - 1) * stride + 1 + extra_w + 2 * pad, c), dtype=y.dtype)
    out[:, pad:pad + (h - 1) * stride + 1:stride,
        pad:pad + (w - 1) * stride + 1:stride] = y
    return out


def _wants_grad(t: Tensor) -> bool:
    return t.requires_grad or bool(t._parents)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride=1, pad=0) -> Tensor:
    """2-d convolution (cross-correlation), NHWC, weight (O, k, k, C)."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.data.shape[3] != w.data.shape[3]:
        raise ShapeMismatch("conv2d", x.data.shape, w.data.shape)
    o, k, _, c = w.data.shape
    w2 = w.data.reshape(o, -1)
    out, cols = _corr2d(x.data, w2, k, stride, pad)
    out += b.data
    ho, wo = out.shape[1], out.shape[2]
    if not _grad_enabled:
        cols = None  # keep eval memory flat

    def bwd(g):
        if _wants_grad(x):
            # dX: full correlation of the dilated upstream grad with the
            # spatially flipped kernel read as (C, k, k, O)
            wf = w.data[:, ::-1, ::-1, :].transpose(3, 1, 2, 0).reshape(c, -1)
            gd = _dilate(g, stride, pad=k - 1 - pad,
                         extra_h=x.data.shape[1] + 2 * pad - ((ho - 1) * stride + k),
                         extra_w=x.data.shape[2] + 2 * pad - ((wo - 1) * stride + k))
            gx, _ = _corr2d(gd, wf, k, 1)
            x._accumulate(gx)
        gw = g.reshape(-1, o).T @ cols
        w._accumulate(gw.reshape(w.data.shape))
        b._accumulate(g.sum(axis=(0, 1, 2)))

    return _make(out, (x, w, b), bwd)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor, stride=2) -> Tensor:
    """Transposed convolution, NHWC, weight (C_in, k, k, O), no padding.

    Output spatial size is ``(H-1)*stride + k``; with k == stride this is an
    exact x``stride`` upsampling.
    """
    if x.data.ndim != 4 or w.data.ndim != 4 or x.data.shape[3] != w.data.shape[0]:
        raise ShapeMismatch("transposed-conv2d", x.data.shape, w.data.shape)
    cin, k, _, o = w.data.shape
    # out[n,p,q,o] = sum_{c,i,j} x[n,h,w,c] w[c,i,j,o] with p = h*s+i:
    # equals full correlation of the dilated input with the flipped kernel
    wf = w.data[:, ::-1, ::-1, :].transpose(3, 1, 2, 0).reshape(o, -1)
    xd = _dilate(x.data, stride, pad=k - 1)
    out, cols = _corr2d(xd, wf, k, 1)
    out += b.data
    if not _grad_enabled:
        cols = None

    def bwd(g):
        if _wants_grad(x):
            # dx[n,h,w,c] = sum_{o,i,j} g[n,h*s+i,w*s+j,o] w[c,i,j,o]
            wr = w.data.reshape(cin, -1)
            gx, _ = _corr2d(g, wr, k, stride)
            x._accumulate(gx)
        gk = g.reshape(-1, o).T @ cols                 # grad of flipped kernel
        gk = gk.reshape(o, k, k, cin)
        w._accumulate(gk[:, ::-1, ::-1, :].transpose(3, 1, 2, 0))
        b._accumulate(g.sum(axis=(0, 1, 2)))

    return _make(out, (x, w, b), bwd)


def max_pool2d(x: Tensor, k=2) -> Tensor:
    """Non-overlapping max pooling; H and W must be divisible by k."""
    n, h, w, c = x.data.shape
    if h % k or w % k:
        raise ShapeMismatch("max-pool", x.data.shape, (k, k))
    tiles = x.data.reshape(n, h // k, k, w // k, k, c)
    flat = tiles.transpose(0, 1, 3, 5, 2, 4).reshape(n, h // k, w // k, c, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gx = gflat.reshape(n, h // k, w // k, c, k, k).transpose(0, 1, 4, 2, 5, 3)
        x._accumulate(gx.reshape(n, h, w, c))

    return _make(out, (x,), bwd)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean,
               running_var, train: bool, momentum=0.1, eps=1e-5) -> Tensor:
    """Batch normalization over all axes except the trailing channel axis.

    ``running_mean``/``running_var`` are plain ndarrays mutated in train mode.
    """
    nd = x.data.ndim
    if nd not in (2, 4):
        raise ShapeMismatch("batch-norm", x.data.shape, "(2d or 4d)")
    axes = tuple(range(nd - 1))

    if train:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu
        running_var *= (1.0 - momentum)
        running_var += momentum * var
    else:
        mu, var = running_mean, running_var

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data

    m = x.data.size // x.data.shape[-1]

    def bwd(g):
        gamma._accumulate((g * xhat).sum(axis=axes))
        beta._accumulate(g.sum(axis=axes))
        gxhat = g * gamma.data
        if train:
            # standard batch-norm backward through batch statistics
            t1 = gxhat.sum(axis=axes, keepdims=True)
            t2 = (gxhat * xhat).sum(axis=axes, keepdims=True)
            gx = (gxhat - t1 / m - xhat * t2 / m) * inv
        else:
            gx = gxhat * inv
        x._accumulate(gx)

    return _make(out, (x, gamma, beta), bwd)


_OP_TABLE = {}


def op_forward(kind: str, *inputs, **params) -> Tensor:
    """Dispatch a layer-kind forward by name.

    Mostly useful for the gradient-check harness; model code calls the
    functions directly.
    """
    try:
        fn = _OP_TABLE[kind]
    except KeyError:
        raise ValueError(f"unknown layer kind {kind!r}") from None
    return fn(*inputs, **params)


_OP_TABLE.update({
    "conv2d": conv2d,
    "transposed-conv2d": conv_transpose2d,
    "linear": lambda x, w, b: add_bias(matmul(x, w), b),
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax-over-channel": softmax,
    "max-pool": max_pool2d,
    "batch-norm": batch_norm,
    "concat": concat,
    "flatten": flatten,
    "hadamard": hadamard,
})

LAYER_KINDS = tuple(_OP_TABLE)
