"""Layer objects holding parameters for the autodiff ops.

A ``Module`` owns named parameter tensors plus non-trainable state
(batch-norm running statistics).  Composite networks list their children
and get parameter flattening, train/eval switching, and state export for
the checkpoint writer.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    def __init__(self):
        self._children: dict[str, Module] = {}
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self.training = True

    def add_param(self, name, array):
        t = Tensor(array, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_buffer(self, name, array):
        self._buffers[name] = array
        return array

    def add_child(self, name, module):
        self._children[name] = module
        return module

    def parameters(self, prefix=""):
        """Yield (qualified_name, Tensor) pairs, depth first."""
        for name, p in self._params.items():
            yield f"{prefix}{name}", p
        for cname, child in self._children.items():
            yield from child.parameters(prefix=f"{prefix}{cname}.")

    def buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield f"{prefix}{name}", b
        for cname, child in self._children.items():
            yield from child.buffers(prefix=f"{prefix}{cname}.")

    def train(self, mode=True):
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def n_params(self):
        return sum(p.data.size for _, p in self.parameters())

    def state_arrays(self):
        """All tensors needed to reconstruct the module: params + buffers."""
        out = {f"param:{n}": p.data for n, p in self.parameters()}
        out.update({f"buffer:{n}": b for n, b in self.buffers()})
        return out

    def load_state_arrays(self, arrays):
        for n, p in self.parameters():
            src = arrays[f"param:{n}"]
            if src.shape != p.data.shape:
                raise ValueError(f"parameter {n}: shape {src.shape} != {p.data.shape}")
            p.data[...] = src
        for n, b in self.buffers():
            b[...] = arrays[f"buffer:{n}"]


def _he_init(rng, fan_in, shape):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv2d(Module):
    """NHWC convolution; weight (c_out, k, k, c_in)."""

    def __init__(self, rng, c_in, c_out, k=3, stride=1, pad=1):
        super().__init__()
        self.stride, self.pad = stride, pad
        self.w = self.add_param("w", _he_init(rng, c_in * k * k, (c_out, k, k, c_in)))
        self.b = self.add_param("b", np.zeros(c_out))

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class ConvTranspose2d(Module):
    """NHWC transposed convolution; weight (c_in, k, k, c_out)."""

    def __init__(self, rng, c_in, c_out, k=2, stride=2):
        super().__init__()
        self.stride = stride
        self.w = self.add_param("w", _he_init(rng, c_in * k * k, (c_in, k, k, c_out)))
        self.b = self.add_param("b", np.zeros(c_out))

    def __call__(self, x):
        return ad.conv_transpose2d(x, self.w, self.b, stride=self.stride)


class Linear(Module):
    def __init__(self, rng, f_in, f_out):
        super().__init__()
        self.w = self.add_param("w", _he_init(rng, f_in, (f_in, f_out)))
        self.b = self.add_param("b", np.zeros(f_out))

    def __call__(self, x):
        return ad.add_bias(ad.matmul(x, self.w), self.b)


class BatchNorm(Module):
    """Batch norm over 2-d or 4-d activations; running-stat momentum 0.1."""

    def __init__(self, n_features, momentum=0.1):
        super().__init__()
        self.momentum = momentum
        self.gamma = self.add_param("gamma", np.ones(n_features))
        self.beta = self.add_param("beta", np.zeros(n_features))
        self.run_mean = self.add_buffer("run_mean", np.zeros(n_features))
        self.run_var = self.add_buffer("run_var", np.ones(n_features))

    def __call__(self, x):
        return ad.batch_norm(x, self.gamma, self.beta, self.run_mean,
                             self.run_var, train=self.training,
                             momentum=self.momentum)


class ConvBlock(Module):
    """conv -> batch-norm -> relu."""

    def __init__(self, rng, c_in, c_out, k=3, stride=1, pad=1):
        super().__init__()
        self.conv = self.add_child("conv", Conv2d(rng, c_in, c_out, k, stride, pad))
        self.bn = self.add_child("bn", BatchNorm(c_out))

    def __call__(self, x):
        return ad.relu(self.bn(self.conv(x)))
