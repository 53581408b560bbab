"""Parameter containers for the small convolutional nets."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import ops
from .tensor import Tensor


class Module:
    """Holds parameters and submodules in definition order."""

    def named_parameters(self, prefix=""):
        out = OrderedDict()
        for key, value in vars(self).items():
            if isinstance(value, Tensor):
                out[prefix + key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(prefix + key + "."))
        return out

    def parameters(self):
        """Trainable tensors only; frozen ones still appear in state_dict."""
        return [p for p in self.named_parameters().values() if p.requires_grad]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return OrderedDict((k, v.data.copy()) for k, v in self.named_parameters().items())

    def load_state_dict(self, state):
        params = self.named_parameters()
        if set(params) != set(state):
            raise KeyError(f"parameter names differ: {sorted(set(params) ^ set(state))}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ops.ShapeError(f"{k}: expected {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


def _he(rng, shape, fan_in, dtype):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, c_in, c_out, k=3, stride=1, pad=1, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.pad = pad
        self.weight = Tensor(_he(rng, (c_out, c_in, k, k), c_in * k * k, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class Linear(Module):
    def __init__(self, n_in, n_out, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Tensor(rng.uniform(-1, 1, size=(n_out, n_in)).astype(dtype) / np.sqrt(n_in), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return ops.fully_connected(x, self.weight, self.bias)
