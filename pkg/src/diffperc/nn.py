"""Minimal layer/module system on top of the tensor core."""

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


def _scan(value, key):
    if isinstance(value, Parameter):
        yield key, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=f"{key}.")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _scan(item, f"{key}.{i}")


class Module:
    """Base class with attribute-scan parameter registration.

    Attributes that are Parameters, Modules, or lists/tuples of Modules are
    discovered in insertion order, which keeps naming and iteration
    deterministic across runs.
    """

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            yield from _scan(value, f"{prefix}{name}")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False

    def num_parameters(self):
        return sum(p.data.size for p in self.parameters())


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng, bias=True, std=None):
        if std is None:
            std = in_dim**-0.5
        self.weight = Parameter(rng.normal((in_dim, out_dim)) * std)
        self.bias = Parameter(np.zeros(out_dim, dtype=np.float32)) if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = T.add(y, self.bias)
        return y


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=None, bias=True):
        if padding is None:
            padding = kernel // 2
        std = (in_ch * kernel * kernel) ** -0.5
        self.weight = Parameter(rng.normal((out_ch, in_ch, kernel, kernel)) * std)
        self.bias = Parameter(np.zeros(out_ch, dtype=np.float32)) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class GroupNorm(Module):
    def __init__(self, num_groups, channels, eps=1e-5):
        if channels % num_groups != 0:
            raise DimensionError(
                f"GroupNorm: {channels} channels not divisible by {num_groups} groups"
            )
        self.num_groups = num_groups
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype=np.float32))
        self.beta = Parameter(np.zeros(channels, dtype=np.float32))

    def __call__(self, x):
        return T.group_norm(x, self.gamma, self.beta, self.num_groups, eps=self.eps)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.eps = eps
        self.gamma = Parameter(np.ones(dim, dtype=np.float32))
        self.beta = Parameter(np.zeros(dim, dtype=np.float32))

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta, eps=self.eps)
