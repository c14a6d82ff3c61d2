"""Layer containers on top of the tensor core."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Parameter container with a training flag.

    Tensor attributes are parameters, ndarray attributes are buffers, and
    Module attributes (or lists of Modules) are children.  Traversal follows
    attribute insertion order, so names are stable across runs.
    """

    training = True

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, list) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, np.ndarray):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise T.ShapeError(f"{name}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()
        for name, buf in buffers.items():
            buf[...] = state[name]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _he(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    return T.parameter(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in))


class Conv2d(Module):
    def __init__(self, cin, cout, kernel=(3, 3), stride=(1, 1), padding=None, bias=False,
                 rng=None, padding_mode="zeros"):
        rng = rng if rng is not None else np.random.default_rng(0)
        kernel = (kernel, kernel) if np.isscalar(kernel) else tuple(kernel)
        self.stride = (stride, stride) if np.isscalar(stride) else tuple(stride)
        self.padding = tuple(k // 2 for k in kernel) if padding is None else tuple(padding)
        self.padding_mode = padding_mode
        self.weight = _he(rng, (cout, cin) + kernel, cin * kernel[0] * kernel[1])
        if bias:
            self.bias = T.parameter(np.zeros(cout))

    def forward(self, x):
        bias = getattr(self, "bias", None)
        if self.padding_mode == "zeros":
            return T.conv2d(x, self.weight, bias, self.stride, self.padding)
        ph, pw = self.padding
        x = T.pad_edge(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), self.padding_mode)
        return T.conv2d(x, self.weight, bias, self.stride, 0)


class Conv1d(Module):
    def __init__(self, cin, cout, kernel=1, stride=1, padding=None, dilation=1, bias=False,
                 rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.dilation = dilation
        self.padding = dilation * (kernel - 1) // 2 if padding is None else padding
        self.weight = _he(rng, (cout, cin, kernel), cin * kernel)
        if bias:
            self.bias = T.parameter(np.zeros(cout))

    def forward(self, x):
        return T.conv1d(x, self.weight, getattr(self, "bias", None), self.stride, self.padding,
                        self.dilation)


class Linear(Module):
    def __init__(self, fin, fout, bias=True, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = T.parameter(rng.standard_normal((fout, fin)) * np.sqrt(1.0 / fin))
        if bias:
            self.bias = T.parameter(np.zeros(fout))

    def forward(self, x):
        return T.linear(x, self.weight, getattr(self, "bias", None))


class BatchNorm(Module):
    """Batch normalization over every axis except the channel axis 1."""

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.gamma = T.parameter(np.ones(channels))
        self.beta = T.parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    x = T.as_tensor(x)
    norm = T.sqrt(T.tsum(x * x, axis=axis, keepdims=True) + eps)
    return x / norm
