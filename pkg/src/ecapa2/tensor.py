"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation that touches a tensor requiring gradients records a backward
closure and its parents.  ``Tensor.backward`` walks the recorded graph in
reverse topological order and accumulates gradients into leaf tensors.

The operation set is deliberately small: it is what the ECAPA2 network, its
losses and the attribution analyses need, and nothing else.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

CHECK_FINITE = True

_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class GeometryError(ValueError):
    """Convolution geometry yields an empty output."""


class GraphError(RuntimeError):
    """The recorded graph cannot be differentiated."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _check_finite(data: np.ndarray, op: str) -> None:
    if CHECK_FINITE and not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by {op!r}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def _norm_axes(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, int):
        return (_norm_axis(axis, ndim),)
    return tuple(_norm_axis(a, ndim) for a in axis)


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "tensor")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple, backward, op: str) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = parents if needs else ()
        out._backward = backward if needs else None
        return out

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- differentiation ----------------------------------------------------
    def backward(self, seed=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        ``seed`` is required unless the tensor holds a single element.
        """
        if not self.requires_grad:
            raise GraphError("tensor does not require grad")
        if seed is None:
            if self.data.size != 1:
                raise GraphError("backward on a non-scalar tensor needs an explicit seed")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=np.float64)
            if seed.shape != self.data.shape:
                raise ShapeError(f"seed shape {seed.shape} != output shape {self.data.shape}")
        order = topological_order(self)
        grads = {id(self): seed}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if node._backward is None:
                raise GraphError(f"saved activations of {node.op!r} were released")
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg

    def release(self) -> None:
        """Drop saved activations of the whole graph below this tensor."""
        for node in topological_order(self):
            if node._parents:
                node._backward = None

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def sqrt(self):
        return sqrt(self)


def _raise_item():
    raise ShapeError("item() requires a single-element tensor")


def topological_order(root: Tensor) -> list:
    """Nodes reachable from ``root``, parents before children, each once."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


# -- elementwise arithmetic -------------------------------------------------

def _broadcast_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return Tensor._from_op(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.data, b.data, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return Tensor._from_op(out, (a, b), backward, "div")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return Tensor._from_op(
        ad ** exponent, (a,),
        lambda g: (g * exponent * ad ** (exponent - 1),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    if (ad <= 0).any():
        raise NonFiniteError("log of a non-positive value")
    return Tensor._from_op(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if (a.data < 0).any():
        raise NonFiniteError("sqrt of a negative value")
    out = np.sqrt(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._from_op(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def cos(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return Tensor._from_op(np.cos(ad), (a,), lambda g: (-g * np.sin(ad),), "cos")


def arccos(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    if (np.abs(ad) >= 1).any():
        raise NonFiniteError("arccos needs |x| < 1 to stay differentiable")
    return Tensor._from_op(
        np.arccos(ad), (a,), lambda g: (-g / np.sqrt(1.0 - ad * ad),), "arccos")


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return Tensor._from_op(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,), "clip")


# -- reductions -------------------------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(
        np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axes, keepdims) * (1.0 / count)


def var(a, axis=None, keepdims=False) -> Tensor:
    """Biased (population) variance."""
    a = as_tensor(a)
    centered = a - mean(a, axis, keepdims=True)
    return mean(centered * centered, axis, keepdims)


def std(a, axis=None, keepdims=False, eps: float = 0.0) -> Tensor:
    """Population standard deviation, ``sqrt(var + eps)``."""
    return sqrt(var(a, axis, keepdims) + eps)


def tmax(a, axis: int) -> Tensor:
    """Maximum along one axis; the gradient goes to the first arg-max."""
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    idx = np.expand_dims(a.data.argmax(axis=ax), ax)
    out = np.take_along_axis(a.data, idx, axis=ax).squeeze(ax)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.put_along_axis(full, idx, np.expand_dims(g, ax), axis=ax)
        return (full,)

    return Tensor._from_op(out, (a,), backward, "max")


# -- shape manipulation -----------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {src} to {tuple(shape)}") from None
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(
        a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    if isinstance(index, Tensor):
        raise TypeError("index with numpy arrays, not tensors")

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(np.array(a.data[index]), (a,), backward, "getitem")


def take(a, indices, axis: int) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in backward."""
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    idx = np.asarray(indices, dtype=np.intp)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        sel = (slice(None),) * ax + (idx,)
        np.add.at(full, sel, g)
        return (full,)

    return Tensor._from_op(np.take(a.data, idx, axis=ax), (a,), backward, "take")


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat of an empty sequence")
    ax = _norm_axis(axis, xs[0].ndim)
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(
                x.shape[i] != xs[0].shape[i] for i in range(x.ndim) if i != ax):
            raise ShapeError(f"concat: shapes {[t.shape for t in xs]} differ off axis {ax}")
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(xs)))

    return Tensor._from_op(np.concatenate([x.data for x in xs], axis=ax), tuple(xs), backward,
                           "concat")


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    return concat([reshape(x, x.shape[:axis] + (1,) + x.shape[axis:]) for x in xs], axis)


def pad_edge(a, pad: Sequence[tuple], mode: str = "edge") -> Tensor:
    """Pad with replicated (``edge``) or circular (``wrap``) borders."""
    a = as_tensor(a)
    if mode not in ("edge", "wrap"):
        raise ValueError(f"unsupported pad mode {mode!r}")
    out = a
    for ax, (lo, hi) in enumerate(pad):
        if lo == 0 and hi == 0:
            continue
        n = out.shape[ax]
        pos = np.arange(-lo, n + hi)
        idx = np.clip(pos, 0, n - 1) if mode == "edge" else pos % n
        out = take(out, idx, ax)
    return out


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-d")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions {a.shape} @ {b.shape} differ")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(ad @ bd, (a, b), backward, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[-1]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight {weight.shape}")
    out = matmul(x, transpose(weight))
    return out if bias is None else out + bias


# -- softmax family -----------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    z = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return Tensor._from_op(out, (a,), backward, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    z = a.data - a.data.max(axis=ax, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=ax, keepdims=True))
    prob = np.exp(out)

    def backward(g):
        return (g - prob * g.sum(axis=ax, keepdims=True),)

    return Tensor._from_op(out, (a,), backward, "log_softmax")


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` (N, K)."""
    labels = np.asarray(labels, dtype=np.intp)
    logp = log_softmax(logits, axis=-1)
    return -mean(logp[np.arange(len(labels)), labels])


# -- normalization ------------------------------------------------------------

def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of ``x`` shaped (N, C, ...).

    In training mode the batch statistics are used and the running buffers are
    updated in place (``running = momentum * running + (1 - momentum) * batch``).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise ValueError("batch_norm eps must be positive")
    if x.ndim < 2 or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batch_norm: channel mismatch {x.shape} vs {gamma.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    xd = x.data
    if training:
        m = xd.size // xd.shape[1]
        mu = xd.mean(axis=axes)
        v = xd.var(axis=axes)
        if m > 1:
            running_mean *= momentum
            running_mean += (1 - momentum) * mu
            running_var *= momentum
            running_var += (1 - momentum) * v * m / (m - 1)
    else:
        mu, v = running_mean, running_var
    inv = 1.0 / np.sqrt(v + eps)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    gd = gamma.data.reshape(bshape)
    out = xhat * gd + beta.data.reshape(bshape)

    def backward(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gd
            if training:
                m = xd.size // xd.shape[1]
                s1 = gxhat.sum(axis=axes).reshape(bshape)
                s2 = (gxhat * xhat).sum(axis=axes).reshape(bshape)
                gx = (inv.reshape(bshape) / m) * (m * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * inv.reshape(bshape)
        return gx, gg, gb

    return Tensor._from_op(out, (x, gamma, beta), backward, "batch_norm")


# -- convolution --------------------------------------------------------------

def _pair(v) -> tuple:
    return (int(v), int(v)) if np.isscalar(v) else (int(v[0]), int(v[1]))


def conv_output_size(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _conv_geometry(xshape, wshape, stride, padding, dilation):
    if len(xshape) != 4 or len(wshape) != 4:
        raise ShapeError(f"conv expects (N,C,H,W) input and (O,C,kh,kw) kernel, "
                         f"got {xshape} and {wshape}")
    if xshape[1] != wshape[1]:
        raise ShapeError(f"conv: input has {xshape[1]} channels, kernel expects {wshape[1]}")
    kh, kw = wshape[2], wshape[3]
    if min(kh, kw) < 1 or min(stride) < 1 or min(dilation) < 1 or min(padding) < 0:
        raise GeometryError("kernel, stride and dilation must be >= 1 and padding >= 0")
    ho = conv_output_size(xshape[2], kh, stride[0], padding[0], dilation[0])
    wo = conv_output_size(xshape[3], kw, stride[1], padding[1], dilation[1])
    if ho < 1 or wo < 1:
        raise GeometryError(f"conv output would be {ho}x{wo} for input {xshape[2:]} "
                            f"kernel {(kh, kw)} stride {stride} padding {padding} "
                            f"dilation {dilation}")
    return ho, wo


def _tap_slices(i, j, ho, wo, stride, dilation):
    return (slice(None), slice(None),
            slice(i * dilation[0], i * dilation[0] + stride[0] * (ho - 1) + 1, stride[0]),
            slice(j * dilation[1], j * dilation[1] + stride[1] * (wo - 1) + 1, stride[1]))


def _windows(xp, kh, kw, ho, wo, stride, dilation):
    eh = dilation[0] * (kh - 1) + 1
    ew = dilation[1] * (kw - 1) + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (eh, ew), axis=(2, 3))
    return win[:, :, :stride[0] * (ho - 1) + 1:stride[0], :stride[1] * (wo - 1) + 1:stride[1],
               ::dilation[0], ::dilation[1]]


_scratch_buf = np.empty(0)


def _scratch(shape) -> np.ndarray:
    # reused im2col workspace; fresh multi-MB allocations cost as much as the copy
    global _scratch_buf
    size = int(np.prod(shape))
    if _scratch_buf.size < size:
        _scratch_buf = np.empty(size)
    return _scratch_buf[:size].reshape(shape)


def _row_bands(xp, kh, ho, stride, dilation):
    # (N, C, rows*Wp) arrays holding the input rows read by each kernel row,
    # paired with the flat offset of that kernel row inside them
    n, c, hp, wp = xp.shape
    if stride[0] == 1:
        flat = xp.reshape(n, c, hp * wp)
        return [(flat, i * dilation[0] * wp) for i in range(kh)]
    return [(np.ascontiguousarray(
        xp[:, :, i * dilation[0]:i * dilation[0] + stride[0] * (ho - 1) + 1:stride[0], :]
    ).reshape(n, c, ho * wp), 0) for i in range(kh)]


def _flat_cols(xp, kh, kw, ho, wo, stride, dilation):
    # output position (h, w) lives at flat index h*Wp + w; columns w >= wo are discarded
    n, c, _, wp = xp.shape
    span = (ho - 1) * wp + wo
    cols = _scratch((n, c, kh, kw, span))
    for i, (band, base) in enumerate(_row_bands(xp, kh, ho, stride, dilation)):
        for j in range(kw):
            off = base + j * dilation[1]
            cols[:, :, i, j, :] = band[:, :, off:off + span]
    return cols.reshape(n, c * kh * kw, span), span


def _unflatten_out(flat, ho, wo, wp):
    n, o, span = flat.shape
    full = np.empty((n, o, ho * wp))
    full[:, :, :span] = flat
    return full.reshape(n, o, ho, wp)[:, :, :, :wo]


def _conv2d_im2col(xp, w, ho, wo, stride, dilation):
    o, c, kh, kw = w.shape
    if stride[1] != 1:
        cols = _windows(xp, kh, kw, ho, wo, stride, dilation)
        return np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if xp.flags.c_contiguous is False:
        xp = np.ascontiguousarray(xp)
    cols, _ = _flat_cols(xp, kh, kw, ho, wo, stride, dilation)
    return _unflatten_out(np.matmul(w.reshape(o, c * kh * kw), cols), ho, wo, xp.shape[3])


def _conv2d_im2col_backward(g, xp, w, ho, wo, stride, dilation, need_x, need_w):
    o, c, kh, kw = w.shape
    n, _, hp, wp = xp.shape
    gx = gw = None
    if stride[1] != 1:
        if need_w:
            cols = _windows(xp, kh, kw, ho, wo, stride, dilation)
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        if need_x:
            gcols = np.tensordot(g, w, axes=([1], [0]))
            gx = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gx[_tap_slices(i, j, ho, wo, stride, dilation)] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return gx, gw
    span = (ho - 1) * wp + wo
    gpad = np.zeros((n, o, ho, wp))
    gpad[:, :, :, :wo] = g
    gflat = gpad.reshape(n, o, ho * wp)[:, :, :span]
    if need_w:
        if not xp.flags.c_contiguous:
            xp = np.ascontiguousarray(xp)
        cols, _ = _flat_cols(xp, kh, kw, ho, wo, stride, dilation)
        gw = np.matmul(gflat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    if need_x and stride[0] == 1:
        # transposed convolution == correlation of the padded gradient with the flipped kernel
        wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        qh, qw = dilation[0] * (kh - 1), dilation[1] * (kw - 1)
        gp = np.zeros((n, o, ho + 2 * qh, wo + 2 * qw))
        gp[:, :, qh:qh + ho, qw:qw + wo] = g
        gx = _conv2d_im2col(gp, wf, hp, wp, (1, 1), dilation)
    elif need_x:
        gcols = np.matmul(w.reshape(o, c * kh * kw).T, gflat,
                          out=_scratch((n, c * kh * kw, span))).reshape(n, c, kh, kw, span)
        gx = np.zeros(xp.shape)
        if stride[0] == 1:
            gflat_x = gx.reshape(n, c, hp * wp)
            for i in range(kh):
                for j in range(kw):
                    off = i * dilation[0] * wp + j * dilation[1]
                    gflat_x[:, :, off:off + span] += gcols[:, :, i, j, :]
        else:
            for i in range(kh):
                band = np.zeros((n, c, ho * wp))
                for j in range(kw):
                    band[:, :, j * dilation[1]:j * dilation[1] + span] += gcols[:, :, i, j, :]
                gx[:, :, i * dilation[0]:i * dilation[0] + stride[0] * (ho - 1) + 1:stride[0],
                   :] += band.reshape(n, c, ho, wp)
    return gx, gw


def _conv2d_direct(xp, w, ho, wo, stride, dilation):
    out = np.zeros((xp.shape[0], w.shape[0], ho, wo))
    for i in range(w.shape[2]):
        for j in range(w.shape[3]):
            patch = xp[_tap_slices(i, j, ho, wo, stride, dilation)]
            out += np.einsum("nchw,oc->nohw", patch, w[:, :, i, j])
    return out


def _conv2d_direct_backward(g, xp, w, ho, wo, stride, dilation):
    gx = np.zeros(xp.shape)
    gw = np.zeros(w.shape)
    for i in range(w.shape[2]):
        for j in range(w.shape[3]):
            sl = _tap_slices(i, j, ho, wo, stride, dilation)
            gw[:, :, i, j] = np.einsum("nohw,nchw->oc", g, xp[sl])
            gx[sl] += np.einsum("nohw,oc->nchw", g, w[:, :, i, j])
    return gx, gw


def conv2d(x, kernel, bias=None, stride=1, padding=0, dilation=1,
           method: str = "im2col") -> Tensor:
    """2-D cross-correlation of (N, C, H, W) input with an (O, C, kh, kw) kernel.

    ``method`` selects the im2col/tensordot path or the per-tap direct path;
    both compute the same values.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    stride, padding, dilation = _pair(stride), _pair(padding), _pair(dilation)
    ho, wo = _conv_geometry(x.shape, kernel.shape, stride, padding, dilation)
    ph, pw = padding
    xd, wd = x.data, kernel.data
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else xd
    if method == "im2col":
        out = _conv2d_im2col(xp, wd, ho, wo, stride, dilation)
    elif method == "direct":
        out = _conv2d_direct(xp, wd, ho, wo, stride, dilation)
    else:
        raise ValueError(f"unknown conv method {method!r}")
    out = np.ascontiguousarray(out)

    def backward(g):
        if method == "direct":
            gxp, gw = _conv2d_direct_backward(g, xp, wd, ho, wo, stride, dilation)
        else:
            gxp, gw = _conv2d_im2col_backward(g, xp, wd, ho, wo, stride, dilation,
                                              x.requires_grad, kernel.requires_grad)
        gx = None
        if x.requires_grad:
            gx = gxp[:, :, ph:ph + xd.shape[2], pw:pw + xd.shape[3]]
        return gx, (gw if kernel.requires_grad else None)

    result = Tensor._from_op(out, (x, kernel), backward, "conv2d")
    if bias is not None:
        result = result + reshape(as_tensor(bias), (1, -1, 1, 1))
    return result


def conv1d(x, kernel, bias=None, stride: int = 1, padding: int = 0, dilation: int = 1,
           method: str = "im2col") -> Tensor:
    """1-D cross-correlation of (N, C, T) input with an (O, C, k) kernel.

    Unbatched (C, T) input is accepted and returns (O, T').
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 3 or kernel.ndim != 3:
        raise ShapeError(f"conv1d expects (N,C,T) input and (O,C,k) kernel, "
                         f"got {x.shape} and {kernel.shape}")
    n, c, t = x.shape
    o, ck, k = kernel.shape
    out = conv2d(reshape(x, (n, c, 1, t)), reshape(kernel, (o, ck, 1, k)),
                 stride=(1, stride), padding=(0, padding), dilation=(1, dilation),
                 method=method)
    out = reshape(out, (n, o, out.shape[-1]))
    if bias is not None:
        out = out + reshape(as_tensor(bias), (1, -1, 1))
    return reshape(out, out.shape[1:]) if squeeze else out


def numerical_gradient(fn, inputs: Iterable[np.ndarray], h: float = 1e-5) -> list:
    """Central finite differences of scalar ``fn(*inputs)`` w.r.t. each input."""
    inputs = [np.array(a, dtype=np.float64) for a in inputs]
    grads = []
    for arr in inputs:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(*inputs)
            flat[i] = orig - h
            fm = fn(*inputs)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads
