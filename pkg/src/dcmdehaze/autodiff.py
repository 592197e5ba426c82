"""Minimal reverse-mode autodiff over numpy arrays.

A Tensor wraps an ndarray and remembers how it was produced; calling
backward() on a scalar result walks the tape in reverse topological order
and accumulates gradients into every tensor with requires_grad=True.
Convolution, depthwise convolution and instance norm are fused primitives
backed by the kernels package; everything else is composed from
elementwise ops and reductions.

Graph construction order is deterministic, so repeated runs with the same
inputs produce bitwise-identical gradients.
"""

import contextlib

import numpy as np

from . import kernels
from .errors import ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the context (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.ndim != 0:
                raise ShapeError("backward() without a gradient requires a scalar tensor")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Convenience arithmetic; scalars are allowed on either side.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add(self, -other)
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _as_pair(a, b):
    """Coerce the operands of a binary op, treating bare python numbers as
    weak scalars: they adopt their tensor partner's dtype rather than forcing
    a float64 0-d array onto a float32 graph."""
    if isinstance(a, Tensor) and isinstance(b, (int, float)):
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    if isinstance(b, Tensor) and isinstance(a, (int, float)):
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    return as_tensor(a), as_tensor(b)


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True)


def _make(data, parents, backward):
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents), backward=backward)
    return Tensor(data)


def _unbroadcast(g, shape):
    """Sum gradient g down to the given (broadcast-source) shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_pair(a, b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_pair(a, b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out_data = x.data * mask

    def backward(g):
        x.accumulate_grad(g * mask)

    return _make(out_data, (x,), backward)


def leaky_relu(x, slope=0.2) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out_data = np.where(mask, x.data, x.data * x.dtype.type(slope))

    def backward(g):
        x.accumulate_grad(np.where(mask, g, g * x.dtype.type(slope)))

    return _make(out_data, (x,), backward)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)

    def backward(g):
        x.accumulate_grad(g * (1 - t * t))

    return _make(t, (x,), backward)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        x.accumulate_grad(g * s * (1 - s))

    return _make(s, (x,), backward)


def absolute(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.abs(x.data)

    def backward(g):
        x.accumulate_grad(g * np.sign(x.data))

    return _make(out_data, (x,), backward)


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    r = np.sqrt(x.data)

    def backward(g):
        x.accumulate_grad(g * 0.5 / r)

    return _make(r, (x,), backward)


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    out_data = np.asarray(x.data.mean())

    def backward(g):
        x.accumulate_grad(np.broadcast_to(g / n, x.data.shape).astype(x.dtype, copy=False))

    return _make(out_data, (x,), backward)


def concat(tensors, axis=1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        for t, s in zip(tensors, sizes):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offset, offset + s)
                t.accumulate_grad(g[tuple(idx)])
            offset += s

    return _make(out_data, tuple(tensors), backward)


def slice_channels(x, start, stop) -> Tensor:
    x = as_tensor(x)
    out_data = np.ascontiguousarray(x.data[:, start:stop])

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        x.accumulate_grad(full)

    return _make(out_data, (x,), backward)


def upsample2x(x) -> Tensor:
    """Nearest-neighbour 2x upsampling of a (B, C, H, W) tensor."""
    x = as_tensor(x)
    out_data = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        b, c, h2, w2 = g.shape
        x.accumulate_grad(g.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)))

    return _make(out_data, (x,), backward)


def global_avg_pool(x) -> Tensor:
    x = as_tensor(x)
    out_data = x.data.mean(axis=(2, 3), keepdims=True)
    n = x.data.shape[2] * x.data.shape[3]

    def backward(g):
        x.accumulate_grad(np.broadcast_to(g / n, x.data.shape).astype(x.dtype, copy=False))

    return _make(out_data, (x,), backward)


def _pad(data, p, mode):
    if p == 0:
        return data
    widths = ((0, 0), (0, 0), (p, p), (p, p))
    return np.pad(data, widths, mode="edge" if mode == "replicate" else "constant")


def _unpad_grad(dxp, p, mode):
    if p == 0:
        return dxp
    if mode == "zero":
        return dxp[:, :, p:-p, p:-p]
    # Replicate padding: border gradients fold back onto the clamped source
    # pixel. Rows first (corners ride along), then columns.
    dxp[:, :, p, :] += dxp[:, :, :p, :].sum(axis=2)
    dxp[:, :, -p - 1, :] += dxp[:, :, -p:, :].sum(axis=2)
    dxp = dxp[:, :, p:-p, :]
    dxp[:, :, :, p] += dxp[:, :, :, :p].sum(axis=3)
    dxp[:, :, :, -p - 1] += dxp[:, :, :, -p:].sum(axis=3)
    return np.ascontiguousarray(dxp[:, :, :, p:-p])


def conv2d(x, w, bias=None, stride=1, padding=0, pad_mode="zero") -> Tensor:
    """2-D convolution (cross-correlation) of (B, C, H, W) with (OC, C, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    bias = as_tensor(bias) if bias is not None else None
    b, c, h, wd = x.data.shape
    oc, ic, kh, kw = w.data.shape
    if ic != c:
        raise ShapeError(f"conv2d expected {ic} input channels, got {c}")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeError(f"input {h}x{wd} smaller than kernel {kh}x{kw} after padding {padding}")
    xp = _pad(x.data, padding, pad_mode)
    hp, wp = xp.shape[2], xp.shape[3]
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    cols = kernels.im2col(xp, kh, kw, stride, stride)             # (B, C*kh*kw, L)
    w2 = w.data.reshape(oc, c * kh * kw)
    out = np.matmul(w2, cols).reshape(b, oc, oh, ow)
    if bias is not None:
        out += bias.data.reshape(1, oc, 1, 1)

    def backward(g):
        g2 = np.ascontiguousarray(g).reshape(b, oc, oh * ow)
        if w.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            w.accumulate_grad(gw.reshape(w.data.shape))
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2)
            dxp = kernels.col2im(dcols, b, c, hp, wp, kh, kw, stride, stride, oh, ow)
            x.accumulate_grad(_unpad_grad(dxp, padding, pad_mode))

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, backward)


def depthwise_conv2d(x, w, bias=None, padding=0, pad_mode="replicate") -> Tensor:
    """Channel-by-channel convolution of (B, C, H, W) with per-channel (C, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    bias = as_tensor(bias) if bias is not None else None
    b, c, h, wd = x.data.shape
    wc, kh, kw = w.data.shape
    if wc != c:
        raise ShapeError(f"depthwise_conv2d expected {wc} channels, got {c}")
    xp = _pad(x.data, padding, pad_mode)
    hp, wp = xp.shape[2], xp.shape[3]
    out = kernels.depthwise_forward(xp, w.data)
    if bias is not None:
        out = out + bias.data.reshape(1, c, 1, 1)

    def backward(g):
        g = np.ascontiguousarray(g)
        if w.requires_grad:
            w.accumulate_grad(kernels.depthwise_weight_grad(xp, g, kh, kw))
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxp = kernels.depthwise_input_grad(g, w.data, hp, wp)
            x.accumulate_grad(_unpad_grad(dxp, padding, pad_mode))

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, backward)


def instance_norm(x, gamma, beta, eps=1e-5) -> Tensor:
    """Per-sample, per-channel normalization over the spatial axes."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n = x.data.shape[2] * x.data.shape[3]
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv_std
    g4 = gamma.data.reshape(1, -1, 1, 1)
    out = xhat * g4 + beta.data.reshape(1, -1, 1, 1)

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxhat = g * g4
            dvar = (dxhat * xc).sum(axis=(2, 3), keepdims=True) * (-0.5) * inv_std ** 3
            dmu = (-dxhat * inv_std).sum(axis=(2, 3), keepdims=True) \
                + dvar * (-2.0 / n) * xc.sum(axis=(2, 3), keepdims=True)
            x.accumulate_grad(dxhat * inv_std + dvar * (2.0 / n) * xc + dmu / n)

    return _make(out, (x, gamma, beta), backward)


class Module:
    """Container tracking parameters and submodules by attribute assignment."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ShapeError(f"state dict mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ShapeError(f"parameter '{name}' has shape {arr.shape}, expected {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def to_dtype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module):
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]
