"""Dense arrays with a recorded reverse-mode tape.

Every op produces a new immutable :class:`Tensor`. When gradient recording is
enabled and at least one input requires a gradient, the op attaches an
:class:`OpRecord` holding its inputs and a backward closure over the saved
intermediates. :meth:`Tensor.backward` replays those records in reverse
topological order and accumulates gradients into the leaves.

Layout conventions used by the convolution kernels: activations are
``(x, y, z, channel)`` and kernels are ``(kx, ky, kz, c_in, c_out)``.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericError, ShapeError

DEFAULT_DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


@dataclass
class OpRecord:
    op: str
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence]
    saved: dict = field(default_factory=dict)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "record", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.record = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.item())

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # -- backward ------------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every leaf that requires a gradient."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        order = _topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.record is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            input_grads = node.record.backward(g)
            for inp, ig in zip(node.record.inputs, input_grads):
                if ig is None or not _needs_grad(inp):
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        return self

    # -- operators -----------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _needs_grad(t):
    return isinstance(t, Tensor) and (t.requires_grad or t.record is not None)


def _topological_order(root):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node.record is not None:
            for inp in node.record.inputs:
                if _needs_grad(inp) and id(inp) not in visited:
                    stack.append((inp, False))
    return order


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _coerce_pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(a, Tensor):
        a, b = as_tensor(a), as_tensor(b)
    return a, b


def _make(op, out, inputs, backward, **saved):
    if not np.isfinite(out).all():
        raise NumericError(f"op {op!r} produced a non-finite value")
    t = Tensor(out)
    if _grad_enabled and any(_needs_grad(i) for i in inputs):
        t.record = OpRecord(op, tuple(inputs), backward, saved)
    return t


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise -----------------------------------------------------------
def add(a, b):
    a, b = _coerce_pair(a, b)
    _check_broadcast("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _coerce_pair(a, b)
    _check_broadcast("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _coerce_pair(a, b)
    _check_broadcast("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = _coerce_pair(a, b)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a):
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def exp(a):
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a):
    if np.any(a.data <= 0):
        raise NumericError("op 'log' received a non-positive value")
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a):
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a):
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


# -- reductions and reshaping -----------------------------------------------
def sum_(a, axis=None, keepdims=False):
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape):
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)
    return _make("transpose", np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inverse),))


def getitem(a, index):
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make("getitem", np.array(out), (a,), backward)


def take(a, indices, axis=0):
    indices = np.asarray(indices, dtype=np.intp)
    if indices.size and (indices.min() < -a.shape[axis] or indices.max() >= a.shape[axis]):
        raise ShapeError(f"take: index out of range for axis {axis} of extent {a.shape[axis]}")
    out = np.take(a.data, indices, axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        np.add.at(moved, indices, gm)
        return (full,)

    return _make("take", out, (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make("concat", out, tuple(tensors),
                 lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: {exc}") from None
    n = len(tensors)
    return _make("stack", out, tuple(tensors),
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def matmul(a, b):
    a, b = _coerce_pair(a, b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul: scalar operands are not supported")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        ad = a.data if a.ndim > 1 else a.data[None, :]
        bd = b.data if b.ndim > 1 else b.data[:, None]
        gg = g
        if a.ndim == 1:
            gg = np.expand_dims(gg, -2)
        if b.ndim == 1:
            gg = np.expand_dims(gg, -1)
        ga = _unbroadcast(np.matmul(gg, np.swapaxes(bd, -1, -2)), ad.shape).reshape(a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), gg), bd.shape).reshape(b.shape)
        return ga, gb

    return _make("matmul", out, (a, b), backward)


def linear(x, weight, bias=None):
    """``x @ weight.T (+ bias)`` with ``weight`` stored as (out, in); ``x`` is (..., in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[-1]} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data
        gw = g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1])
        gb = None if bias is None else g.reshape(-1, g.shape[-1]).sum(axis=0)
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make("linear", out, inputs, backward)


# -- normalised exponentials -------------------------------------------------
def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make("softmax", out, (a,),
                 lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    return _make("log_softmax", out, (a,),
                 lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),))


def logsumexp(a, axis=None):
    m = a.data.max(axis=axis, keepdims=True)
    s = np.exp(a.data - m)
    total = s.sum(axis=axis, keepdims=True)
    out = m + np.log(total)
    weights = s / total
    squeezed = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (g * weights,)

    return _make("logsumexp", np.asarray(squeezed), (a,), backward)


# -- 3D convolution and pooling ------------------------------------------------
def _triple(v, what):
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ConfigError(f"{what} must have 3 entries, got {v}")
    return v


def conv3d(x, kernel, padding=0, stride=1):
    """Cross-correlate ``x[x,y,z,c_in]`` with ``kernel[kx,ky,kz,c_in,c_out]``.

    Output extent per axis is ``(n + 2*pad - k) // stride + 1``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    pad = _triple(padding, "padding")
    st = _triple(stride, "stride")
    if x.ndim != 4 or kernel.ndim != 5:
        raise ShapeError(f"conv3d expects a rank-4 input and rank-5 kernel, got {x.shape} and {kernel.shape}")
    if x.shape[3] != kernel.shape[3]:
        raise ShapeError(f"conv3d: input has {x.shape[3]} channels but kernel expects {kernel.shape[3]}")
    if min(st) < 1:
        raise ConfigError(f"conv3d: stride must be >= 1, got {st}")
    if min(pad) < 0:
        raise ConfigError(f"conv3d: padding must be >= 0, got {pad}")
    ks = kernel.shape[:3]
    padded_shape = tuple(n + 2 * p for n, p in zip(x.shape[:3], pad))
    for axis, (n, k) in enumerate(zip(padded_shape, ks)):
        if k > n:
            raise ShapeError(f"conv3d: kernel extent {k} exceeds padded input extent {n} on axis {axis}")
    xp = np.pad(x.data, [(pad[0], pad[0]), (pad[1], pad[1]), (pad[2], pad[2]), (0, 0)])
    win = sliding_window_view(xp, ks, axis=(0, 1, 2))[:: st[0], :: st[1], :: st[2]]
    out_sp = win.shape[:3]
    c_in, c_out = kernel.shape[3], kernel.shape[4]
    # rows: output voxel; columns: (c_in, kx, ky, kz) matching the window layout
    cols = win.reshape(-1, c_in * ks[0] * ks[1] * ks[2])
    kmat = np.transpose(kernel.data, (3, 0, 1, 2, 4)).reshape(-1, c_out)
    out = (cols @ kmat).reshape(out_sp + (c_out,))
    need_x = _needs_grad(x)

    def backward(g):
        g2 = g.reshape(-1, c_out)
        gk = None
        if _needs_grad(kernel):
            gk = (cols.T @ g2).reshape(c_in, ks[0], ks[1], ks[2], c_out).transpose(1, 2, 3, 0, 4)
        gx = None
        if need_x:
            gxp = np.zeros_like(xp)
            for a in range(ks[0]):
                for b in range(ks[1]):
                    for c in range(ks[2]):
                        contrib = g @ kernel.data[a, b, c].T
                        gxp[a: a + st[0] * out_sp[0]: st[0],
                            b: b + st[1] * out_sp[1]: st[1],
                            c: c + st[2] * out_sp[2]: st[2], :] += contrib
            gx = gxp[pad[0]: pad[0] + x.shape[0], pad[1]: pad[1] + x.shape[1], pad[2]: pad[2] + x.shape[2]]
        return gx, gk

    return _make("conv3d", out, (x, kernel), backward)


def maxpool3d(x, ratio, ceil_mode=False):
    """Max over disjoint ``ratio`` windows of a rank-4 ``(x, y, z, c)`` tensor.

    Ties route the gradient to the first cell in (dx, dy, dz) lexicographic
    order. With ``ceil_mode`` a trailing partial window is allowed.
    """
    x = as_tensor(x)
    r = _triple(ratio, "ratio")
    if x.ndim != 4:
        raise ShapeError(f"maxpool3d expects a rank-4 input, got shape {x.shape}")
    data = x.data
    if ceil_mode:
        extra = [(-n) % k for n, k in zip(x.shape[:3], r)]
        if any(extra):
            data = np.pad(data, [(0, extra[0]), (0, extra[1]), (0, extra[2]), (0, 0)],
                          constant_values=-np.inf)
    for axis, (n, k) in enumerate(zip(data.shape[:3], r)):
        if min(r) < 1:
            raise ConfigError(f"maxpool3d: ratio must be >= 1, got {r}")
        if n % k:
            raise ConfigError(f"maxpool3d: extent {n} on axis {'xyz'[axis]} is not divisible by ratio {k}")
    ox, oy, oz = (n // k for n, k in zip(data.shape[:3], r))
    c = data.shape[3]
    blocks = data.reshape(ox, r[0], oy, r[1], oz, r[2], c).transpose(0, 2, 4, 6, 1, 3, 5)
    blocks = blocks.reshape(ox, oy, oz, c, -1)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    padded_shape = data.shape

    def backward(g):
        onehot = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(onehot, arg[..., None], g[..., None], axis=-1)
        full = onehot.reshape(ox, oy, oz, c, r[0], r[1], r[2]).transpose(0, 4, 1, 5, 2, 6, 3)
        full = full.reshape(padded_shape)
        return (full[: x.shape[0], : x.shape[1], : x.shape[2]],)

    return _make("maxpool3d", out, (x,), backward)


def window_mean(x, window, hop, axis=2):
    """Means over length-``window`` slices of ``axis`` starting every ``hop`` cells."""
    x = as_tensor(x)
    n = x.shape[axis]
    if window > n:
        raise ConfigError(f"window_mean: window {window} exceeds extent {n}")
    if hop < 1:
        raise ConfigError(f"window_mean: hop must be >= 1, got {hop}")
    starts = list(range(0, n - window + 1, hop))
    pieces = []
    for s in starts:
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(s, s + window)
        pieces.append(mean(getitem(x, tuple(idx)), axis=axis, keepdims=True))
    return concat(pieces, axis=axis)


def dropout(x, rate, rng):
    """Inverted dropout; ``rng`` is a numpy Generator."""
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return mul(x, Tensor(keep))
