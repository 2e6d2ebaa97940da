"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op returns a new :class:`Tensor`. When any input requires a gradient
the output remembers its parents and a closure that maps the output gradient
to one gradient per parent. :func:`backward` walks that record in reverse
topological order.

Ops accept optional leading batch axes wherever the natural operand is a
``T x C`` sequence, so a stack of equally long sequences can go through a
network in one call.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A float64 array plus an optional gradient slot and graph record."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Optional[Callable] = None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # basic properties
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
        return self._backward is None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return index(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    @property
    def T(self): return transpose(self)


def _raise_item(shape):
    raise ContractError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward_fn, op)
    return Tensor(data, op=op)


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


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# graph traversal


class Graph:
    """Topologically ordered record of the ops that produced ``output``."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes = _toposort(output)

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list:
        seen, out = set(), []
        for node in self.nodes:
            for p in node._parents:
                if p.is_leaf and p.requires_grad and id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        return out


def _toposort(root: Tensor) -> list:
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited or node.is_leaf:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and not p.is_leaf:
                stack.append((p, False))
    return order


def backward(loss: Tensor, graph: Optional[Graph] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaf gradients accumulate across calls; call ``zero_grad`` to reset.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss.is_leaf:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    if graph is None:
        graph = Graph(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p.is_leaf:
                p.grad = pg.copy() if p.grad is None else p.grad + pg
            elif id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)), "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _stable_sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "maximum")
    pick_a = a.data >= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
                 "maximum")


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "minimum")
    pick_a = a.data <= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
                 "minimum")


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def smooth_l1(a, beta: float = 1.0) -> Tensor:
    """Huber-style smooth L1, quadratic below ``beta``."""
    a = as_tensor(a)
    ax = np.abs(a.data)
    quad = ax < beta
    out = np.where(quad, 0.5 * a.data ** 2 / beta, ax - 0.5 * beta)
    return _make(out, (a,), lambda g: (g * np.where(quad, a.data / beta, np.sign(a.data)),),
                 "smooth_l1")


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if n == 0:
        raise DegenerateInputError(f"mean over empty axis of shape {a.shape}")
    return scale(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Reverse the last two axes by default."""
    a = as_tensor(a)
    if axes is None:
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def index(a, idx) -> Tensor:
    """``a[idx]`` with scatter-add backward (fancy indices may repeat)."""
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.int64)

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), bw, "index")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, ts, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(f"stack: incompatible shapes {[t.shape for t in ts]}") from None

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(out, ts, bw, "stack")


def pad_time(a, before: int, after: int) -> Tensor:
    """Zero-pad axis -2 (the time axis of a ``... x T x C`` tensor)."""
    a = as_tensor(a)
    widths = [(0, 0)] * a.ndim
    widths[-2] = (before, after)
    T = a.shape[-2]
    return _make(np.pad(a.data, widths), (a,),
                 lambda g: (g[..., before:before + T, :],), "pad_time")


# ---------------------------------------------------------------------------
# linear algebra and network primitives


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes (leading axes broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}") from None

    def bw(g):
        da = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        db = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if da is None else _unbroadcast(da, a.shape),
                None if db is None else _unbroadcast(db, b.shape))

    return _make(out, (a, b), bw, "matmul")


def conv1d(x, kernel, dilation: int = 1, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 1-D convolution (cross-correlation) along the time axis.

    Args:
        x: ``(..., T, C_in)`` input.
        kernel: ``(k, C_in, C_out)`` weights.

    Returns:
        ``(..., T', C_out)`` with ``T' = (T + 2p - (k-1)d - 1) // stride + 1``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 3 or x.ndim < 2 or x.shape[-1] != kernel.shape[1]:
        raise DimensionError(f"conv1d: input {x.shape} incompatible with kernel {kernel.shape}")
    if dilation < 1 or stride < 1 or padding < 0:
        raise DimensionError(f"conv1d: bad dilation={dilation} stride={stride} padding={padding}")
    k, cin, cout = kernel.shape
    T = x.shape[-2]
    extent = (k - 1) * dilation + 1
    if extent > T + 2 * padding:
        raise DegenerateInputError(
            f"conv1d: kernel extent {extent} exceeds padded length {T + 2 * padding}")
    t_out = (T + 2 * padding - extent) // stride + 1
    widths = [(0, 0)] * x.ndim
    widths[-2] = (padding, padding)
    xp = np.pad(x.data, widths) if padding else x.data
    span = stride * (t_out - 1) + 1
    cols = np.stack([xp[..., j * dilation: j * dilation + span: stride, :] for j in range(k)],
                    axis=-2)  # (..., T', k, C_in)
    flat = cols.reshape(cols.shape[:-2] + (k * cin,))
    kmat = kernel.data.reshape(k * cin, cout)
    out = flat @ kmat

    def bw(g):
        dx = dk = None
        if x.requires_grad:
            dcols = (g @ kmat.T).reshape(cols.shape)
            dxp = np.zeros(xp.shape)
            for j in range(k):
                dxp[..., j * dilation: j * dilation + span: stride, :] += dcols[..., j, :]
            dx = dxp[..., padding: padding + T, :]
        if kernel.requires_grad:
            dk = (flat.reshape(-1, k * cin).T @ g.reshape(-1, cout)).reshape(kernel.shape)
        return dx, dk

    return _make(out, (x, kernel), bw, "conv1d")


def softmax(x, axis: int = -1, scale: float = 1.0) -> Tensor:
    """``exp(x / scale)`` normalised along ``axis`` (max-subtracted)."""
    x = as_tensor(x)
    if scale <= 0:
        raise DimensionError(f"softmax: scale must be positive, got {scale}")
    z = x.data / scale
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)) / scale,)

    return _make(out, (x,), bw, "softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if eps <= 0:
        raise DimensionError("layer_norm: eps must be positive")
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs channels {c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gain, bias), bw, "layer_norm")


def global_avg_pool(x) -> Tensor:
    """Mean over the time axis: ``(..., T, C) -> (..., C)``."""
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[-2] == 0:
        raise DegenerateInputError(f"global_avg_pool: empty time axis in shape {x.shape}")
    return mean(x, axis=-2)


def linear(x, weight, bias=None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def parameters_of(tensors: Iterable[Tensor]) -> list:
    return [t for t in tensors if t.requires_grad and t.is_leaf]
