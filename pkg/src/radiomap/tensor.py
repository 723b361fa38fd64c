"""Dense float64 tensors with a record-on-forward tape for reverse-mode gradients.

Every differentiable op appends one node to the active :class:`Graph`; the
append order is a valid topological order, so :func:`backward` just walks the
tape from the loss node down to index 0.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

CHECK_FINITE = True


@dataclass
class Node:
    index: int
    parents: tuple
    backward: Callable


class Graph:
    """Append-only operation tape."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.generation = 0

    def record(self, parents, backward_fn) -> Node:
        node = Node(len(self.nodes), tuple(parents), backward_fn)
        self.nodes.append(node)
        return node

    def clear(self):
        self.nodes = []
        self.generation += 1

    def __len__(self):
        return len(self.nodes)


_graph = Graph()
_grad_enabled = True


def get_graph() -> Graph:
    return _graph


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self._gen = -1

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def _live_node(self) -> Node | None:
        if self.node is not None and self._gen == _graph.generation:
            return self.node
        return None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracks(t: Tensor) -> bool:
    return t.requires_grad and (t.node is None or t._live_node() is not None)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if CHECK_FINITE and not np.isfinite(data).all():
        raise FloatingPointError("non-finite value produced by tensor op")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node = None
    out._gen = -1
    out.requires_grad = False
    if _grad_enabled and any(_tracks(p) for p in parents):
        out.requires_grad = True
        out.node = _graph.record(parents, backward_fn)
        out._gen = _graph.generation
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise


def _check_broadcast(a: Tensor, b: Tensor):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, a.shape), _unbroadcast(-g * out / bd, b.shape)))


def elementwise(a, b, op: str) -> Tensor:
    try:
        fn = {"add": add, "sub": sub, "mul": mul}[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return _make(out, (x,), lambda g: (g / xd,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return _make(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------- activations


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)
    return _make(xd * s, (x,), lambda g: (g * (s * (1.0 + xd * (1.0 - s))),))


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = {"relu": relu, "silu": silu, "sigmoid": sigmoid}[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


def softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd, bd = gain.data, bias.data

    def backward(g):
        n = xd.shape[-1]
        gx = g * gd
        dx = inv / n * (n * gx - gx.sum(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _make(xhat * gd + bd, (x, gain, bias), backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading dimensions batch like ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(ad @ bd, (a, b), backward)


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def take(x: Tensor, index) -> Tensor:
    """Basic or fancy indexing; backward scatters with ``np.add.at``."""
    src = x.shape

    def backward(g):
        out = np.zeros(src)
        np.add.at(out, index, g)
        return (out,)

    return _make(np.array(x.data[index]), (x,), backward)


def scatter_rows(values: Tensor, rows: np.ndarray, n_rows: int) -> Tensor:
    """Place ``values[i]`` into row ``rows[i]`` of a zero (n_rows, ...) tensor."""
    out = np.zeros((n_rows,) + values.shape[1:])
    np.add.at(out, rows, values.data)
    return _make(out, (values,), lambda g: (g[rows],))


# ---------------------------------------------------------------- convolution


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    size = (n + 2 * pad - k) // stride + 1
    if size <= 0:
        raise ValueError("convolution output size is non-positive")
    return size


def im2col(x: Tensor, k: int, stride: int, pad: int) -> Tensor:
    """(B, C, H, W) -> (B*H'*W', k*k*C) patch matrix, columns ordered (ki, kj, c)."""
    B, C, H, W = x.shape
    Ho, Wo = _out_size(H, k, stride, pad), _out_size(W, k, stride, pad)
    xp = np.pad(x.data.transpose(0, 2, 3, 1), ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = np.empty((B, Ho, Wo, k, k, C))
    for di in range(k):
        for dj in range(k):
            cols[:, :, :, di, dj, :] = xp[:, di:di + stride * Ho:stride,
                                          dj:dj + stride * Wo:stride, :]

    def backward(g):
        g = g.reshape(B, Ho, Wo, k, k, C)
        gp = np.zeros(xp.shape)
        for di in range(k):
            for dj in range(k):
                gp[:, di:di + stride * Ho:stride, dj:dj + stride * Wo:stride, :] += \
                    g[:, :, :, di, dj, :]
        return (gp[:, pad:pad + H, pad:pad + W, :].transpose(0, 3, 1, 2),)

    return _make(cols.reshape(B * Ho * Wo, k * k * C), (x,), backward)


def conv2d_im2col(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0,
                  bias: Tensor | None = None) -> Tensor:
    """2-D cross-correlation on (C, H, W) or (B, C, H, W) input."""
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ValueError(f"kernel must be (O, C, k, k), got {w.shape}")
    O, C, k, _ = w.shape
    if k not in (1, 3) or stride not in (1, 2):
        raise ValueError("conv2d supports k in {1, 3} and stride in {1, 2}")
    single = x.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    B, Cx, H, W = x.shape
    if Cx != C:
        raise ValueError(f"input has {Cx} channels, kernel expects {C}")
    Ho, Wo = _out_size(H, k, stride, pad), _out_size(W, k, stride, pad)
    cols = im2col(x, k, stride, pad)
    kernel = reshape(transpose(w, (2, 3, 1, 0)), (k * k * C, O))
    out = transpose(reshape(matmul(cols, kernel), (B, Ho, Wo, O)), (0, 3, 1, 2))
    if bias is not None:
        out = add(out, reshape(bias, (O, 1, 1)))
    if single:
        out = reshape(out, (O, Ho, Wo))
    return out


def upsample_nearest2x(x: Tensor) -> Tensor:
    xd = x.data
    out = xd.repeat(2, axis=-2).repeat(2, axis=-1)

    def backward(g):
        s = g.shape[:-2] + (xd.shape[-2], 2, xd.shape[-1], 2)
        return (g.reshape(s).sum(axis=(-3, -1)),)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------- backward


def backward(loss: Tensor, retain_graph: bool = False):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss._live_node()
    if node is None:
        raise ValueError("loss is not connected to any tensor requiring grad")
    graph = _graph
    pending: dict[int, np.ndarray] = {node.index: np.ones_like(loss.data)}
    for idx in range(node.index, -1, -1):
        g = pending.pop(idx, None)
        if g is None:
            continue
        cur = graph.nodes[idx]
        for parent, pg in zip(cur.parents, cur.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pnode = parent._live_node()
            if pnode is None:
                if parent.node is not None:
                    continue
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            elif pnode.index in pending:
                pending[pnode.index] = pending[pnode.index] + pg
            else:
                pending[pnode.index] = pg
    if not retain_graph:
        graph.clear()


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)
