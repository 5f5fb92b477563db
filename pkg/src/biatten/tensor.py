"""Dense tensors with reverse-mode automatic differentiation.

Every op here takes and returns :class:`Tensor` objects backed by a numpy
array. An op whose inputs require gradients records its parents and an
adjoint closure; :func:`backward` walks the resulting graph once in reverse
topological order and accumulates gradients into the leaf tensors.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self.parents: tuple = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self)))

    def __rsub__(self, other):
        return add(_wrap(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=like.dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], adjoint: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out.parents = tuple(parents)
        out._backward = adjoint
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Graph:
    """Nodes reachable from an output, inputs always before their consumers."""

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        order: list = []
        seen: set = set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node.parents):
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = Graph.from_output(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# elementwise and shape plumbing


def add(a: Tensor, b: Tensor) -> Tensor:
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose_last(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, bounds, axis=axis)),
        "concat",
    )


def sum_all(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    return _make(
        np.asarray(a.data.mean()),
        (a,),
        lambda g: (np.full(a.shape, g / n, dtype=a.dtype),),
        "mean",
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _make(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g),
        "matmul",
    )


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape (N, F) and weight of shape (G, F)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def adjoint(g):
        gb = g.sum(axis=0) if bias is not None else None
        return (g @ weight.data, g.T @ x.data) + ((gb,) if bias is not None else ())

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return _make(out, parents, adjoint, "linear")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, with max subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def adjoint(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (x,), adjoint, "softmax")


def variance(x: Tensor, axes: Optional[tuple] = None) -> Tensor:
    """Population variance (divisor = element count) over ``axes`` (all by default)."""
    if x.size == 0:
        raise ShapeError("variance of an empty tensor")
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    n = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    out = (centered**2).mean(axis=axes)

    def adjoint(g):
        g = np.asarray(g)
        if axes is not None:
            g = np.expand_dims(g, axes)
        return (g * centered * (2.0 / n),)

    return _make(np.asarray(out), (x,), adjoint, "variance")


# ---------------------------------------------------------------------------
# convolutional layers


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 1) -> Tensor:
    """3x3 cross-correlation (no kernel flip) over an NCHW batch."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if c != c_in:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {c_in}")
    if (kh, kw) != (3, 3):
        raise ShapeError(f"conv2d: kernel must be 3x3, got {kh}x{kw}")
    if padding not in (0, 1) or stride < 1:
        raise ShapeError(f"conv2d: unsupported padding={padding} stride={stride}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {c_out} output channels")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {h}x{w} too small for a 3x3 kernel")

    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pad) if padding else x.data
    taps = [(i, j) for i in range(kh) for j in range(kw)]

    def im2col():
        # (N, C*9, Ho*Wo), channel-major to match weight.reshape(C_out, -1)
        cols = np.empty((n, c, kh * kw, ho, wo), dtype=xp.dtype)
        for t, (i, j) in enumerate(taps):
            cols[:, :, t] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
        return cols.reshape(n, c * kh * kw, ho * wo)

    wmat = weight.data.reshape(c_out, -1)
    out = np.matmul(wmat, im2col())
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, c_out, ho, wo)

    def adjoint(g):
        gflat = g.reshape(n, c_out, ho * wo)
        gw = gx = None
        if weight.requires_grad:
            gw = np.matmul(gflat, im2col().transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gflat).reshape(n, c, kh * kw, ho, wo)
            gxp = np.zeros_like(xp)
            for t, (i, j) in enumerate(taps):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, t]
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        grads = (gx, gw)
        if bias is not None:
            grads += (gflat.sum(axis=(0, 2)),)
        return grads

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return _make(out, parents, adjoint, "conv2d")


class BatchNormState:
    """Running per-channel statistics for :func:`batch_norm`."""

    def __init__(self, channels: int, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def copy(self) -> "BatchNormState":
        other = BatchNormState.__new__(BatchNormState)
        other.running_mean = self.running_mean.copy()
        other.running_var = self.running_var.copy()
        return other


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"batch_norm: expected NCHW input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta must have shape ({c},)")
    bshape = (1, c, 1, 1)
    g_ = gamma.data.reshape(bshape)
    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        state.running_mean[...] = (1 - momentum) * state.running_mean + momentum * mu
        state.running_var[...] = (1 - momentum) * state.running_var + momentum * var
    else:
        mu, var = state.running_mean, state.running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype).reshape(bshape)
    xhat = (x.data - mu.reshape(bshape).astype(x.dtype)) * inv_std
    out = g_ * xhat + beta.data.reshape(bshape)

    def adjoint(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * g_
        if training:
            dx = (inv_std / m) * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), adjoint, "batch_norm")


def _bins(extent: int, count: int) -> list:
    return [((i * extent) // count, -((-(i + 1) * extent) // count)) for i in range(count)]


def adaptive_avg_pool(x: Tensor, out: tuple) -> Tensor:
    """Average over adaptively sized windows to reach spatial size ``out``."""
    oh, ow = out
    n, c, h, w = x.shape
    if not (1 <= oh <= h and 1 <= ow <= w):
        raise ShapeError(f"adaptive_avg_pool: output {out} must fit inside input {h}x{w}")
    rows, cols = _bins(h, oh), _bins(w, ow)
    res = np.empty((n, c, oh, ow), dtype=x.dtype)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            res[:, :, i, j] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

    def adjoint(g):
        gx = np.zeros_like(x.data)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                gx[:, :, r0:r1, c0:c1] += (g[:, :, i, j] / ((r1 - r0) * (c1 - c0)))[:, :, None, None]
        return (gx,)

    return _make(res, (x,), adjoint, "adaptive_avg_pool")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference."""
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss: shapes {pred.shape} and {target.shape} differ")
    if pred.size == 0:
        raise ShapeError("l1_loss of empty input")
    diff = pred.data - target.data
    n = pred.size

    def adjoint(g):
        s = np.sign(diff) * (g / n)
        return s, -s

    return _make(np.asarray(np.abs(diff).mean()), (pred, target), adjoint, "l1_loss")
