"""Dense array type with reverse-mode automatic differentiation.

The operation set is deliberately closed: matmul, elementwise arithmetic,
exp/log/sqrt/pow, (leaky) ReLU, reductions, softmax, row gather/scatter,
concatenation, broadcast, transpose and reshape. Every backward rule is
exercised by finite-difference checks in the test suite.

Storage is float32 by default; sum/mean reductions accumulate in float64
before casting back. Graphs built from float64 leaves stay in float64,
which is what the gradient checker uses.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _sum_to_shape(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def const(data, dtype=None) -> "Tensor":
        if isinstance(data, Tensor):
            return data
        return Tensor(data, requires_grad=False, dtype=dtype)

    @classmethod
    def _from_op(cls, data, parents, backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic protocol --------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # -- elementwise arithmetic ------------------------------------------------

    def __add__(self, other):
        other = Tensor.const(other, dtype=self.data.dtype)

        def backward(g):
            return _sum_to_shape(g, self.data.shape), _sum_to_shape(g, other.data.shape)

        return Tensor._from_op(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __sub__(self, other):
        other = Tensor.const(other, dtype=self.data.dtype)

        def backward(g):
            return _sum_to_shape(g, self.data.shape), _sum_to_shape(-g, other.data.shape)

        return Tensor._from_op(self.data - other.data, (self, other), backward)

    def __rsub__(self, other):
        return Tensor.const(other, dtype=self.data.dtype) - self

    def __neg__(self):
        def backward(g):
            return (-g,)

        return Tensor._from_op(-self.data, (self,), backward)

    def __mul__(self, other):
        other = Tensor.const(other, dtype=self.data.dtype)

        def backward(g):
            return (
                _sum_to_shape(g * other.data, self.data.shape),
                _sum_to_shape(g * self.data, other.data.shape),
            )

        return Tensor._from_op(self.data * other.data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor.const(other, dtype=self.data.dtype)

        def backward(g):
            return (
                _sum_to_shape(g / other.data, self.data.shape),
                _sum_to_shape(-g * self.data / (other.data * other.data), other.data.shape),
            )

        return Tensor._from_op(self.data / other.data, (self, other), backward)

    def __rtruediv__(self, other):
        return Tensor.const(other, dtype=self.data.dtype) / self

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    # -- graph traversal ---------------------------------------------------

    def backward(self, grad=None):
        """Accumulate gradients of this (scalar) tensor into the graph leaves."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient requires a scalar")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(topo):
            if node._backward is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if not parent.requires_grad or g is None:
                    continue
                if parent.grad is None:
                    parent.grad = np.asarray(g, dtype=parent.data.dtype)
                else:
                    parent.grad = parent.grad + g

    # -- convenience op methods ---------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def max(self, axis, keepdims=False):
        return tmax(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


# -- core operations ------------------------------------------------------


def _flat2d(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x).reshape(-1, x.shape[-1])


def _bgemm(x: np.ndarray, y: np.ndarray, tx: bool = False, ty: bool = False) -> np.ndarray:
    """Per-slice BLAS gemm for stacks of matrices ([B, n, k] @ [B, k, m]),
    broadcasting a size-1 batch on either side. Keeps every product on the
    dgemm/sgemm fast path, which numpy's strided 3-d matmul does not."""
    bx, by = x.shape[0], y.shape[0]
    bo = max(bx, by)
    n = x.shape[2] if tx else x.shape[1]
    m = y.shape[1] if ty else y.shape[2]
    out = np.empty((bo, n, m), dtype=np.result_type(x, y))
    for i in range(bo):
        xi = x[i % bx]
        yi = y[i % by]
        np.dot(xi.T if tx else xi, yi.T if ty else yi, out=out[i])
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: 2-d @ 2-d, [B, n, k] @ [B, k, m] (size-1 batches
    broadcast), or leading batch dimensions over a 2-d second operand."""
    a = Tensor.const(a)
    b = Tensor.const(b)
    if a.data.ndim < b.data.ndim:
        raise ValueError("matmul: first operand must have rank >= second operand")
    if a.data.ndim == b.data.ndim == 3:
        out = _bgemm(a.data, b.data)

        def backward(g):
            ga = _sum_to_shape(_bgemm(g, b.data, ty=True), a.data.shape)
            gb = _sum_to_shape(_bgemm(a.data, g, tx=True), b.data.shape)
            return ga, gb

    elif b.data.ndim == 2:
        out = (_flat2d(a.data) @ b.data).reshape(a.data.shape[:-1] + (b.data.shape[-1],))

        def backward(g):
            ga = np.matmul(g, b.data.T)
            gb = _flat2d(a.data).T @ _flat2d(g)
            return ga, gb

    else:
        out = np.matmul(a.data, b.data)

        def backward(g):
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            return _sum_to_shape(ga, a.data.shape), _sum_to_shape(gb, b.data.shape)

    return Tensor._from_op(out, (a, b), backward)


def exp(x: Tensor) -> Tensor:
    x = Tensor.const(x)
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return Tensor._from_op(out, (x,), backward)


def log(x: Tensor) -> Tensor:
    x = Tensor.const(x)

    def backward(g):
        return (g / x.data,)

    return Tensor._from_op(np.log(x.data), (x,), backward)


def sqrt(x: Tensor) -> Tensor:
    x = Tensor.const(x)
    out = np.sqrt(x.data)

    def backward(g):
        return (g / (2.0 * out),)

    return Tensor._from_op(out, (x,), backward)


def pow_const(x: Tensor, exponent: float) -> Tensor:
    x = Tensor.const(x)
    out = np.power(x.data, exponent)

    def backward(g):
        return (g * exponent * np.power(x.data, exponent - 1.0),)

    return Tensor._from_op(out, (x,), backward)


def absolute(x: Tensor) -> Tensor:
    """|x| with the subgradient at 0 taken as 0."""
    x = Tensor.const(x)

    def backward(g):
        return (g * np.sign(x.data),)

    return Tensor._from_op(np.abs(x.data), (x,), backward)


def relu(x: Tensor) -> Tensor:
    x = Tensor.const(x)

    def backward(g):
        return (g * (x.data > 0),)

    return Tensor._from_op(np.maximum(x.data, 0), (x,), backward)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    x = Tensor.const(x)

    def backward(g):
        return (g * np.where(x.data > 0, 1.0, slope).astype(x.data.dtype),)

    return Tensor._from_op(np.where(x.data > 0, x.data, slope * x.data), (x,), backward)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    """Sum with float64 accumulation, cast back to the input dtype."""
    x = Tensor.const(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.data.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape),)

    return Tensor._from_op(out, (x,), backward)


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    x = Tensor.const(x)
    out = np.mean(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.data.dtype)
    if axis is None:
        count = x.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([x.data.shape[a] for a in axis]))
    else:
        count = x.data.shape[axis]

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape) / count,)

    return Tensor._from_op(out, (x,), backward)


def tmax(x: Tensor, axis: int, keepdims=False) -> Tensor:
    """Max along one axis; ties route the gradient to the lowest index."""
    x = Tensor.const(x)
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), g, axis=axis)
        return (gx,)

    return Tensor._from_op(out, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis` (max-subtraction)."""
    x = Tensor.const(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return Tensor._from_op(out, (x,), backward)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last dimension; rejects non-finite input."""
    x = Tensor.const(x)
    if x.data.ndim < 1:
        raise ValueError("softmax_lastdim requires at least one dimension")
    if not np.isfinite(x.data).all():
        raise ValueError("softmax_lastdim: input contains non-finite values")
    return softmax(x, axis=-1)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Collect feature rows: x [N, d] with idx [N, k] -> [N, k, d];
    batched x [B, N, d] with idx [B, N, k] -> [B, N, k, d]."""
    x = Tensor.const(x)
    idx = np.asarray(idx)
    if x.data.ndim == 2:
        out = x.data[idx]

        def backward(g):
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx.reshape(-1), g.reshape(-1, x.data.shape[-1]))
            return (gx,)

    elif x.data.ndim == 3:
        b, n, d = x.data.shape
        flat = (idx + (np.arange(b, dtype=idx.dtype) * n)[:, None, None]).reshape(-1)
        out = x.data.reshape(b * n, d)[flat].reshape(idx.shape + (d,))

        def backward(g):
            gx = np.zeros((b * n, d), dtype=x.data.dtype)
            np.add.at(gx, flat, g.reshape(-1, d))
            return (gx.reshape(b, n, d),)

    else:
        raise ValueError("gather_rows expects a 2-d or 3-d tensor")
    return Tensor._from_op(out, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [Tensor.const(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return Tensor._from_op(out, tuple(tensors), backward)


def broadcast_to(x: Tensor, shape) -> Tensor:
    x = Tensor.const(x)
    shape = tuple(shape)

    def backward(g):
        return (_sum_to_shape(g, x.data.shape),)

    return Tensor._from_op(np.broadcast_to(x.data, shape), (x,), backward)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along `axis`."""
    x = Tensor.const(x)
    key = (slice(None),) * axis + (slice(start, start + length),)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return Tensor._from_op(x.data[key], (x,), backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    x = Tensor.const(x)
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return Tensor._from_op(np.transpose(x.data, axes), (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    x = Tensor.const(x)

    def backward(g):
        return (g.reshape(x.data.shape),)

    return Tensor._from_op(x.data.reshape(shape), (x,), backward)


# -- composite helpers -----------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last dimension: x @ w (+ b), fused into one node."""
    if b is None:
        return matmul(x, w)
    x = Tensor.const(x)
    w = Tensor.const(w)
    b = Tensor.const(b)
    out = (_flat2d(x.data) @ w.data).reshape(x.data.shape[:-1] + (w.data.shape[-1],))
    out += b.data

    def backward(g):
        g2 = _flat2d(g)
        gx = (g2 @ w.data.T).reshape(x.data.shape)
        gw = _flat2d(x.data).T @ g2
        gb = g2.sum(axis=0) if b.data.ndim == 1 else _sum_to_shape(g, b.data.shape)
        return gx, gw, gb

    return Tensor._from_op(out, (x, w, b), backward)


def affine_norm(x: Tensor, gain: Tensor, bias: Tensor, axes, eps: float = 1e-5) -> Tensor:
    """Fused (x - mean)/std * gain + bias with the statistics over `axes`.

    One op instead of the normalize/mul/add chain: the deep attention stack
    calls this often enough that the saved intermediates matter.
    """
    x = Tensor.const(x)
    gain = Tensor.const(gain)
    bias = Tensor.const(bias)
    axes = (axes,) if isinstance(axes, int) else tuple(axes)
    mu = np.mean(x.data, axis=axes, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=axes, keepdims=True)
    std = np.sqrt(var + eps)
    y = centered / std
    out = y * gain.data + bias.data

    def backward(g):
        gy = g * gain.data
        m1 = np.mean(gy, axis=axes, keepdims=True)
        m2 = np.mean(gy * y, axis=axes, keepdims=True)
        gx = (gy - m1 - y * m2) / std
        gg = _sum_to_shape(g * y, gain.data.shape)
        gb = _sum_to_shape(g, bias.data.shape)
        return gx, gg, gb

    return Tensor._from_op(out, (x, gain, bias), backward)


def normalize(x: Tensor, axis, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance normalization along `axis` (no affine part)."""
    mu = tmean(x, axis=axis, keepdims=True)
    centered = x - mu
    var = tmean(centered * centered, axis=axis, keepdims=True)
    return centered / sqrt(var + eps)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last (feature) dimension with affine."""
    return normalize(x, axis=-1, eps=eps) * gain + bias
