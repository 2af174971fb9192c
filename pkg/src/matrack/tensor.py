"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

All data is 64-bit float, stored row-major in numpy arrays.  The graph is
built dynamically (define-by-run): every differentiable op records its
parents and a backward closure on the output tensor.  ``backward()`` on a
scalar walks the graph in reverse topological order and accumulates
gradients into every ``requires_grad`` tensor it reaches.  Repeated
``backward()`` calls accumulate; call ``zero_grad`` (or reset ``.grad``)
between steps.

Conventions:
  - relu'(0) := 0
  - elementwise binary ops follow numpy broadcasting; the backward pass
    sums gradients over broadcast axes
  - maximum/minimum route the gradient to the first argument on ties
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when an op that requires finite input receives NaN/inf."""


# per-thread so parallel forward-only evaluation cannot clobber another
# thread's (or the caller's) recording state
_grad_state = threading.local()


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only evaluation)."""
    prev = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        if type(data) is np.ndarray and data.dtype == np.float64:
            self.data = data
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- autograd -----------------------------------------------------------

    def backward(self):
        """Populate gradients of every reachable requires_grad tensor.

        The receiver must be scalar (size 1).  Gradients accumulate across
        repeated calls.
        """
        if self.data.size != 1:
            raise ShapeError(
                f"backward() requires a scalar loss, got shape {self.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in visited:
                    stack.append((p, False))

        flowing: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._backward_fn is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward_fn is not None:
                parent_grads = node._backward_fn(g)
                for p, pg in zip(node._parents, parent_grads):
                    if pg is None or not p.requires_grad:
                        continue
                    pg = _unbroadcast(pg, p.data.shape)
                    if id(p) in flowing:
                        flowing[id(p)] = flowing[id(p)] + pg
                    else:
                        flowing[id(p)] = pg

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad over axes that numpy broadcasting introduced or stretched."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


# -- elementwise binary -----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    return _node(data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return _node(data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    return _node(data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data / b.data
    except ValueError:
        raise ShapeError(f"div: incompatible shapes {a.shape} and {b.shape}")
    return _node(data, (a, b), lambda g: (g / b.data, -g * a.data / (b.data * b.data)))


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = np.maximum(a.data, b.data)
    mask = a.data >= b.data  # ties go to the first argument
    return _node(data, (a, b), lambda g: (g * mask, g * ~mask))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = np.minimum(a.data, b.data)
    mask = a.data <= b.data
    return _node(data, (a, b), lambda g: (g * mask, g * ~mask))


# -- elementwise unary ------------------------------------------------------


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _node(x.data * c, (x,), lambda g: (g * c,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0.0
    return _node(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data)
    return _node(e, (x,), lambda g: (g * e,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    r = np.sqrt(x.data)
    return _node(r, (x,), lambda g: (g * 0.5 / r,))


def power(x, p: float) -> Tensor:
    x = as_tensor(x)
    p = float(p)
    data = x.data ** p
    return _node(data, (x,), lambda g: (g * p * x.data ** (p - 1.0),))


def absolute(x) -> Tensor:
    x = as_tensor(x)
    s = np.sign(x.data)  # subgradient 0 at 0
    return _node(np.abs(x.data), (x,), lambda g: (g * s,))


def sin(x) -> Tensor:
    x = as_tensor(x)
    return _node(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),))


def cos(x) -> Tensor:
    x = as_tensor(x)
    return _node(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),))


def arcsin(x) -> Tensor:
    x = as_tensor(x)
    if np.any(np.abs(x.data) > 1.0):
        raise ValueError("arcsin: input outside [-1, 1]")
    return _node(np.arcsin(x.data), (x,), lambda g: (g / np.sqrt(1.0 - x.data * x.data),))


# -- reductions -------------------------------------------------------------


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, x.data.shape),)

    return _node(data, (x,), bw)


def tmean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    data = x.data.mean(axis=axis, keepdims=keepdims)
    n = x.data.size if axis is None else _axis_size(x.data.shape, axis)

    def bw(g):
        gg = np.asarray(g) / n
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, x.data.shape),)

    return _node(data, (x,), bw)


def _axis_size(shape, axis):
    if isinstance(axis, int):
        return shape[axis]
    n = 1
    for a in axis:
        n *= shape[a]
    return n


def mean_pool(x, axis: int, keepdims: bool = False) -> Tensor:
    """Average pooling along one axis (alias for mean with explicit axis)."""
    return tmean(x, axis=axis, keepdims=keepdims)


# -- shape manipulation -----------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = x.data.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    data = x.data.transpose(axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    return _node(data, (x,), lambda g: (g.transpose(inv),))


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    data = x.data[idx]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(data.copy(), (x,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _node(data, tuple(tensors), bw)


def split(x, sizes, axis: int = 0) -> list[Tensor]:
    """Split along an axis into chunks of the given sizes; inverse of concat."""
    x = as_tensor(x)
    if sum(sizes) != x.data.shape[axis]:
        raise ShapeError(
            f"split: sizes {sizes} do not sum to axis length {x.data.shape[axis]}"
        )
    out = []
    start = 0
    for s in sizes:
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, start + s)
        out.append(getitem(x, tuple(idx)))
        start += s
    return out


# -- matmul -----------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >= 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.shape} x {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: batch dims not broadcastable: {a.shape} x {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (ga, gb)

    return _node(data, (a, b), bw)


def affine(x, w, b=None) -> Tensor:
    """Fused linear layer step: x @ w (+ b) as a single graph node."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim < 2 or w.ndim != 2:
        raise ShapeError(f"affine: expected >= 2-D input and 2-D weight, got {x.shape} and {w.shape}")
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"affine: inner dimensions disagree: {x.shape} x {w.shape}")
    data = x.data @ w.data
    if b is None:

        def bw(g):
            return (g @ w.data.T, np.swapaxes(x.data, -1, -2) @ g)

        return _node(data, (x, w), bw)
    b = as_tensor(b)
    data = data + b.data

    def bwb(g):
        return (g @ w.data.T, np.swapaxes(x.data, -1, -2) @ g, g)

    return _node(data, (x, w, b), bwb)


# -- softmax / normalization ------------------------------------------------


def _require_finite(data: np.ndarray, op: str):
    # cheap single-reduction screen; the full scan only runs on suspicion
    if not np.isfinite(data.sum()) and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: input contains non-finite values")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _require_finite(x.data, "softmax")
    y = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(y, out=y)  # in place: y is a private intermediate
    y /= y.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _node(y, (x,), bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _require_finite(x.data, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        y = np.exp(out)
        return (g - y * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), bw)


def _normalize(data: np.ndarray, axis: int, eps: float):
    mu = data.mean(axis=axis, keepdims=True)
    centered = data - mu
    var = (centered * centered).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return centered * inv, inv


def _normalize_backward(g: np.ndarray, xhat: np.ndarray, inv: np.ndarray, axis: int):
    # d/dx of xhat = (x - mean) * inv with inv = (var + eps)^-1/2
    return (
        g - g.mean(axis=axis, keepdims=True) - xhat * (g * xhat).mean(axis=axis, keepdims=True)
    ) * inv


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xhat, inv = _normalize(x.data, -1, eps)
    out = xhat * gamma.data + beta.data

    def bw(g):
        red = tuple(range(g.ndim - 1))
        gx = _normalize_backward(g * gamma.data, xhat, inv, -1)
        return (gx, (g * xhat).sum(axis=red), g.sum(axis=red))

    return _node(out, (x, gamma, beta), bw)


def instance_norm(x, eps: float = 1e-5, axis: int = -2) -> Tensor:
    """Zero mean / unit variance over the token axis, per channel.

    For a [N, C] feature this normalizes each channel column over its N
    tokens; leading batch dims, if any, are treated as instances.
    """
    x = as_tensor(x)
    xhat, inv = _normalize(x.data, axis, eps)
    return _node(xhat, (x,), lambda g: (_normalize_backward(g, xhat, inv, axis),))


# -- convolution ------------------------------------------------------------


def conv2d(x, w, b=None) -> Tensor:
    """Stride-1, same-padding 2-D convolution.

    x: [B, C, H, W]; w: [O, C, kh, kw] with odd kh, kw; b: [O] or None.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D operands, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if C != Cw:
        raise ShapeError(f"conv2d: channel mismatch: input {x.shape} vs weight {w.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel dims must be odd, got {(kh, kw)}")
    if kh == 1 and kw == 1:
        return _conv1x1(x, w, b, B, C, O, H, W)
    ph, pw = kh // 2, kw // 2
    kq = kh * kw
    xp = np.zeros((B, C, H + 2 * ph, W + 2 * pw))
    xp[:, :, ph : ph + H, pw : pw + W] = x.data
    # im2col: [B, H, W, C, kh*kw] -> one GEMM against [O, C*kh*kw]
    cols = np.empty((B, H, W, C, kq))
    q = 0
    for i in range(kh):
        for j in range(kw):
            cols[..., q] = xp[:, :, i : i + H, j : j + W].transpose(0, 2, 3, 1)
            q += 1
    cols2 = cols.reshape(B * H * W, C * kq)
    w2 = w.data.reshape(O, C * kq)
    out = (cols2 @ w2.T).reshape(B, H, W, O).transpose(0, 3, 1, 2)
    parents: list[Tensor] = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None, None]
        parents.append(b)

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(B * H * W, O)
        gw = (gm.T @ cols2).reshape(O, C, kh, kw)
        gcols = (gm @ w2).reshape(B, H, W, C, kq)
        gxp = np.zeros_like(xp)
        q = 0
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + H, j : j + W] += gcols[..., q].transpose(0, 3, 1, 2)
                q += 1
        gx = gxp[:, :, ph : ph + H, pw : pw + W]
        if b is not None:
            return (gx, gw, g.sum(axis=(0, 2, 3)))
        return (gx, gw)

    return _node(out, tuple(parents), bw)


def _conv1x1(x: Tensor, w: Tensor, b, B, C, O, H, W) -> Tensor:
    # pointwise convolution as a single matrix product per batch
    xm = x.data.reshape(B, C, H * W)
    w2 = w.data.reshape(O, C)
    out = (w2 @ xm).reshape(B, O, H, W)
    parents: list[Tensor] = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None, None]
        parents.append(b)

    def bw(g):
        gm = g.reshape(B, O, H * W)
        gx = (w2.T @ gm).reshape(B, C, H, W)
        gw = np.einsum("boq,bcq->oc", gm, xm, optimize=True).reshape(O, C, 1, 1)
        if b is not None:
            return (gx, gw, g.sum(axis=(0, 2, 3)))
        return (gx, gw)

    return _node(out, tuple(parents), bw)
