"""Dense float64 tensors with reverse-mode automatic differentiation.

Values are numpy arrays in row-major order. Every op result is checked for
NaN/Inf (a cheap sum-probe, escalated to a full scan only on failure). The
graph records parents and a backward closure only along paths that require
gradients, so frozen-parameter forward passes build no graph at all.
"""

from __future__ import annotations

import numpy as np
from scipy import special as _special


class NonFiniteError(FloatingPointError):
    pass


def _assert_finite(arr: np.ndarray, op: str) -> None:
    probe = float(arr.sum()) if arr.size else 0.0
    if not np.isfinite(probe):
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values produced by op '{op}'")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the parent's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    # make numpy defer to the reflected operators below instead of building
    # object arrays when an ndarray sits on the left of an expression
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._bwd = None

    # ---- basic protocol -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # ---- graph construction ---------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents, bwd, op: str) -> "Tensor":
        out = Tensor(data)
        _assert_finite(out.data, op)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._bwd = bwd
        return out

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # ---- arithmetic -------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        data = self.data + other.data

        def bwd(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g, other.data.shape))

        return Tensor._make(data, (self, other), bwd, "add")

    __radd__ = __add__

    def __mul__(self, other):
        other = as_tensor(other)
        data = self.data * other.data

        def bwd(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g * self.data, other.data.shape))

        return Tensor._make(data, (self, other), bwd, "mul")

    __rmul__ = __mul__

    def __neg__(self):
        def bwd(g):
            self._accum(-g)

        return Tensor._make(-self.data, (self,), bwd, "neg")

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __truediv__(self, other):
        other = as_tensor(other)
        data = self.data / other.data

        def bwd(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g / other.data, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(-g * self.data / (other.data ** 2), other.data.shape))

        return Tensor._make(data, (self, other), bwd, "div")

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent: float):
        data = self.data ** exponent

        def bwd(g):
            self._accum(g * exponent * self.data ** (exponent - 1))

        return Tensor._make(data, (self,), bwd, "pow")

    def __matmul__(self, other):
        other = as_tensor(other)
        if self.data.ndim < 2 or other.data.ndim < 2:
            raise ValueError("matmul requires tensors of rank >= 2")
        data = self.data @ other.data

        def bwd(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g @ np.swapaxes(other.data, -1, -2), self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(np.swapaxes(self.data, -1, -2) @ g, other.data.shape))

        return Tensor._make(data, (self, other), bwd, "matmul")

    # ---- shape ops --------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        data = self.data.reshape(shape)

        def bwd(g):
            self._accum(g.reshape(old))

        return Tensor._make(data, (self,), bwd, "reshape")

    def swapaxes(self, a: int, b: int):
        data = np.swapaxes(self.data, a, b)

        def bwd(g):
            self._accum(np.swapaxes(g, a, b))

        return Tensor._make(data, (self,), bwd, "swapaxes")

    def transpose(self, axes):
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        data = self.data.transpose(axes)

        def bwd(g):
            self._accum(g.transpose(inv))

        return Tensor._make(data, (self,), bwd, "transpose")

    def __getitem__(self, idx):
        data = self.data[idx]

        def bwd(g):
            buf = np.zeros_like(self.data)
            np.add.at(buf, idx, g)
            self._accum(buf)

        return Tensor._make(np.array(data), (self,), bwd, "getitem")

    # ---- reductions -------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g):
            if axis is None:
                self._accum(np.broadcast_to(g, self.data.shape).copy())
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.data.shape).copy())

        return Tensor._make(np.asarray(data), (self,), bwd, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # ---- elementwise ------------------------------------------------------

    def _unary(self, fn, dfn, op):
        data = fn(self.data)

        def bwd(g):
            self._accum(g * dfn(self.data, data))

        return Tensor._make(data, (self,), bwd, op)

    def exp(self):
        return self._unary(np.exp, lambda x, y: y, "exp")

    def log(self):
        return self._unary(np.log, lambda x, y: 1.0 / x, "log")

    def sqrt(self):
        return self._unary(np.sqrt, lambda x, y: 0.5 / y, "sqrt")

    def tanh(self):
        return self._unary(np.tanh, lambda x, y: 1.0 - y * y, "tanh")

    def sin(self):
        return self._unary(np.sin, lambda x, y: np.cos(x), "sin")

    def cos(self):
        return self._unary(np.cos, lambda x, y: -np.sin(x), "cos")

    def abs(self):
        return self._unary(np.abs, lambda x, y: np.sign(x), "abs")

    def sigmoid(self):
        def fwd(x):
            out = np.empty_like(x)
            pos = x >= 0
            out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
            ex = np.exp(x[~pos])
            out[~pos] = ex / (1.0 + ex)
            return out

        return self._unary(fwd, lambda x, y: y * (1.0 - y), "sigmoid")

    def softplus(self):
        def fwd(x):
            return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

        def dfn(x, y):
            s = np.empty_like(x)
            pos = x >= 0
            s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
            ex = np.exp(x[~pos])
            s[~pos] = ex / (1.0 + ex)
            return s

        return self._unary(fwd, dfn, "softplus")

    def erf(self):
        return self._unary(
            _special.erf, lambda x, y: (2.0 / np.sqrt(np.pi)) * np.exp(-x * x), "erf"
        )

    def gelu(self):
        """Exact Gaussian-CDF form: x * Phi(x)."""
        x = self.data
        phi = 0.5 * (1.0 + _special.erf(x / np.sqrt(2.0)))
        data = x * phi

        def bwd(g):
            pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
            self._accum(g * (phi + x * pdf))

        return Tensor._make(data, (self,), bwd, "gelu")

    def relu(self):
        return maximum(self, 0.0)

    def clip(self, lo: float, hi: float):
        data = np.clip(self.data, lo, hi)

        def bwd(g):
            mask = (self.data > lo) & (self.data < hi)
            self._accum(g * mask)

        return Tensor._make(data, (self,), bwd, "clip")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = np.maximum(a.data, b.data)

    def bwd(g):
        take_a = a.data >= b.data
        if a.requires_grad:
            a._accum(_unbroadcast(g * take_a, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * ~take_a, b.data.shape))

    return Tensor._make(data, (a, b), bwd, "maximum")


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = np.minimum(a.data, b.data)

    def bwd(g):
        take_a = a.data <= b.data
        if a.requires_grad:
            a._accum(_unbroadcast(g * take_a, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * ~take_a, b.data.shape))

    return Tensor._make(data, (a, b), bwd, "minimum")


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    data = np.where(cond, a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * cond, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * ~cond, b.data.shape))

    return Tensor._make(data, (a, b), bwd, "where")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return Tensor._make(data, tuple(tensors), bwd, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accum(np.take(g, i, axis=axis))

    return Tensor._make(data, tuple(tensors), bwd, "stack")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis, fused into a single graph node."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        x._accum(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return Tensor._make(y, (x,), bwd, "softmax")


def _rot_half(a: np.ndarray) -> np.ndarray:
    """(x0, x1, x2, x3, ...) -> (-x1, x0, -x3, x2, ...) over the last axis."""
    b = a.reshape(*a.shape[:-1], -1, 2)
    out = np.empty_like(b)
    out[..., 0] = -b[..., 1]
    out[..., 1] = b[..., 0]
    return out.reshape(a.shape)


def pair_rotate(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate channel pairs (2i, 2i+1) of x by constant per-pair phases.

    ``cos``/``sin`` carry the angle repeated across both pair slots and must
    broadcast against x. The rotation is orthogonal, so the backward pass is
    the inverse rotation of the incoming gradient.
    """
    x = as_tensor(x)
    data = x.data * cos + _rot_half(x.data) * sin

    def bwd(g):
        x._accum(g * cos - _rot_half(g * sin))

    return Tensor._make(data, (x,), bwd, "pair_rotate")


def bilinear_sample(fmap: Tensor, points: Tensor) -> Tensor:
    """Sample a (C, H, W) map at normalized points (..., 2) in [0, 1]^2.

    Align-corners convention: 0 maps to the first pixel center and 1 to the
    last. Points outside [0, 1] clamp to the border; the coordinate gradient
    is zero in the clamped region.
    """
    c, h, w = fmap.data.shape
    pts = points.data.reshape(-1, 2)
    px = np.clip(pts[:, 0] * (w - 1), 0.0, w - 1.0)
    py = np.clip(pts[:, 1] * (h - 1), 0.0, h - 1.0)
    x0 = np.clip(np.floor(px).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(py).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = px - x0
    fy = py - y0

    m = fmap.data
    v00 = m[:, y0, x0]
    v01 = m[:, y0, x1]
    v10 = m[:, y1, x0]
    v11 = m[:, y1, x1]
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    out = (top * (1 - fy) + bot * fy).T  # (P, C)
    out_shape = points.data.shape[:-1] + (c,)

    def bwd(g):
        gp = g.reshape(-1, c).T  # (C, P)
        if fmap.requires_grad:
            buf = np.zeros_like(m)
            np.add.at(buf, (slice(None), y0, x0), gp * ((1 - fx) * (1 - fy)))
            np.add.at(buf, (slice(None), y0, x1), gp * (fx * (1 - fy)))
            np.add.at(buf, (slice(None), y1, x0), gp * ((1 - fx) * fy))
            np.add.at(buf, (slice(None), y1, x1), gp * (fx * fy))
            fmap._accum(buf)
        if points.requires_grad:
            d_fx = ((v01 - v00) * (1 - fy) + (v11 - v10) * fy)  # (C, P)
            d_fy = (bot - top)
            raw_x = pts[:, 0] * (w - 1)
            raw_y = pts[:, 1] * (h - 1)
            in_x = (raw_x > 0.0) & (raw_x < w - 1.0)
            in_y = (raw_y > 0.0) & (raw_y < h - 1.0)
            gx = (gp * d_fx).sum(axis=0) * (w - 1) * in_x
            gy = (gp * d_fy).sum(axis=0) * (h - 1) * in_y
            points._accum(np.stack([gx, gy], axis=-1).reshape(points.data.shape))

    return Tensor._make(out.reshape(out_shape), (fmap, points), bwd, "bilinear_sample")


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar; visits each graph node exactly once."""
    if loss.data.size != 1:
        raise ValueError("backward expects a scalar loss")
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("loss is not finite")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack_ = [(loss, False)]
    while stack_:
        node, processed = stack_.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            stack_.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._bwd is not None:
            node._bwd(node.grad)
    for node in topo:
        if node._bwd is not None:
            node.grad = None  # free intermediate grads, keep leaf grads
