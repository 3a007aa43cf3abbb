"""Dense tensors with reverse-mode differentiation.

Every operation records its inputs and a closure computing input adjoints
from the output adjoint. ``Tensor.backward`` walks the recorded graph in
reverse topological order (the tape) and accumulates gradients into leaves.

Data stays a plain contiguous ``numpy.ndarray``; copies are preferred over
views for simplicity.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "is_grad_enabled",
    "get_default_dtype",
    "set_default_dtype",
    "tensor",
    "zeros",
    "ones",
    "tape",
    "concat",
    "stack",
    "where",
    "maximum",
    "minimum",
    "matmul",
    "softmax",
    "log_softmax",
    "layer_norm",
    "conv3d",
    "grid_sample3d",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_GRAD_ENABLED = True
_DEFAULT_DTYPE = np.float64


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


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


class PieceTape:
    """Records the branch each piecewise-smooth op takes, then replays it.

    Replaying evaluates the same smooth piece at perturbed inputs, which is
    what a finite-difference check of reverse-mode gradients needs near kinks
    (relu, abs, clamp, max/min, trilinear cell edges). Stop-gradient values
    that models pass through ``frozen`` are recorded the same way.
    """

    def __init__(self):
        self.records: list[np.ndarray] = []
        self.replaying = False
        self._pos = 0

    def __call__(self, value):
        if not self.replaying:
            self.records.append(np.array(value, copy=True))
            return value
        if self._pos >= len(self.records):
            raise RuntimeError("piece tape exhausted; the replayed pass differs from the recorded one")
        rec = self.records[self._pos]
        self._pos += 1
        if rec.shape != np.shape(value):
            raise RuntimeError(f"piece tape out of sync: {rec.shape} vs {np.shape(value)}")
        return rec.copy()

    def replay(self) -> None:
        """Start replaying from the first record (call before every replayed pass)."""
        self.replaying = True
        self._pos = 0


_PIECE_TAPE: PieceTape | None = None


@contextlib.contextmanager
def piece_tape(tape: PieceTape):
    global _PIECE_TAPE
    prev = _PIECE_TAPE
    _PIECE_TAPE = tape
    try:
        yield tape
    finally:
        _PIECE_TAPE = prev


def frozen(value):
    """``value`` itself, or its recording while a PieceTape replays."""
    return value if _PIECE_TAPE is None else _PIECE_TAPE(value)


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise TypeError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` over the axes that broadcasting expanded to reach ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"shapes {a} and {b} are not broadcast-compatible") from None


class Tensor:
    """An n-dimensional real array that can take part in differentiation.

    Leaves created with ``requires_grad=True`` own a zero-initialised ``grad``
    buffer of the same shape; ``backward`` accumulates into it and
    ``zero_grad`` resets it.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    # -- construction helpers -------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    def _wrap(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    # -- basic properties -----------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- backward ---------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every ``requires_grad`` leaf.

        ``self`` must be a scalar unless an explicit output adjoint is given.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)
        if not self.requires_grad:
            return
        order = tape(self)
        adj = {id(self): grad}
        for node in reversed(order):
            g = adj.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = node.grad + g if node.grad is not None else g.copy()
                continue
            grads = node._backward(g)
            for parent, pg in zip(node._parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in adj:
                    adj[key] = adj[key] + pg
                else:
                    adj[key] = pg

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        other = self._wrap(other)
        _broadcast_shape(self.shape, other.shape)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = self._wrap(other)
        _broadcast_shape(self.shape, other.shape)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)),
        )

    def __rsub__(self, other):
        return self._wrap(other) - self

    def __mul__(self, other):
        other = self._wrap(other)
        _broadcast_shape(self.shape, other.shape)
        a, b = self.data, other.data

        def backward(g):
            return (
                _unbroadcast(g * b, a.shape) if self.requires_grad else None,
                _unbroadcast(g * a, b.shape) if other.requires_grad else None,
            )

        return Tensor._make(a * b, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._wrap(other)
        _broadcast_shape(self.shape, other.shape)
        a, b = self.data, other.data

        def backward(g):
            return (
                _unbroadcast(g / b, a.shape) if self.requires_grad else None,
                _unbroadcast(-g * a / (b * b), b.shape) if other.requires_grad else None,
            )

        return Tensor._make(a / b, (self, other), backward)

    def __rtruediv__(self, other):
        return self._wrap(other) / self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise TypeError("only scalar exponents are supported")
        a = self.data
        return Tensor._make(a**exponent, (self,), lambda g: (g * exponent * a ** (exponent - 1),))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        if isinstance(index, Tensor):
            index = index.data
        out = self.data[index]
        shape, dtype = self.shape, self.data.dtype

        advanced = _is_advanced(index)

        def backward(g):
            full = np.zeros(shape, dtype=dtype)
            if advanced:
                np.add.at(full, index, g)
            else:
                full[index] += g
            return (full,)

        return Tensor._make(np.asarray(out, order="C"), (self,), backward)

    # -- elementwise functions ----------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self):
        a = self.data
        return Tensor._make(np.log(a), (self,), lambda g: (g / a,))

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (g * 0.5 / out,))

    def sin(self):
        a = self.data
        return Tensor._make(np.sin(a), (self,), lambda g: (g * np.cos(a),))

    def cos(self):
        a = self.data
        return Tensor._make(np.cos(a), (self,), lambda g: (-g * np.sin(a),))

    def sigmoid(self):
        out = 1.0 / (1.0 + np.exp(-self.data))
        return Tensor._make(out, (self,), lambda g: (g * out * (1.0 - out),))

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),))

    def relu(self):
        mask = frozen(self.data > 0)
        return Tensor._make(self.data * mask, (self,), lambda g: (g * mask,))

    def abs(self):
        sign = frozen(np.sign(self.data))
        return Tensor._make(self.data * sign, (self,), lambda g: (g * sign,))

    def clamp(self, lo=None, hi=None):
        """Clip into ``[lo, hi]``; the gradient passes only where no bound is active."""
        a = self.data
        low = frozen(a <= lo) if lo is not None else np.zeros(a.shape, dtype=bool)
        high = frozen(a >= hi) if hi is not None else np.zeros(a.shape, dtype=bool)
        out = a
        if hi is not None:
            out = np.where(high, np.asarray(hi, dtype=a.dtype), out)
        if lo is not None:
            out = np.where(low, np.asarray(lo, dtype=a.dtype), out)
        mask = ~(low | high)
        return Tensor._make(np.asarray(out, dtype=a.dtype), (self,), lambda g: (g * mask,))

    def inverse_sigmoid(self, eps: float = 1e-5):
        x = self.clamp(0.0, 1.0)
        return (x.clamp(eps, None) / (1.0 - x).clamp(eps, None)).log()

    # -- reductions ---------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(self.data.dtype)
        out = np.asarray(out)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(out, (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- shape manipulation ---------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        out = np.ascontiguousarray(self.data.transpose(axes))
        return Tensor._make(out, (self,), lambda g: (g.transpose(inv),))

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(axes)

    def unsqueeze(self, axis: int):
        shape = list(self.shape)
        if axis < 0:
            axis += len(shape) + 1
        shape.insert(axis, 1)
        return self.reshape(tuple(shape))

    def expand(self, shape):
        old = self.shape
        out = np.broadcast_to(self.data, shape).copy()
        return Tensor._make(out, (self,), lambda g: (_unbroadcast(g, old),))


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or _DEFAULT_DTYPE), requires_grad=requires_grad)


def tape(root: Tensor) -> list[Tensor]:
    """Return the graph under ``root`` in topological order (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._make(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return Tensor._make(
        out, tensors, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n))
    )


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond.data if isinstance(cond, Tensor) else cond, dtype=bool)
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = np.where(cond, a.data, b.data)
    return Tensor._make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * cond, a.shape), _unbroadcast(g * ~cond, b.shape)),
    )


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient goes to ``a``."""
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    return where(frozen(a.data >= b.data), a, b)


def minimum(a, b) -> Tensor:
    """Elementwise min; on ties the gradient goes to ``a``."""
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    return where(frozen(a.data <= b.data), a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2])
    A, B = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(B, -1, -2), A.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(A, -1, -2) @ g, B.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(A @ B, (a, b), backward)


def softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Numerically stable softmax.

    ``mask`` is a boolean array broadcastable to ``x``; True entries are
    excluded (probability exactly 0). Every row must keep one entry.
    """
    x = _as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise FloatingPointError("softmax received non-finite input")
    z = x.data
    if mask is not None:
        z = np.where(mask, -np.inf, z)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise FloatingPointError("log_softmax received non-finite input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    x = _as_tensor(x)
    if eps <= 0:
        raise ValueError("eps must be positive")
    a = x.data
    mu = a.mean(axis=-1, keepdims=True)
    xc = a - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    g_arr = gain.data if gain is not None else None
    out = xhat * g_arr if gain is not None else xhat
    if bias is not None:
        out = out + bias.data
    parents = [x] + [t for t in (gain, bias) if t is not None]

    def backward(g):
        gx = g * g_arr if gain is not None else g
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        grads = [dx]
        if gain is not None:
            grads.append(_unbroadcast(g * xhat, gain.shape))
        if bias is not None:
            grads.append(_unbroadcast(g, bias.shape))
        return tuple(grads)

    return Tensor._make(out, parents, backward)


def _triple(v) -> tuple:
    if isinstance(v, (tuple, list)):
        if len(v) != 3:
            raise ValueError(f"expected 3 values, got {v}")
        return tuple(int(i) for i in v)
    return (int(v),) * 3


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """3D cross-correlation.

    Args:
        x: ``[C_in, D, H, W]`` or batched ``[N, C_in, D, H, W]``.
        weight: ``[C_out, C_in, kD, kH, kW]`` with odd kernel extents.
        bias: optional ``[C_out]``.
        stride, padding: int or per-axis triple; padding is zeros.

    Returns:
        ``[.., C_out, oD, oH, oW]`` with ``o = floor((n + 2 p - k) / s) + 1``.
    """
    x = _as_tensor(x)
    weight = _as_tensor(weight, like=x)
    unbatched = x.ndim == 4
    if unbatched:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d expects [N,C,D,H,W] input and 5-D weight, got {x.shape}, {weight.shape}")
    if weight.shape[1] != x.shape[1]:
        raise ShapeError(f"conv3d channel mismatch: input {x.shape} vs weight {weight.shape}")
    ks = weight.shape[2:]
    if any(k % 2 == 0 for k in ks):
        raise ValueError(f"conv3d kernel extents must be odd, got {ks}")
    st = _triple(stride)
    pd = _triple(padding)
    if any(s < 1 for s in st):
        raise ValueError("stride must be >= 1")
    spatial = x.shape[2:]
    if any(n + 2 * p < k for n, p, k in zip(spatial, pd, ks)):
        raise ShapeError(f"kernel {ks} larger than padded input {spatial} (padding {pd})")
    xd = x.data
    if any(pd):
        xp = np.pad(xd, ((0, 0), (0, 0)) + tuple((p, p) for p in pd))
    else:
        xp = xd
    oshape = tuple((n + 2 * p - k) // s + 1 for n, p, k, s in zip(spatial, pd, ks, st))
    N, C = x.shape[:2]
    O = weight.shape[0]
    M = int(np.prod(oshape))
    offsets = [(i, j, k) for i in range(ks[0]) for j in range(ks[1]) for k in range(ks[2])]

    def window(i, j, k):
        return (slice(None), slice(None), slice(i, i + st[0] * oshape[0], st[0]),
                slice(j, j + st[1] * oshape[1], st[1]), slice(k, k + st[2] * oshape[2], st[2]))

    # im2col, channel-first: [N, C, taps, oD, oH, oW]
    cols = np.empty((N, C, len(offsets)) + oshape, dtype=xp.dtype)
    for t, (i, j, k) in enumerate(offsets):
        cols[:, :, t] = xp[window(i, j, k)]
    cols = cols.reshape(N, C * len(offsets), M)
    W2 = weight.data.reshape(O, -1)
    out = np.matmul(W2, cols).reshape((N, O) + oshape)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1, 1)
    parents = [x, weight] + ([bias] if bias is not None else [])

    def backward(g):
        g3 = g.reshape(N, O, M)
        grads = []
        gx = None
        if x.requires_grad:
            gcols = np.matmul(W2.T, g3).reshape((N, C, len(offsets)) + oshape)
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            for t, (i, j, k) in enumerate(offsets):
                gxp[window(i, j, k)] += gcols[:, :, t]
            gx = gxp[
                :,
                :,
                pd[0] : pd[0] + spatial[0],
                pd[1] : pd[1] + spatial[1],
                pd[2] : pd[2] + spatial[2],
            ]
        grads.append(gx)
        if weight.requires_grad:
            gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        else:
            gw = None
        grads.append(gw)
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return tuple(grads)

    result = Tensor._make(out, parents, backward)
    if unbatched:
        result = result.reshape(result.shape[1:])
    return result


def _corner_weights(frac: np.ndarray):
    """Trilinear corner weights and their derivatives wrt the three fractions."""
    f0, f1, f2 = frac[..., 0], frac[..., 1], frac[..., 2]
    g0, g1, g2 = 1.0 - f0, 1.0 - f1, 1.0 - f2
    w = []
    dw = []
    for c0 in (0, 1):
        a, da = (f0, 1.0) if c0 else (g0, -1.0)
        for c1 in (0, 1):
            b, db = (f1, 1.0) if c1 else (g1, -1.0)
            for c2 in (0, 1):
                c, dc = (f2, 1.0) if c2 else (g2, -1.0)
                w.append(a * b * c)
                dw.append((da * b * c, a * db * c, a * b * dc))
    return w, dw


def grid_sample3d(values: Tensor, loc: Tensor) -> Tensor:
    """Trilinear sampling with border clamping.

    Args:
        values: ``[G, D, H, W, C]`` grids.
        loc: ``[G, N, 3]`` normalised locations in ``[0, 1]^3`` (axis order
            D, H, W). Voxel ``i`` of an extent ``n`` is centred at
            ``(i + 0.5) / n``; locations past the outermost centres clamp.

    Returns:
        ``[G, N, C]`` samples, differentiable wrt both inputs. The location
        gradient is zero along clamped axes.
    """
    values = _as_tensor(values)
    loc = _as_tensor(loc, like=values)
    if values.ndim != 5 or loc.ndim != 3 or loc.shape[-1] != 3 or loc.shape[0] != values.shape[0]:
        raise ShapeError(f"grid_sample3d shapes {values.shape}, {loc.shape}")
    G, D, H, W, C = values.shape
    N = loc.shape[1]
    size = np.array([D, H, W], dtype=values.data.dtype)
    p = loc.data * size - 0.5
    upper = size - 1
    inside = frozen((p > 0) & (p < upper))
    pc = np.where(inside, p, np.clip(p, 0, upper))
    i0 = frozen(np.minimum(np.floor(np.clip(pc, 0, upper)), np.maximum(upper - 1, 0)).astype(np.int64))
    frac = pc - i0
    i1 = np.minimum(i0 + 1, upper.astype(np.int64))
    vflat = values.data.reshape(G * D * H * W, C)
    base = (np.arange(G, dtype=np.int64) * (D * H * W))[:, None]
    w, dw = _corner_weights(frac)
    idx = []
    for c0 in (0, 1):
        a = i1[..., 0] if c0 else i0[..., 0]
        for c1 in (0, 1):
            b = i1[..., 1] if c1 else i0[..., 1]
            for c2 in (0, 1):
                c = i1[..., 2] if c2 else i0[..., 2]
                idx.append(base + (a * H + b) * W + c)
    idx = np.stack(idx)  # [8, G, N]
    # sparse [G*N, G*D*H*W] interpolation matrix, one row of 8 corners per sample;
    # repeated columns (clamped axes) add up in the products
    S = sparse.csr_matrix((np.stack(w, axis=-1).reshape(-1), np.moveaxis(idx, 0, -1).reshape(-1),
                           np.arange(0, 8 * G * N + 1, 8)), shape=(G * N, G * D * H * W))
    out = np.asarray(S @ vflat, dtype=values.data.dtype).reshape(G, N, C)

    def backward(g):
        gv = gl = None
        if values.requires_grad:
            gv = np.asarray(S.T @ g.reshape(G * N, C), dtype=values.data.dtype).reshape(values.shape)
        if loc.requires_grad:
            s = np.einsum("kgnc,gnc->kgn", np.take(vflat, idx, axis=0), g)
            gl = np.zeros(loc.shape, dtype=values.data.dtype)
            for k, dwc in enumerate(dw):
                for ax in range(3):
                    gl[..., ax] += dwc[ax] * s[k]
            gl *= size
            gl *= inside
        return gv, gl

    return Tensor._make(out, (values, loc), backward)
