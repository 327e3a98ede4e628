"""Dense float64 tensors with tape-based reverse-mode differentiation.

Arrays live in numpy; every op that touches a tensor with ``requires_grad``
records a closure computing the vector-Jacobian product for its parents.
Ops with no differentiable parent record nothing, so inference runs with
plain numpy cost.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Shapes of the operands are incompatible."""


class ParameterError(ValueError):
    """A scalar hyperparameter is out of its valid range."""


class InputError(ValueError):
    """Input values are invalid (non-finite, out of range)."""


class UsageError(RuntimeError):
    """An API was called in a state where it is undefined."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __hash__(self) -> int:
        return id(self)

    def __eq__(self, other) -> bool:  # identity semantics keep tensors usable as dict keys
        return self is other

    # arithmetic sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> dict["Tensor", np.ndarray]:
        return backward(self)


def _raise_item(t: Tensor) -> float:
    raise UsageError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), vjp, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _softplus(v: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, v)


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    return _make(_softplus(xd), (x,), lambda g: (g * _sigmoid(xd),), "softplus")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)
    return _make(xd * s, (x,), lambda g: (g * (s * (1.0 + xd * (1.0 - s))),), "silu")


def relu_squared(x: Tensor) -> Tensor:
    xd = x.data
    r = np.maximum(xd, 0.0)
    return _make(r * r, (x,), lambda g: (2.0 * g * r,), "relu2")


# ---------------------------------------------------------------------------
# shape ops and reductions
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return _make(out, (x,), lambda g: (g.reshape(src),), "reshape")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    out = np.ascontiguousarray(np.swapaxes(x.data, a, b))
    return _make(out, (x,), lambda g: (np.swapaxes(g, a, b),), "swapaxes")


def getitem(x: Tensor, index) -> Tensor:
    src = x.shape
    out = np.ascontiguousarray(x.data[index])

    def vjp(g):
        full = np.zeros(src, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _make(out, (x,), vjp, "getitem")


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table (embedding lookup)."""
    ids = np.asarray(ids, dtype=np.int64)
    src = table.shape

    def vjp(g):
        full = np.zeros(src, dtype=DTYPE)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, src[1]))
        return (full,)

    return _make(table.data[ids], (table,), vjp, "take_rows")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=DTYPE)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(out, (x,), vjp, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (2-D operands included)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), vjp, "matmul")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, vjp, "concat")


# ---------------------------------------------------------------------------
# fused numerics
# ---------------------------------------------------------------------------


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    return tau


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise InputError(f"{what} contains non-finite values")


def softmax_temp_np(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    tau = _check_tau(tau)
    z = np.asarray(logits, dtype=DTYPE) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_temp_np(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    tau = _check_tau(tau)
    z = np.asarray(logits, dtype=DTYPE) / tau
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_temp(logits: Tensor, tau: float = 1.0) -> Tensor:
    """Tempered softmax along the last axis, shifted by the max for stability."""
    logits = as_tensor(logits)
    tau = _check_tau(tau)
    _check_finite(logits.data, "logits")
    p = softmax_temp_np(logits.data, tau)

    def vjp(g):
        return ((p * (g - (g * p).sum(axis=-1, keepdims=True))) / tau,)

    return _make(p, (logits,), vjp, "softmax")


def log_softmax_temp(logits: Tensor, tau: float = 1.0) -> Tensor:
    logits = as_tensor(logits)
    tau = _check_tau(tau)
    _check_finite(logits.data, "logits")
    out = log_softmax_temp_np(logits.data, tau)

    def vjp(g):
        p = np.exp(out)
        return ((g - p * g.sum(axis=-1, keepdims=True)) / tau,)

    return _make(out, (logits,), vjp, "log_softmax")


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6, width: int | None = None) -> Tensor:
    """``x * weight / sqrt(sum(x**2) / width + eps)`` over the last axis.

    ``width`` defaults to the trailing dimension. Pinning it to a parent
    model's width keeps the normalizer unchanged when all-zero channels are
    physically removed.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.shape != x.shape[-1:]:
        raise DimensionError(f"norm weight {weight.shape} does not match input {x.shape}")
    n = x.shape[-1] if width is None else int(width)
    xd, wd = x.data, weight.data
    inv = 1.0 / np.sqrt((xd * xd).sum(axis=-1, keepdims=True) / n + eps)
    xhat = xd * inv

    def vjp(g):
        gw = (g * xhat).reshape(-1, xd.shape[-1]).sum(axis=0)
        gxhat = g * wd
        gx = inv * (gxhat - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True) / n)
        return gx, gw

    return _make(xhat * wd, (x, weight), vjp, "rms_norm")


def conv1d_causal(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Depthwise causal convolution along axis -2 with left zero padding.

    ``kernel[K-1]`` multiplies the current position, ``kernel[0]`` the
    position ``K-1`` steps back.
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if kernel.ndim != 2 or kernel.shape[0] < 1:
        raise DimensionError(f"kernel must be K x C with K >= 1, got {kernel.shape}")
    chans = x.shape[-1]
    if kernel.shape[1] != chans or bias.shape != (chans,):
        raise DimensionError(
            f"channel mismatch: x has {chans}, kernel {kernel.shape}, bias {bias.shape}"
        )
    k = kernel.shape[0]
    length = x.shape[-2]
    pad = [(0, 0)] * x.ndim
    pad[-2] = (k - 1, 0)
    xp = np.pad(x.data, pad)
    kd = kernel.data
    out = np.broadcast_to(bias.data, x.shape).copy()
    for j in range(k):
        out += kd[j] * xp[..., j : j + length, :]

    def vjp(g):
        gxp = np.zeros_like(xp)
        gk = np.empty_like(kd)
        for j in range(k):
            gxp[..., j : j + length, :] += g * kd[j]
            gk[j] = (g * xp[..., j : j + length, :]).reshape(-1, chans).sum(axis=0)
        gb = g.reshape(-1, chans).sum(axis=0)
        return gxp[..., k - 1 :, :], gk, gb

    return _make(out, (x, kernel, bias), vjp, "conv1d")


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar; returns gradients of every leaf.

    Leaf gradients are also accumulated into ``.grad``.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    leaves: dict[Tensor, np.ndarray] = {}
    if not loss.requires_grad:
        return leaves
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = g if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    return leaves


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
