"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor`.  When any operand requires a
gradient, the result keeps a reference to its parents and a closure mapping
the output adjoint to parent adjoints.  :func:`backward` walks that graph
once in reverse topological order and then releases it; a second pass over
the same graph raises :class:`~apovi.errors.TapeError`.

Linear algebra (Cholesky, triangular solves) is batched over leading axes so
that per-neuron posteriors of a whole layer are one call.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NumericalError, PSDError, TapeError

__all__ = [
    "Tensor",
    "tensor",
    "no_grad",
    "backward",
    "grad",
    "matmul",
    "activation",
    "relu",
    "tanh",
    "sigmoid",
    "softplus",
    "log_sigmoid",
    "exp",
    "log",
    "clip",
    "concat",
    "stack",
    "where",
    "logsumexp",
    "diagonal",
    "cholesky",
    "jittered_cholesky",
    "solve_triangular",
    "solve_psd",
    "conv1d",
    "conv2d",
]

ACTIVATIONS = ("relu", "tanh", "identity")

_grad_enabled = True


class no_grad:
    """Context manager that stops graph recording (evaluation-only passes)."""

    def __enter__(self):
        global _grad_enabled
        self._prev, _grad_enabled = _grad_enabled, False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def _check_finite(out: np.ndarray, opname: str) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"{opname} produced non-finite values")
    return out


class Tensor:
    """An n-dimensional float64 array that can take part in a gradient graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._consumed = False

    @classmethod
    def _node(cls, data: np.ndarray, parents: tuple, backward_fn: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        req = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = req
        out.grad = None
        out._parents = parents if req else ()
        out._backward = backward_fn if req else None
        out._consumed = False
        return out

    # -- introspection -------------------------------------------------
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
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def backward(self) -> None:
        backward(self)

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- shape and reductions ------------------------------------------
    @property
    def T(self) -> "Tensor":
        return swapaxes(self, -1, -2)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return tsum(self, axis, keepdims) * (1.0 / n)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def square(self) -> "Tensor":
        return mul(self, self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------


def _topo(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        if node._consumed:
            raise TapeError("graph was already consumed by a previous backward pass")
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    The graph is released afterwards; calling again on the same loss (or on any
    loss sharing a consumed intermediate) raises ``TapeError``.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise TapeError("graph was already consumed by a previous backward pass")
    if not loss.requires_grad:
        return
    order = _topo(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = np.array(g, dtype=np.float64) if node.grad is None else node.grad + g
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = gp if key not in grads else grads[key] + gp
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._consumed = True


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list:
    """Gradients of ``loss`` w.r.t. ``wrt``; unreachable inputs get zeros.

    Resets ``.grad`` on every tensor in ``wrt`` before the pass.
    """
    for t in wrt:
        t.grad = None
    backward(loss)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return Tensor._node(a.data + b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def bw(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return Tensor._node(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data / b.data

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        )

    return Tensor._node(_check_finite(out, "div"), (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return Tensor._node(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    out = a.data**p
    return Tensor._node(_check_finite(out, "pow"), (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    _check_finite(out, "exp")
    return Tensor._node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericalError("log of non-positive value")
    return Tensor._node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise NumericalError("sqrt of negative value")
    out = np.sqrt(a.data)
    return Tensor._node(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = a.data > 0
    return Tensor._node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._node(out, (a,), lambda g: (g * (1.0 - out * out),))


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    out = _np_sigmoid(a.data)
    return Tensor._node(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return Tensor._node(out, (a,), lambda g: (g * _np_sigmoid(x),))


def log_sigmoid(a: Tensor) -> Tensor:
    return neg(softplus(neg(a)))


def activation(t: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(t)
    if kind == "tanh":
        return tanh(t)
    if kind == "identity":
        return t
    raise ValueError(f"unsupported activation {kind!r}; expected one of {ACTIVATIONS}")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data >= lo) & (a.data <= hi)
    return Tensor._node(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a, b = _lift(a), _lift(b)

    def bw(g):
        return (
            _unbroadcast(np.where(cond, g, 0.0), a.shape) if a.requires_grad else None,
            _unbroadcast(np.where(cond, 0.0, g), b.shape) if b.requires_grad else None,
        )

    return Tensor._node(np.where(cond, a.data, b.data), (a, b), bw)


# ---------------------------------------------------------------------------
# shape manipulation and reductions
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor._node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return Tensor._node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    if a.ndim < 2:
        raise DimensionError("swapaxes needs at least 2 dimensions")
    return Tensor._node(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return Tensor._node(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape
    basic = _is_basic_index(idx)

    def bw(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return Tensor._node(a.data[idx], (a,), bw)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_lift(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_lift(t) for t in tensors)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._node(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


def logsumexp(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    m = np.max(a.data, axis=axis, keepdims=True)
    s = np.sum(np.exp(a.data - m), axis=axis, keepdims=True)
    out_k = m + np.log(s)
    soft = np.exp(a.data - out_k)
    out = out_k if keepdims else (np.squeeze(out_k, axis=axis) if axis is not None else out_k.reshape(()))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return Tensor._node(out, (a,), bw)


def diagonal(a: Tensor) -> Tensor:
    """Diagonal over the last two axes."""
    n = a.shape[-1]
    shape = a.shape
    idx = np.arange(n)

    def bw(g):
        out = np.zeros(shape)
        out[..., idx, idx] = g
        return (out,)

    return Tensor._node(np.diagonal(a.data, axis1=-2, axis2=-1).copy(), (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    def bw(g):
        return (
            _unbroadcast(g @ _swap(b.data), a.shape) if a.requires_grad else None,
            _unbroadcast(_swap(a.data) @ g, b.shape) if b.requires_grad else None,
        )

    return Tensor._node(a.data @ b.data, (a, b), bw)


def _check_square(a: Tensor, opname: str) -> None:
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise DimensionError(f"{opname} needs square matrices, got shape {a.shape}")


def cholesky(a: Tensor) -> Tensor:
    """Lower Cholesky factor, batched over leading axes."""
    _check_square(a, "cholesky")
    A = a.data
    scale = max(1.0, float(np.max(np.abs(A)))) if A.size else 1.0
    if A.size and np.max(np.abs(A - _swap(A))) > 1e-10 * scale:
        raise ValueError("cholesky input is not symmetric")
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise PSDError(f"matrix is not positive definite: {exc}") from None
    if not np.all(np.isfinite(L)):
        raise PSDError("matrix is not positive definite")

    def bw(g):
        phi = np.tril(_swap(L) @ g)
        idx = np.arange(L.shape[-1])
        phi[..., idx, idx] *= 0.5
        Linv = np.linalg.inv(L)
        S = _swap(Linv) @ phi @ Linv
        return (0.5 * (S + _swap(S)),)

    return Tensor._node(L, (a,), bw)


def jittered_cholesky(a: Tensor, retries: int = 3) -> Tensor:
    """Cholesky with escalating diagonal jitter on failure.

    Jitter starts at 1e-6 times the mean diagonal and grows tenfold per retry.
    """
    try:
        return cholesky(a)
    except PSDError:
        pass
    n = a.shape[-1]
    jitter = 1e-6 * max(float(np.mean(np.abs(np.diagonal(a.data, axis1=-2, axis2=-1)))), 1e-12)
    eye = np.eye(n)
    for _ in range(retries):
        try:
            return cholesky(a + jitter * eye)
        except PSDError:
            jitter *= 10.0
    raise PSDError(f"matrix not positive definite after {retries} jitter retries")


def solve_triangular(a: Tensor, b: Tensor, lower: bool = True) -> Tensor:
    """Solve ``a @ x = b`` for triangular ``a`` (batched)."""
    a, b = _lift(a), _lift(b)
    _check_square(a, "solve_triangular")
    if b.ndim < 2 or b.shape[-2] != a.shape[-1]:
        raise DimensionError(f"solve_triangular rhs shape {b.shape} does not match {a.shape}")
    A = a.data
    X = np.linalg.solve(A, np.broadcast_to(b.data, A.shape[:-2] + b.shape[-2:]) if A.ndim > b.ndim else b.data)
    mask = np.tril if lower else np.triu

    def bw(g):
        gb = np.linalg.solve(_swap(A), g)
        ga = mask(-(gb @ _swap(X))) if a.requires_grad else None
        return (
            _unbroadcast(ga, a.shape) if ga is not None else None,
            _unbroadcast(gb, b.shape) if b.requires_grad else None,
        )

    return Tensor._node(X, (a, b), bw)


def solve_psd(a: Tensor, b: Tensor) -> Tensor:
    """Solve ``a @ x = b`` for symmetric positive definite ``a``."""
    L = cholesky(_lift(a))
    y = solve_triangular(L, b, lower=True)
    return solve_triangular(L.T, y, lower=False)


# ---------------------------------------------------------------------------
# convolution (cross-correlation, zero "same" padding, odd kernels)
# ---------------------------------------------------------------------------


def _corr1d(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    p = k.shape[-1] // 2
    xp = np.pad(x, ((0, 0), (p, p)))
    win = sliding_window_view(xp, k.shape[-1], axis=1)  # (C, L, k)
    return np.tensordot(k, win, axes=([1, 2], [0, 2]))


def _corr2d(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    ph, pw = k.shape[-2] // 2, k.shape[-1] // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, k.shape[-2:], axis=(1, 2))  # (C, H, W, kh, kw)
    return np.tensordot(k, win, axes=([1, 2, 3], [0, 3, 4]))


def conv1d(x: Tensor, kernels: Tensor) -> Tensor:
    """``x``: (C_in, L); ``kernels``: (C_out, C_in, k) with odd k."""
    x, kernels = _lift(x), _lift(kernels)
    if x.ndim != 2 or kernels.ndim != 3 or kernels.shape[1] != x.shape[0]:
        raise DimensionError(f"conv1d shapes incompatible: {x.shape}, {kernels.shape}")
    if kernels.shape[-1] % 2 == 0:
        raise DimensionError("conv1d needs an odd kernel size")
    X, K = x.data, kernels.data
    p = K.shape[-1] // 2

    def bw(g):
        gx = _corr1d(g, np.transpose(K[:, :, ::-1], (1, 0, 2))) if x.requires_grad else None
        gk = None
        if kernels.requires_grad:
            win = sliding_window_view(np.pad(X, ((0, 0), (p, p))), K.shape[-1], axis=1)
            gk = np.tensordot(g, win, axes=([1], [1]))
        return gx, gk

    return Tensor._node(_corr1d(X, K), (x, kernels), bw)


def conv2d(x: Tensor, kernels: Tensor) -> Tensor:
    """``x``: (C_in, H, W); ``kernels``: (C_out, C_in, k, k) with odd k."""
    x, kernels = _lift(x), _lift(kernels)
    if x.ndim != 3 or kernels.ndim != 4 or kernels.shape[1] != x.shape[0]:
        raise DimensionError(f"conv2d shapes incompatible: {x.shape}, {kernels.shape}")
    if kernels.shape[-1] % 2 == 0 or kernels.shape[-2] % 2 == 0:
        raise DimensionError("conv2d needs odd kernel sizes")
    X, K = x.data, kernels.data
    ph, pw = K.shape[-2] // 2, K.shape[-1] // 2

    def bw(g):
        gx = _corr2d(g, np.transpose(K[:, :, ::-1, ::-1], (1, 0, 2, 3))) if x.requires_grad else None
        gk = None
        if kernels.requires_grad:
            win = sliding_window_view(np.pad(X, ((0, 0), (ph, ph), (pw, pw))), K.shape[-2:], axis=(1, 2))
            gk = np.tensordot(g, win, axes=([1, 2], [1, 2]))
        return gx, gk

    return Tensor._node(_corr2d(X, K), (x, kernels), bw)
