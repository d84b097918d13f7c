"""Dense-tensor reverse-mode automatic differentiation on numpy arrays.

A Tensor wraps an ndarray and remembers the op that produced it. Tensors are
created in execution order, so the monotonically increasing creation id gives
a topological order of the implicit graph for free; `backward` walks reachable
nodes in reverse creation order. Gradients for a tensor that feeds several
downstream ops (including a parameter reused across shared layers) accumulate
by summation at the leaf.

Precision is a process-global setting: float32 for training speed, float64 for
finite-difference verification. Tensors keep the dtype they were created with.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NumericError

_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float32

# when enabled, every op output is checked for NaN/Inf (slow; used by tests)
check_finite = False

_ids = itertools.count()


def set_default_dtype(name: str) -> None:
    global _default_dtype
    if name not in _DTYPES:
        raise ConfigError(f"unknown precision {name!r}, expected float32/float64")
    _default_dtype = _DTYPES[name]


def get_default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


@contextmanager
def precision(name: str):
    global _default_dtype
    prev = _default_dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        _default_dtype = prev


def _assert_finite(arr: np.ndarray, op: str) -> None:
    if check_finite and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {op}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_default_dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # ---- graph construction -------------------------------------------------

    @staticmethod
    def _result(data, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out.name = None
        out._parents = tuple(parents)
        out._backward = backward if out.requires_grad else None
        out._id = next(_ids)
        _assert_finite(data, op)
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # ---- arithmetic ---------------------------------------------------------

    @staticmethod
    def _wrap(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def __add__(self, other):
        other = Tensor._wrap(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.data.shape))

        return Tensor._result(a.data + b.data, (a, b), backward, "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = Tensor._wrap(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g, b.data.shape))

        return Tensor._result(a.data - b.data, (a, b), backward, "sub")

    def __neg__(self):
        a = self

        def backward(g):
            if a.requires_grad:
                a._accumulate(-g)

        return Tensor._result(-a.data, (a,), backward, "neg")

    def __mul__(self, other):
        other = Tensor._wrap(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.data.shape))

        return Tensor._result(a.data * b.data, (a, b), backward, "mul")

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        a = self

        def backward(g):
            if a.requires_grad:
                full = np.zeros_like(a.data)
                np.add.at(full, key, g)
                a._accumulate(full)

        return Tensor._result(a.data[key], (a,), backward, "getitem")

    # ---- shape ops ----------------------------------------------------------

    def reshape(self, *shape):
        a = self
        orig = a.data.shape

        def backward(g):
            if a.requires_grad:
                a._accumulate(g.reshape(orig))

        return Tensor._result(a.data.reshape(*shape), (a,), backward, "reshape")

    def transpose(self, axes):
        a = self
        inv = np.argsort(axes)

        def backward(g):
            if a.requires_grad:
                a._accumulate(g.transpose(inv))

        return Tensor._result(a.data.transpose(axes), (a,), backward, "transpose")

    # ---- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        a = self

        def backward(g):
            if a.requires_grad:
                a._accumulate(_expand_reduced(g, a.data.shape, axis, keepdims))

        return Tensor._result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")

    def mean(self, axis=None, keepdims=False):
        a = self
        count = a.data.size if axis is None else np.prod(
            [a.data.shape[ax] for ax in np.atleast_1d(axis)]
        )

        def backward(g):
            if a.requires_grad:
                a._accumulate(_expand_reduced(g, a.data.shape, axis, keepdims) / count)

        return Tensor._result(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward, "mean")

    def abs(self):
        a = self
        sign = np.sign(a.data)

        def backward(g):
            if a.requires_grad:
                a._accumulate(g * sign)

        return Tensor._result(np.abs(a.data), (a,), backward, "abs")

    # ---- backward pass ------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from this scalar loss into all reachable leaves."""
        if self.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {self.data.shape}")
        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            t = stack.pop()
            if t._id not in nodes and t.requires_grad:
                nodes[t._id] = t
                stack.extend(t._parents)
        self.grad = np.ones_like(self.data)
        for t in sorted(nodes.values(), key=lambda n: n._id, reverse=True):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)
                if t is not self:
                    t.grad = None  # free intermediate buffers; leaves keep theirs


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape).copy() if np.ndim(g) == 0 else np.full(shape, g)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


# ---- linear algebra ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-D, or 3-D with matching leading (batch/head) dim."""
    a, b = Tensor._wrap(a), Tensor._wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.ndim != b.data.ndim:
        raise DimensionError(f"matmul expects matching 2-D or 3-D operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    if a.data.ndim == 3 and a.data.shape[0] != b.data.shape[0]:
        raise DimensionError(f"matmul batch dimensions disagree: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return Tensor._result(a.data @ b.data, (a, b), backward, "matmul")


# ---- nonlinearities ---------------------------------------------------------


def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * s * (1.0 - s))

    return Tensor._result(s, (x,), backward, "sigmoid")


def swish(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    y = x.data * s

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * (s + y * (1.0 - s)))

    return Tensor._result(y, (x,), backward, "swish")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along `axis` (max-subtraction)."""
    if x.data.ndim == 0 or x.data.shape[axis] == 0:
        raise DimensionError("softmax requires a non-empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if x.requires_grad:
            dot = (g * y).sum(axis=axis, keepdims=True)
            x._accumulate(y * (g - dot))

    return Tensor._result(y, (x,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis with population variance, then affine."""
    d = x.data.shape[-1]
    if d < 2:
        raise DimensionError(f"layer_norm needs last dim >= 2, got {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    y = gamma.data * xhat + beta.data

    def backward(g):
        if gamma.requires_grad:
            axes = tuple(range(g.ndim - 1))
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            axes = tuple(range(g.ndim - 1))
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            gx = g * gamma.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            x._accumulate((gx - m1 - xhat * m2) * inv)

    return Tensor._result(y, (x, gamma, beta), backward, "layer_norm")


def depthwise_conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel 1-D convolution with zero 'same' padding.

    x is T x d, kernel is k x d with k odd; output is T x d.
    """
    k, d = kernel.data.shape
    if k % 2 == 0:
        raise ConfigError(f"depthwise kernel length must be odd, got {k}")
    T = x.data.shape[0]
    if x.data.ndim != 2 or x.data.shape[1] != d:
        raise DimensionError(f"depthwise_conv1d shape mismatch: x {x.shape}, kernel {kernel.shape}")
    pad = k // 2
    xpad = np.zeros((T + k - 1, d), dtype=x.data.dtype)
    xpad[pad:pad + T] = x.data
    y = np.zeros_like(x.data)
    for j in range(k):
        y += kernel.data[j] * xpad[j:j + T]

    def backward(g):
        if kernel.requires_grad:
            gk = np.empty_like(kernel.data)
            for j in range(k):
                gk[j] = (xpad[j:j + T] * g).sum(axis=0)
            kernel._accumulate(gk)
        if x.requires_grad:
            gpad = np.zeros_like(xpad)
            for j in range(k):
                gpad[j:j + T] += kernel.data[j] * g
            x._accumulate(gpad[pad:pad + T])

    return Tensor._result(y, (x, kernel), backward, "depthwise_conv1d")


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p == 0."""
    if p <= 0.0:
        return x
    mask = (rng.random(x.data.shape) >= p) / (1.0 - p)
    return x * Tensor(mask)


# ---- verification oracle ----------------------------------------------------


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    The error is measured per parameter as ||analytic - numeric|| over
    max(||analytic||, ||numeric||); comparing element by element instead would
    let finite-difference round-off dominate on entries whose gradient happens
    to be orders of magnitude below the rest of the parameter.

    `f` must rebuild the loss from `params` on every call. Run under float64.
    """
    if not (0.0 < eps <= 1e-2):
        raise ContractError(f"grad_check eps must be in (0, 1e-2], got {eps}")
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = float(f().data)
            flat[i] = orig - eps
            lm = float(f().data)
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericError(f"non-finite loss while probing parameter {p.name or p}")
            numeric[i] = (lp - lm) / (2.0 * eps)
        gflat = ga.reshape(-1)
        err = np.linalg.norm(gflat - numeric) / max(
            np.linalg.norm(gflat), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(err))
    for p in params:
        p.grad = None
    return worst
