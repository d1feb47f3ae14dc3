#!/usr/bin/env python3
"""
Dense 2-D Tensor with Reverse-Mode Gradients
============================================

Minimal float64 tensor math that every model operation is built on. Each
operation records its parents and a hand-written backward rule; calling
``backward()`` on a scalar walks the recorded graph in reverse topological
order (the computation tape) and accumulates gradients into leaf tensors.

Key Features:
1. 64-bit row-major 2-D storage, nothing wider
2. Row replication of a 1xD operand to NxD is the only broadcast
3. Finite-value check after every operation
4. Central-difference ``grad_check`` against any ParamStore

Sample:
    >>> w = Tensor([[3.0]], requires_grad=True)
    >>> loss = (w * w).sum()
    >>> loss.backward()
    >>> w.grad
    array([[6.]])
"""

import logging
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from function.errors import DimensionError, NumericError, StateError

logger = logging.getLogger(__name__)

Number = Union[int, float]

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, finite differences)."""
    previous = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    """
    2-D float64 array with an optional gradient.

    Leaves created by the user hold ``requires_grad``; results of operations
    carry the backward closure and their parents while recording is enabled.
    """

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise DimensionError(f"Tensor must be 2-D, got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._op = "leaf"

    # ------------------------------------------------------------------ shape
    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor({self.rows}x{self.cols}, op={self._op}{label})"

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    # --------------------------------------------------------------- backward
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Reverse-mode sweep from this tensor; leaves accumulate into ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise StateError(f"backward() without a seed needs a scalar, got {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise DimensionError(f"seed gradient {grad.shape} does not match tensor {self.shape}")

        tape = _topological_order(self)
        pending = {id(self): grad}
        for node in reversed(tape):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg

    # -------------------------------------------------------------- operators
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            if other.shape == (1, 1) and self.shape != (1, 1):
                return scale_by(self, other)
            if self.shape == (1, 1) and other.shape != (1, 1):
                return scale_by(other, self)
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other: Number):
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other: "Tensor"):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    out._op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# =============================================================================
# Linear algebra
# =============================================================================

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; backward gives dA = dC·Bᵀ and dB = Aᵀ·dC."""
    if a.cols != b.rows:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return g @ B.T, A.T @ g

    return _result(A @ B, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    return _result(np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,), "transpose")


def _broadcast_pair(a: Tensor, b: Tensor, op: str) -> Tuple[bool, bool]:
    if a.shape == b.shape:
        return False, False
    if b.rows == 1 and a.cols == b.cols:
        return False, True
    if a.rows == 1 and a.cols == b.cols:
        return True, False
    raise DimensionError(f"{op} shape mismatch: {a.shape} vs {b.shape}")


def _reduce_if(g: np.ndarray, replicated: bool) -> np.ndarray:
    return g.sum(axis=0, keepdims=True) if replicated else g


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; a 1xD operand is replicated over the other's rows."""
    rep_a, rep_b = _broadcast_pair(a, b, "add")

    def backward(g):
        return _reduce_if(g, rep_a), _reduce_if(g, rep_b)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    rep_a, rep_b = _broadcast_pair(a, b, "sub")

    def backward(g):
        return _reduce_if(g, rep_a), -_reduce_if(g, rep_b)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product of equal shapes."""
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    A, B = a.data, b.data
    return _result(A * B, (a, b), lambda g: (g * B, g * A), "mul")


def scale(a: Tensor, k: float) -> Tensor:
    return _result(a.data * k, (a,), lambda g: (g * k,), "scale")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _result(a.data + c, (a,), lambda g: (g,), "add_scalar")


def scale_by(a: Tensor, s: Tensor) -> Tensor:
    """Multiply every entry of ``a`` by the 1x1 tensor ``s``."""
    if s.shape != (1, 1):
        raise DimensionError(f"scale_by needs a 1x1 factor, got {s.shape}")
    A, k = a.data, s.data[0, 0]

    def backward(g):
        return g * k, np.array([[np.sum(g * A)]])

    return _result(A * k, (a, s), backward, "scale_by")


def broadcast_rows(a: Tensor, n: int) -> Tensor:
    """Replicate a 1xD tensor to nxD."""
    if a.rows != 1:
        raise DimensionError(f"broadcast_rows needs a 1xD tensor, got {a.shape}")
    return _result(np.repeat(a.data, n, axis=0), (a,),
                   lambda g: (g.sum(axis=0, keepdims=True),), "broadcast_rows")


# =============================================================================
# Row structure
# =============================================================================

def vstack(parts: Sequence[Tensor]) -> Tensor:
    cols = {p.cols for p in parts}
    if len(cols) != 1:
        raise DimensionError(f"vstack column mismatch: {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.rows for p in parts])

    def backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _result(np.vstack([p.data for p in parts]), tuple(parts), backward, "vstack")


def take_rows(a: Tensor, index: Union[Sequence[int], np.ndarray]) -> Tensor:
    """Gather rows by index (repeats allowed); backward scatters with accumulation."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= a.rows)):
        raise DimensionError(f"take_rows index out of range for {a.shape}")
    n_rows = a.rows

    def backward(g):
        out = np.zeros((n_rows, g.shape[1]))
        np.add.at(out, idx, g)
        return (out,)

    return _result(a.data[idx], (a,), backward, "take_rows")


def mean_rows(a: Tensor) -> Tensor:
    """NxD -> 1xD column means."""
    n = a.rows
    return _result(a.data.mean(axis=0, keepdims=True), (a,),
                   lambda g: (np.repeat(g, n, axis=0) / n,), "mean_rows")


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(np.array([[a.data.sum()]]), (a,),
                   lambda g: (np.full(shape, g[0, 0]),), "sum_all")


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return _result(np.array([[a.data.mean()]]), (a,),
                   lambda g: (np.full(shape, g[0, 0] / n),), "mean_all")


# =============================================================================
# Nonlinearities
# =============================================================================

def row_softmax(a: Tensor) -> Tensor:
    """Softmax over each row, stabilised by subtracting the row maximum."""
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - np.sum(g * s, axis=1, keepdims=True)),)

    return _result(s, (a,), backward, "row_softmax")


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data)
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _result(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


# =============================================================================
# Distances and losses
# =============================================================================

def row_norm(a: Tensor) -> Tensor:
    """NxD -> Nx1 Euclidean norm per row; the gradient at a zero row is taken as 0."""
    X = a.data
    n = np.sqrt(np.sum(X * X, axis=1, keepdims=True))

    def backward(g):
        safe = np.where(n > 0.0, n, 1.0)
        return (np.where(n > 0.0, g * X / safe, 0.0),)

    return _result(n, (a,), backward, "row_norm")


def row_cosine_distance(a: Tensor, b: Tensor) -> Tensor:
    """
    Nx1 of ``1 - cos(a_i, b_i)``.

    Rows where either operand is the zero vector contribute exactly 1 with a
    zero gradient.
    """
    if a.shape != b.shape:
        raise DimensionError(f"row_cosine_distance shape mismatch: {a.shape} vs {b.shape}")
    A, B = a.data, b.data
    na = np.sqrt(np.sum(A * A, axis=1, keepdims=True))
    nb = np.sqrt(np.sum(B * B, axis=1, keepdims=True))
    valid = (na > 0.0) & (nb > 0.0)
    na_s = np.where(valid, na, 1.0)
    nb_s = np.where(valid, nb, 1.0)
    dot = np.sum(A * B, axis=1, keepdims=True)
    cos = np.where(valid, dot / (na_s * nb_s), 0.0)

    def backward(g):
        da = B / (na_s * nb_s) - cos * A / (na_s * na_s)
        db = A / (na_s * nb_s) - cos * B / (nb_s * nb_s)
        return (np.where(valid, -g * da, 0.0), np.where(valid, -g * db, 0.0))

    return _result(1.0 - cos, (a, b), backward, "row_cosine_distance")


def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy computed from logits in the overflow-safe form."""
    z = logits.data
    y = np.asarray(target, dtype=np.float64).reshape(z.shape)
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    m = z.size

    def backward(g):
        return (g[0, 0] * (expit(z) - y) / m,)

    return _result(np.array([[per.mean()]]), (logits,), backward, "bce_with_logits")


def dice_loss(probs: Tensor, target: np.ndarray, smooth: float = 1.0) -> Tensor:
    """``1 - (2·Σpy + s) / (Σp + Σy + s)``."""
    p = probs.data
    y = np.asarray(target, dtype=np.float64).reshape(p.shape)
    inter = float(np.sum(p * y))
    denom = float(np.sum(p) + np.sum(y)) + smooth
    numer = 2.0 * inter + smooth

    def backward(g):
        return (-g[0, 0] * (2.0 * y * denom - numer) / (denom * denom),)

    return _result(np.array([[1.0 - numer / denom]]), (probs,), backward, "dice_loss")


# =============================================================================
# Verification
# =============================================================================

def _scalar_value(value) -> float:
    v = value.item() if isinstance(value, Tensor) else float(value)
    if not np.isfinite(v):
        raise NumericError(f"loss is not finite: {v}")
    return v


def grad_check(loss_fn: Callable, params, eps: float = 1e-5,
               names: Optional[Iterable[str]] = None) -> float:
    """
    Compare analytic gradients with central differences.

    Returns the maximum over every checked entry of
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    selected = list(names) if names is not None else params.names()

    params.zero_grad()
    loss = loss_fn(params)
    _scalar_value(loss)
    loss.backward()
    analytic = {name: params[name].grad.copy() for name in selected}

    worst = 0.0
    with no_grad():
        for name in selected:
            flat = params[name].data.reshape(-1)
            grad = analytic[name].reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + eps
                f_plus = _scalar_value(loss_fn(params))
                flat[i] = original - eps
                f_minus = _scalar_value(loss_fn(params))
                flat[i] = original
                numeric = (f_plus - f_minus) / (2.0 * eps)
                worst = max(worst, abs(grad[i] - numeric) / max(1.0, abs(numeric)))
    logger.debug(f"grad_check over {len(selected)} parameters: max relative error {worst:.3e}")
    return worst
