"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run: each op records its parents and a backward closure, and
``backward()`` replays the implicit graph in reverse topological order.
Sized for small transformer experiments; no GPU, no mixed precision.
"""
from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np
from scipy.special import erf as _np_erf

from .special import digamma as _digamma
from .special import log_gamma as _log_gamma
from .special import trigamma as _trigamma

# Finite stand-in for -inf so masked logits keep tensors finite.
NEG_INF = -1.0e30

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class NumericError(ArithmeticError):
    """An op produced or was fed non-finite values (NaN/Inf are surfaced, not carried)."""


class ContractError(ValueError):
    """An op was called outside its contract (bad shape, axis, or non-scalar loss)."""


_GRAD_ENABLED = [True]
_FINITE_CHECKS = [True]


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values unaffected)."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


@contextlib.contextmanager
def finite_checks(enabled: bool):
    _FINITE_CHECKS.append(bool(enabled))
    try:
        yield
    finally:
        _FINITE_CHECKS.pop()


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._backward = None
        self._parents: tuple = ()
        self.op = "leaf"

    # -- construction ------------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"], op: str, backward) -> "Tensor":
        if _FINITE_CHECKS[-1] and not np.all(np.isfinite(data)):
            raise NumericError(f"non-finite values produced by op '{op}'")
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.op = op
        if _GRAD_ENABLED[-1] and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties --------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def _accum(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    # -- autodiff ----------------------------------------------------------

    def _toposort(self) -> list:
        order, visited, stack = [], set(), [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        return order

    def backward(self, seed: np.ndarray | float | None = None) -> None:
        """Backpropagate from this node. Without a seed the node must be scalar."""
        if seed is None:
            if self.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            seed_arr = np.ones_like(self.data)
        else:
            seed_arr = np.broadcast_to(np.asarray(seed, dtype=np.float64), self.shape).copy()
        order = self._toposort()
        self._accum(seed_arr)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_graph_grads(self) -> None:
        """Clear .grad on every node reachable from this one (leaves included)."""
        for node in self._toposort():
            node.grad = None

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        data = self.data + other.data

        def bwd(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g, other.shape))

        return Tensor._result(data, (self, other), "add", bwd)

    __radd__ = __add__

    def __neg__(self):
        def bwd(g):
            if self.requires_grad:
                self._accum(-g)

        return Tensor._result(-self.data, (self,), "neg", bwd)

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        data = self.data * other.data

        def bwd(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g * self.data, other.shape))

        return Tensor._result(data, (self, other), "mul", bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        data = self.data / other.data

        def bwd(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g / other.data, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(-g * self.data / other.data**2, other.shape))

        return Tensor._result(data, (self, other), "div", bwd)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise ContractError("only constant exponents are supported")
        data = self.data**p

        def bwd(g):
            if self.requires_grad:
                self._accum(g * p * self.data ** (p - 1))

        return Tensor._result(data, (self,), "pow", bwd)

    def __matmul__(self, other):
        other = as_tensor(other)
        if self.ndim < 2 or other.ndim < 2:
            raise ContractError("matmul operands must have ndim >= 2")
        data = self.data @ other.data

        def bwd(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g @ other.data.swapaxes(-1, -2), self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(self.data.swapaxes(-1, -2) @ g, other.shape))

        return Tensor._result(data, (self, other), "matmul", bwd)

    # -- reductions --------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g):
            if not self.requires_grad:
                return
            if axis is None:
                self._accum(np.broadcast_to(g, self.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                self._accum(np.broadcast_to(gg, self.shape).copy())

        return Tensor._result(np.asarray(data), (self,), "sum", bwd)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.size
        elif isinstance(axis, tuple):
            n = int(np.prod([self.shape[a] for a in axis]))
        else:
            n = self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- shape manipulation --------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        data = self.data.reshape(shape)

        def bwd(g):
            if self.requires_grad:
                self._accum(g.reshape(old))

        return Tensor._result(data, (self,), "reshape", bwd)

    def swapaxes(self, a: int, b: int):
        data = self.data.swapaxes(a, b)

        def bwd(g):
            if self.requires_grad:
                self._accum(g.swapaxes(a, b))

        return Tensor._result(data, (self,), "swapaxes", bwd)

    def broadcast_to(self, shape):
        shape = tuple(shape)
        data = np.broadcast_to(self.data, shape).copy()

        def bwd(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.shape))

        return Tensor._result(data, (self,), "broadcast_to", bwd)

    def __getitem__(self, idx):
        data = self.data[idx]
        if np.isscalar(data):
            data = np.asarray(data)

        def bwd(g):
            if self.requires_grad:
                full = np.zeros_like(self.data)
                np.add.at(full, idx, g)
                self._accum(full)

        return Tensor._result(np.array(data, copy=True), (self,), "getitem", bwd)

    # -- elementwise functions ---------------------------------------------

    def exp(self):
        data = np.exp(self.data)

        def bwd(g):
            if self.requires_grad:
                self._accum(g * data)

        return Tensor._result(data, (self,), "exp", bwd)

    def log(self):
        data = np.log(self.data)

        def bwd(g):
            if self.requires_grad:
                self._accum(g / self.data)

        return Tensor._result(data, (self,), "log", bwd)

    def sqrt(self):
        data = np.sqrt(self.data)

        def bwd(g):
            if self.requires_grad:
                self._accum(g * 0.5 / data)

        return Tensor._result(data, (self,), "sqrt", bwd)

    def tanh(self):
        data = np.tanh(self.data)

        def bwd(g):
            if self.requires_grad:
                self._accum(g * (1.0 - data**2))

        return Tensor._result(data, (self,), "tanh", bwd)

    def sigmoid(self):
        data = np.where(self.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(self.data))),
                        np.exp(-np.abs(self.data)) / (1.0 + np.exp(-np.abs(self.data))))

        def bwd(g):
            if self.requires_grad:
                self._accum(g * data * (1.0 - data))

        return Tensor._result(data, (self,), "sigmoid", bwd)

    def softplus(self):
        data = np.logaddexp(0.0, self.data)

        def bwd(g):
            if self.requires_grad:
                sig = 1.0 / (1.0 + np.exp(-self.data))
                self._accum(g * sig)

        return Tensor._result(data, (self,), "softplus", bwd)

    def erf(self):
        data = _np_erf(self.data)

        def bwd(g):
            if self.requires_grad:
                self._accum(g * (2.0 / np.sqrt(np.pi)) * np.exp(-self.data**2))

        return Tensor._result(data, (self,), "erf", bwd)

    def abs(self):
        data = np.abs(self.data)

        def bwd(g):
            if self.requires_grad:
                self._accum(g * np.sign(self.data))

        return Tensor._result(data, (self,), "abs", bwd)

    def clamp_min(self, lo: float):
        data = np.maximum(self.data, lo)

        def bwd(g):
            if self.requires_grad:
                self._accum(g * (self.data >= lo))

        return Tensor._result(data, (self,), "clamp_min", bwd)

    def lgamma(self):
        data = _log_gamma(self.data)

        def bwd(g):
            if self.requires_grad:
                self._accum(g * _digamma(self.data))

        return Tensor._result(data, (self,), "lgamma", bwd)

    def digamma(self):
        data = _digamma(self.data)

        def bwd(g):
            if self.requires_grad:
                self._accum(g * _trigamma(self.data))

        return Tensor._result(data, (self,), "digamma", bwd)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- fused / structural ops --------------------------------------------------


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(ts, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accum(piece)

    return Tensor._result(data, ts, "concat", bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup `table[ids]` with scatter-add gradient into the table."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError("embedding ids must be integers")
    data = table.data[ids]

    def bwd(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids, g)
            table._accum(full)

    return Tensor._result(data, (table,), "embedding", bwd)


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where `mask` is True by `value`; gradient flows elsewhere."""
    mask = np.asarray(mask, dtype=bool)
    data = np.where(mask, value, x.data)

    def bwd(g):
        if x.requires_grad:
            x._accum(_unbroadcast(np.where(mask, 0.0, g), x.shape))

    return Tensor._result(data, (x,), "masked_fill", bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtraction) along `axis`."""
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax requires finite input")
    if x.shape == () or axis >= x.ndim or axis < -x.ndim:
        raise ContractError(f"invalid softmax axis {axis} for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        if x.requires_grad:
            gy = g * out
            x._accum(gy - out * gy.sum(axis=axis, keepdims=True))

    return Tensor._result(out, (x,), "softmax", bwd)


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    s = np.exp(x.data - m).sum(axis=axis, keepdims=True)
    data = m + np.log(s)
    soft = np.exp(x.data - data)
    if not keepdims:
        data = np.squeeze(data, axis=axis)

    def bwd(g):
        if x.requires_grad:
            gg = g if keepdims else np.expand_dims(g, axis)
            x._accum(gg * soft)

    return Tensor._result(data, (x,), "logsumexp", bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    soft = np.exp(data)

    def bwd(g):
        if x.requires_grad:
            x._accum(g - soft * g.sum(axis=axis, keepdims=True))

    return Tensor._result(data, (x,), "log_softmax", bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GeLU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    phi = 0.5 * (1.0 + _np_erf(x.data * _INV_SQRT2))
    data = x.data * phi

    def bwd(g):
        if x.requires_grad:
            pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data**2)
            x._accum(g * (phi + x.data * pdf))

    return Tensor._result(data, (x,), "gelu", bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be > 0")
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ContractError("layer_norm needs a nonempty last axis")
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    d = x.data - mu
    var = (d**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = d * inv
    data = gain.data * xhat + bias.data

    def bwd(g):
        if gain.requires_grad:
            gain._accum(_unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            bias._accum(_unbroadcast(g, bias.shape))
        if x.requires_grad:
            gx = g * gain.data
            gv = (gx * d).sum(axis=-1, keepdims=True) * (-0.5) * inv**3
            gm = -inv * gx.sum(axis=-1, keepdims=True) + gv * (-2.0 / n) * d.sum(axis=-1, keepdims=True)
            x._accum(gx * inv + gv * 2.0 * d / n + gm / n)

    return Tensor._result(data, (x, gain, bias), "layer_norm", bwd)
