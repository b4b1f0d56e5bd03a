"""Minimal dense tensor with reverse-mode differentiation and a FLOP ledger.

Tensors wrap numpy arrays.  Every public op checks its result for NaN/Inf and
charges multiply-accumulates to the active :class:`FlopLedger`.  Attention
kernels additionally charge *interaction units*: ``D`` per query-key pair.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf."""


class UsageError(RuntimeError):
    pass


class FlopLedger:
    """Counts attention interaction units and all multiply-accumulates."""

    __slots__ = ("interaction_units", "full_flops")

    def __init__(self) -> None:
        self.interaction_units = 0
        self.full_flops = 0

    def charge_interaction(self, units: int) -> None:
        self.interaction_units += int(units)

    def charge_flops(self, macs: int) -> None:
        self.full_flops += int(macs)

    def reset(self) -> None:
        self.interaction_units = 0
        self.full_flops = 0

    def read(self) -> tuple[int, int]:
        return self.interaction_units, self.full_flops

    def __repr__(self) -> str:
        return f"FlopLedger(interaction_units={self.interaction_units}, full_flops={self.full_flops})"


_GLOBAL_LEDGER = FlopLedger()
_LEDGER: contextvars.ContextVar[FlopLedger] = contextvars.ContextVar("ledger", default=_GLOBAL_LEDGER)
_GRAD_ENABLED: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)


def current_ledger() -> FlopLedger:
    return _LEDGER.get()


def ledger_reset() -> None:
    _LEDGER.get().reset()


def ledger_read() -> tuple[int, int]:
    """Return ``(interaction_units, full_flops)`` since the last reset."""
    return _LEDGER.get().read()


@contextlib.contextmanager
def use_ledger(ledger: FlopLedger):
    token = _LEDGER.set(ledger)
    try:
        yield ledger
    finally:
        _LEDGER.reset(token)


@contextlib.contextmanager
def no_grad():
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind not in "f":
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("tensor / tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


_reduce_sum = np.add.reduce  # skips the ndarray.sum wrapper on this hot path


def _check_finite(arr: np.ndarray, op: str) -> None:
    # a NaN/Inf anywhere makes the sum non-finite; only a finite-overflow
    # sum needs the elementwise check
    if not math.isfinite(_reduce_sum(arr, axis=None)) and not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced NaN or Inf")


def make_result(data: np.ndarray, parents: Iterable[Tensor], backward, op: str) -> Tensor:
    """Wrap an op result, recording it on the tape when gradients are needed.

    ``backward`` maps the upstream gradient to one gradient (or ``None``) per parent.
    """
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    parents = tuple(parents)
    if _GRAD_ENABLED.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
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


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return make_result(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data - b.data
    sa, sb = a.shape, b.shape
    return make_result(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        s = float(b)
        return make_result(a.data * s, (a,), lambda g: (g * s,), "mul")
    ad, bd = a.data, b.data
    out = ad * bd
    return make_result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    c = math.sqrt(2.0 / math.pi)
    xd = x.data
    x2 = xd * xd  # float32 ``**`` goes through a slow generic pow
    inner = c * xd * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return make_result(out, (x,), backward, "gelu")


# -- linear algebra -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {ad.shape} and {bd.shape}")
    k, n = bd.shape[-2:]
    if ad.shape[-1] != k:
        raise ShapeError(f"matmul inner dimensions differ: {ad.shape} @ {bd.shape}")
    out = np.matmul(ad, bd)
    _LEDGER.get().charge_flops(out.size * k)  # batch * m * n * k

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return make_result(out, (a, b), backward, "matmul")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    out = x.data.reshape(shape)
    return make_result(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=()) -> Tensor:
    if not axes:
        axes = tuple(range(x.ndim))[::-1]
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    inv = np.argsort(axes)
    out = np.transpose(x.data, axes)
    return make_result(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x: Tensor, key) -> Tensor:
    out = x.data[key]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)
    shape, dt = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dt)
        np.add.at(full, key, g)
        return (full,)

    return make_result(np.array(out, copy=True), (x,), backward, "getitem")


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"token id out of range [0, {weight.shape[0]})")
    out = weight.data[ids]
    shape, dt = weight.shape, weight.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dt)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return make_result(out, (weight,), backward, "embedding")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty list")
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return make_result(out, tuple(tensors), backward, "concat")


# -- reductions / normalisation -------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    shape, dt = x.shape, x.dtype
    return make_result(
        np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, g, dtype=dt),), "sum"
    )


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    shape, dt = x.shape, x.dtype
    return make_result(
        np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, g / n, dtype=dt),), "mean"
    )


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(m: Tensor) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    if m.ndim == 0 or m.shape[-1] == 0:
        raise ShapeError("softmax over an empty row")
    s = _softmax(m.data)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return make_result(s, (m,), backward, "softmax_rows")


LN_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    D = x.shape[-1] if x.ndim else 0
    if D == 0:
        raise ShapeError("layer_norm over a zero-width axis")
    if gain.shape != (D,) or bias.shape != (D,):
        raise ShapeError(f"layer_norm affine params must have shape ({D},)")
    xd = x.data
    xc = xd - _reduce_sum(xd, axis=-1, keepdims=True) / D
    var = _reduce_sum(xc * xc, axis=-1, keepdims=True) / D
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gain.data
    out = xhat * gd + bias.data

    def backward(g):
        gx = ggain = gbias = None
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, D).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, D).sum(axis=0)
        if x.requires_grad:
            gh = g * gd
            gx = rstd * (gh - gh.sum(axis=-1, keepdims=True) / D - xhat * ((gh * xhat).sum(axis=-1, keepdims=True) / D))
        return gx, ggain, gbias

    return make_result(out, (x, gain, bias), backward, "layer_norm")


def cross_entropy(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Token cross-entropy; ``logits`` is ``(..., V)`` and ``targets`` ints of shape ``(...)``."""
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    flat = logits.data.reshape(-1, V)
    t = targets.reshape(-1)
    if flat.shape[0] != t.shape[0]:
        raise ShapeError(f"{flat.shape[0]} logit rows vs {t.shape[0]} targets")
    if flat.shape[0] == 0:
        raise ShapeError("cross_entropy over zero positions")
    z = flat - flat.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    nll = lse - z[np.arange(t.shape[0]), t]
    total = nll.sum()
    scale = 1.0 / t.shape[0] if reduction == "mean" else 1.0
    if reduction not in ("mean", "sum"):
        raise UsageError(f"unknown reduction {reduction!r}")
    shape = logits.shape

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(t.shape[0]), t] -= 1.0
        return ((p * (g * scale)).reshape(shape),)

    return make_result(np.asarray(total * scale), (logits,), backward, "cross_entropy")


# -- differentiation -------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Back-propagate from a scalar ``loss`` into every ``requires_grad`` leaf.

    Gradients accumulate into ``leaf.grad``.  The tape is released afterwards.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor requiring grad")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
        node._parents = ()
        node._backward = None


def parameter(data, dtype=DEFAULT_DTYPE, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True, name=name)
