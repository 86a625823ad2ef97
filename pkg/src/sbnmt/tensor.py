"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation records its inputs and a closure mapping the
output gradient to input gradients.  ``Tensor.backward`` walks the recorded
graph in reverse topological order, visiting each node once.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class ShapeError(ValueError):
    """Raised on incompatible operand shapes."""


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph (inference, oracles)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        arr = np.array(data, dtype=DTYPE)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite value in tensor created by {op!r}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        """Populate ``grad`` on every requires-grad tensor reachable from this scalar."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, op="const")


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"operation {op!r} produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
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
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = as_tensor(a)
        c = float(b)
        return _result(a.data * c, (a,), lambda g: (g * c,), "scale")
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _result(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return mul(a, 1.0 / float(b))
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return _result(out, (a, b), backward, "div")


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")
    try:
        np.broadcast_shapes(ad.shape[:-2], bd.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions of {ad.shape} and {bd.shape} do not broadcast") from None

    if bd.ndim == 2:
        # activations times a weight matrix: one flat GEMM each way
        def backward(g):
            ga = g @ bd.T if a.requires_grad else None
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if b.requires_grad else None
            return ga, gb

        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + bd.shape[-1:])
        return _result(out, (a, b), backward, "matmul")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), backward, "matmul")


# ---------------------------------------------------------------- elementwise

def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0  # subgradient 0 at 0
    return _result(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = np.empty_like(x.data)
    p = x.data >= 0
    y[p] = 1.0 / (1.0 + np.exp(-x.data[p]))
    e = np.exp(x.data[~p])
    y[~p] = e / (1.0 + e)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(xd)
    return _result(y, (x,), lambda g: (g / xd,), "log")


_ELEMENTWISE = {"add": add, "mul": mul, "tanh": tanh, "relu": relu, "sigmoid": sigmoid}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name: add, mul (binary, broadcasting) or tanh, relu, sigmoid (unary)."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------- reductions and shape ops

def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    fancy = any(isinstance(i, (list, np.ndarray)) for i in (index if isinstance(index, tuple) else (index,)))

    def backward(g):
        out = np.zeros(shape, dtype=DTYPE)
        if fancy:
            np.add.at(out, index, g)
        else:
            out[index] = g
        return (out,)

    return _result(np.array(x.data[index]), (x,), backward, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in ts], axis=axis), ts,
                   lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]``; gradient scatters back into the rows used."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"token id out of range [0, {weight.shape[0]})")
    shape = weight.shape

    def backward(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _result(weight.data[ids], (weight,), backward, "embedding")


# ---------------------------------------------------------------- normalisation

def softmax(x, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-stabilised softmax.  ``mask`` (broadcastable bool, True = admissible)
    sends excluded entries to -inf before normalising."""
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, z.shape)
        if not mask.any(axis=axis).all():
            raise ValueError("softmax: a row has no admissible entry")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _result(y, (x,), backward, "log_softmax")


def layer_norm(x, gain, bias, eps: float = 1e-6) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last extent {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def backward(g):
        gx = gxhat = None
        if x.requires_grad:
            gxhat = g * gd
            gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gbias = g.sum(axis=lead) if bias.requires_grad else None
        return gx, ggain, gbias

    return _result(xhat * gd + bias.data, (x, gain, bias), backward, "layer_norm")


def dropout(x, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity in eval mode or when ``p == 0``."""
    x = as_tensor(x)
    if not train or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs a seeded generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------- loss

def cross_entropy_label_smoothed(logits, targets, eps_ls: float = 0.0, pad_id: int | None = None,
                                 reduction: str = "mean") -> Tensor:
    """Cross-entropy against ``(1 - eps_ls) * onehot + eps_ls / V``.

    Positions whose target equals ``pad_id`` are excluded.  ``reduction="sum"``
    returns the summed loss so callers can normalise over several streams.
    """
    if not 0.0 <= eps_ls < 1.0:
        raise ValueError(f"eps_ls must be in [0, 1), got {eps_ls}")
    logits = as_tensor(logits)
    V = logits.shape[-1]
    t = np.asarray(targets).reshape(-1)
    if t.size and (t.min() < 0 or t.max() >= V):
        raise IndexError(f"target id out of range [0, {V})")
    z = logits.data.reshape(-1, V)
    if z.shape[0] != t.shape[0]:
        raise ShapeError(f"cross_entropy: {z.shape[0]} logit rows vs {t.shape[0]} targets")
    keep = np.ones(t.shape, dtype=bool) if pad_id is None else t != pad_id
    n = int(keep.sum())
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    q = np.full(z.shape, eps_ls / V)
    q[np.arange(t.size), t] += 1.0 - eps_ls
    per_row = -(q * logp).sum(axis=1)
    total = float((per_row * keep).sum())
    scale = 1.0 / max(n, 1) if reduction == "mean" else 1.0
    shape = logits.shape

    def backward(g):
        p = np.exp(logp)
        grad = (p - q) * keep[:, None] * (float(g) * scale)
        return (grad.reshape(shape),)

    return _result(np.asarray(total * scale), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------- gradient oracle

def finite_difference_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5,
                            floor: float = 1e-6, sample: int | None = None, seed: int = 0) -> float:
    """Max relative error between ``backward()`` and central differences.

    Each component's error is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``;
    ``floor`` keeps exactly-zero gradients from dividing by zero.  With
    ``sample`` set, only that many randomly chosen components are probed.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    xt = Tensor(base.copy(), requires_grad=True)
    f(xt).backward()
    analytic = np.zeros_like(base) if xt.grad is None else xt.grad

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    probed = np.arange(base.size)
    if sample is not None and sample < base.size:
        probed = np.sort(np.random.default_rng(seed).choice(base.size, sample, replace=False))
    with no_grad():
        for i in probed:
            probe = base.copy().reshape(-1)
            probe[i] += h
            up = f(Tensor(probe.reshape(base.shape))).item()
            probe[i] -= 2 * h
            down = f(Tensor(probe.reshape(base.shape))).item()
            flat[i] = (up - down) / (2 * h)
    a, n = analytic.reshape(-1)[probed], flat[probed]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max(initial=0.0))


def parameters_zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
