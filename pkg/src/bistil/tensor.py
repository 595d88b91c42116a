"""Dense tensors with tape-based reverse-mode differentiation, plus AdamW.

Every op returns a new :class:`Tensor`; when gradients are enabled and any
input requires a gradient, the result keeps references to its parents and a
closure that pushes the output gradient back to them. :func:`backward` walks
that graph in reverse topological order.

Storage is float32 unless :func:`default_dtype` selects something else (the
gradient checks use float64 as a reference build).
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, DomainError, InputError

class _State(threading.local):
    """Gradient switch and default dtype, kept per thread so concurrent ``no_grad`` blocks cannot interfere."""

    grad = True
    dtype = np.dtype(np.float32)


_state = _State()


@contextlib.contextmanager
def no_grad():
    prev = _state.grad
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _state.dtype
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


def get_default_dtype() -> np.dtype:
    return _state.dtype


def grad_enabled() -> bool:
    return _state.grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_state.dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

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
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_state.dtype))


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=_state.dtype), requires_grad=True)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    needs = _state.grad and any(p.requires_grad for p in parents)
    if needs:
        return Tensor(data, True, parents, backward)
    return Tensor(data)


def _check_nonempty(*tensors: Tensor) -> None:
    for t in tensors:
        if t.data.size == 0:
            raise DomainError(f"empty tensor of shape {t.shape}")


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


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc


def _accumulate(t: Tensor, g: np.ndarray, grads: dict) -> None:
    if not t.requires_grad:
        return
    key = id(t)
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = g


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def bw(g, grads):
        _accumulate(a, _unbroadcast(g, a.shape), grads)
        _accumulate(b, _unbroadcast(g, b.shape), grads)

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def bw(g, grads):
        _accumulate(a, _unbroadcast(g, a.shape), grads)
        _accumulate(b, _unbroadcast(-g, b.shape), grads)

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = as_tensor(a)
        c = b

        def bw_scalar(g, grads):
            _accumulate(a, g * c, grads)

        return _result(a.data * c, (a,), bw_scalar)
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def bw(g, grads):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape), grads)
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape), grads)

    return _result(a.data * b.data, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_nonempty(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} are incompatible")

    def bw(g, grads):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape), grads)
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape), grads)

    return _result(a.data @ b.data, (a, b), bw)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc

    def bw(g, grads):
        _accumulate(x, g.reshape(x.shape), grads)

    return _result(out, (x,), bw)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))

    def bw(g, grads):
        _accumulate(x, g.transpose(inverse), grads)

    return _result(x.data.transpose(axes), (x,), bw)


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def bw(g, grads):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        _accumulate(x, full, grads)

    return _result(np.array(out, copy=True), (x,), bw)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g, grads):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape).copy(), grads)

    return _result(np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    _check_nonempty(x)
    n = x.data.size if axis is None else np.prod([x.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def bw(g, grads):
        _accumulate(x, g * (1.0 - y * y), grads)

    return _result(y, (x,), bw)


_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    _check_nonempty(x)
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT_HALF))
    y = x.data * cdf

    def bw(g, grads):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        _accumulate(x, g * (cdf + x.data * pdf), grads)

    return _result(y.astype(x.data.dtype, copy=False), (x,), bw)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    _check_nonempty(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g, grads):
        _accumulate(x, y * (g - (g * y).sum(axis=-1, keepdims=True)), grads)

    return _result(y, (x,), bw)


def log_softmax_array(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Layer normalisation over the last axis."""
    _check_nonempty(x)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layernorm params {gain.shape}/{bias.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    y = xhat * gain.data + bias.data

    def bw(g, grads):
        if x.requires_grad:
            gx = g * gain.data
            gx = rstd * (gx - gx.mean(axis=-1, keepdims=True)
                         - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _accumulate(x, gx, grads)
        lead = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).sum(axis=lead), grads)
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=lead), grads)

    return _result(y, (x, gain, bias), bw)


def embed_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise InputError(f"token ids must be integers, got {ids.dtype}")
    _check_nonempty(table)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise InputError(f"id out of range for table with {table.shape[0]} rows")

    def bw(g, grads):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        _accumulate(table, full, grads)

    return _result(table.data[ids], (table,), bw)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)

    def bw(g, grads):
        _accumulate(x, g * keep, grads)

    return _result(x.data * keep, (x,), bw)


# ---------------------------------------------------------------------------
# losses


def _weights(weight, shape: tuple[int, ...], dtype) -> tuple[np.ndarray, float]:
    if weight is None:
        w = np.ones(shape, dtype=dtype)
    else:
        try:
            w = np.broadcast_to(np.asarray(weight, dtype=dtype), shape)
        except ValueError as exc:
            raise DimensionError(f"weight does not broadcast to {shape}") from exc
    return w, float(w.sum(dtype=np.float64))


def mse(a, b, weight=None) -> Tensor:
    """Weighted mean squared error; ``weight`` broadcasts against the operands.

    With no weight this is the plain mean over all elements. A zero total
    weight yields a zero loss.
    """
    a, b = as_tensor(a), as_tensor(b)
    _check_nonempty(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"mse operands differ: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    w, total = _weights(weight, diff.shape, diff.dtype)
    scale = 0.0 if total == 0.0 else 1.0 / total
    out = np.asarray((w * diff * diff).sum(dtype=np.float64) * scale, dtype=diff.dtype)

    def bw(g, grads):
        ga = (2.0 * scale) * g * w * diff
        _accumulate(a, ga.astype(diff.dtype, copy=False), grads)
        _accumulate(b, (-ga).astype(diff.dtype, copy=False), grads)

    return _result(out, (a, b), bw)


def soft_cross_entropy(logits, target_probs, weight=None) -> Tensor:
    """``-sum(p * log softmax(z))`` per position, averaged with ``weight`` over positions."""
    z, p = as_tensor(logits), as_tensor(target_probs)
    _check_nonempty(z, p)
    if z.shape != p.shape:
        raise DimensionError(f"logits {z.shape} and targets {p.shape} differ")
    logq = log_softmax_array(z.data)
    w, total = _weights(weight, z.shape[:-1], z.data.dtype)
    scale = 0.0 if total == 0.0 else 1.0 / total
    per = -(p.data * logq).sum(axis=-1)
    out = np.asarray((w * per).sum(dtype=np.float64) * scale, dtype=z.data.dtype)

    def bw(g, grads):
        wg = (g * scale * w)[..., None]
        if z.requires_grad:
            q = np.exp(logq)
            _accumulate(z, wg * (q * p.data.sum(axis=-1, keepdims=True) - p.data), grads)
        if p.requires_grad:
            _accumulate(p, -wg * logq, grads)

    return _result(out, (z, p), bw)


def cross_entropy(logits, labels, ignore_index: int = -100) -> Tensor:
    """Hard-label cross-entropy averaged over positions whose label != ignore_index."""
    z = as_tensor(logits)
    labels = np.asarray(labels)
    _check_nonempty(z)
    if labels.shape != z.shape[:-1]:
        raise DimensionError(f"labels {labels.shape} do not match logits {z.shape}")
    valid = labels != ignore_index
    count = int(valid.sum())
    safe = np.where(valid, labels, 0)
    if safe.size and (safe.min() < 0 or safe.max() >= z.shape[-1]):
        raise InputError("label outside logit range")
    logq = log_softmax_array(z.data)
    picked = np.take_along_axis(logq, safe[..., None], axis=-1)[..., 0]
    scale = 0.0 if count == 0 else 1.0 / count
    out = np.asarray(-(picked * valid).sum(dtype=np.float64) * scale, dtype=z.data.dtype)

    def bw(g, grads):
        q = np.exp(logq)
        onehot = np.zeros_like(q)
        np.put_along_axis(onehot, safe[..., None], 1.0, axis=-1)
        _accumulate(z, (g * scale) * valid[..., None] * (q - onehot), grads)

    return _result(out, (z,), bw)


OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "reshape": reshape,
    "transpose": transpose,
    "getitem": getitem,
    "sum": sum,
    "mean": mean,
    "tanh": tanh,
    "gelu": gelu,
    "softmax": softmax,
    "layernorm": layernorm,
    "embed_lookup": embed_lookup,
    "dropout": dropout,
    "mse": mse,
    "soft_cross_entropy": soft_cross_entropy,
    "cross_entropy": cross_entropy,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    try:
        op = OPS[kind]
    except KeyError:
        raise ContractError(f"unknown op kind {kind!r}") from None
    return op(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# reverse pass


def _topological(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
        else:
            node._backward(g, grads)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class OptimizerState:
    lr: float
    total_steps: int
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def current_lr(self) -> float:
        return self.lr * max(0.0, 1.0 - self.step / self.total_steps)


def init_optimizer(params: Mapping[str, Tensor], lr: float, total_steps: int, **kwargs) -> OptimizerState:
    state = OptimizerState(lr=lr, total_steps=max(1, int(total_steps)), **kwargs)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adamw_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray | None] | None,
    state: OptimizerState,
    trainable_mask: Mapping[str, np.ndarray | bool] | None = None,
) -> None:
    """One decoupled-weight-decay Adam update with linear learning-rate decay.

    ``grads`` defaults to each parameter's ``.grad``. Entries whose mask is
    False are left bitwise untouched, including by weight decay.
    """
    lr = state.current_lr()
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            continue
        mask = None if trainable_mask is None else trainable_mask.get(name, True)
        if mask is False:
            continue
        if mask is not None and mask is not True:
            mask = np.asarray(mask)
            if mask.shape != p.shape:
                raise DimensionError(f"mask for {name} has shape {mask.shape}, expected {p.shape}")
        if name not in state.m:
            raise ContractError(f"optimizer state has no slot for {name}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        new = p.data * (1.0 - lr * state.weight_decay) - lr * update
        new = new.astype(p.data.dtype, copy=False)
        if mask is None or mask is True:
            p.data[...] = new
        else:
            np.copyto(p.data, new, where=mask)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
