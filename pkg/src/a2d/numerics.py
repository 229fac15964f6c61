"""A small reverse-mode autodiff engine over numpy arrays.

Only the operations needed by the Transformer and the distillation losses
are provided. Each op computes its forward value eagerly and, when gradient
recording is on and some input requires a gradient, attaches a closure that
maps the output gradient to one gradient per input.

Graphs must not be mutated in place; ``Tensor.data`` of a recorded node is
read by the backward closures.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InputError, ShapeError

KL_EPS = 1e-9
LN_EPS = 1e-5

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """Dense array with optional gradient tracking.

    ``grad`` is ``None`` until a backward pass reaches the tensor. Calling
    :func:`backward` repeatedly without :meth:`zero_grad` accumulates.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: tuple = (), _backward: BackwardFn | None = None,
                 op: str = "leaf"):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _raw(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _result(data: np.ndarray, parents: tuple, fn: BackwardFn, op: str) -> Tensor:
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=fn, op=op)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# -- backward driver --------------------------------------------------------

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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into ``grad`` of every reachable node."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss was not produced under gradient recording")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
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


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from None

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), fn, "add")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python/numpy constant."""
    c = np.asarray(c, dtype=a.dtype)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from None

    def fn(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _result(out, (a, b), fn, "mul")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0).astype(a.dtype), (a,),
                   lambda g: (g * pos,), "relu")


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate == 0`` or ``rng is None``."""
    if rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    return _result(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# -- reductions / shape -----------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), fn, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} into {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,),
                   lambda g: (g.transpose(inv),), "transpose")


def transpose_last_two(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"cannot concatenate shapes {shapes} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tuple(tensors), fn, "concat")


def concat_last_dim(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=-1)


def index(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(out), (a,), fn, "index")


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``[..., m, k] @ [..., k, n]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul batch dims not broadcastable: {a.shape} @ {b.shape}") from None

    def fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), fn, "matmul")


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]``; gradients scatter-add back into rows."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise InputError(f"token id out of range [0, {weight.shape[0]})")

    def fn(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids, g)
        return (full,)

    return _result(weight.data[ids], (weight,), fn, "embedding")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, then apply learnable gain and bias."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def fn(g):
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return (dx,
                _unbroadcast(g * xhat, gain.shape),
                _unbroadcast(g, bias.shape))

    return _result(out, (x, gain, bias), fn, "layer_norm")


# -- probability ops --------------------------------------------------------

def softmax_rows(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` (broadcastable to ``x``) marks the allowed entries. Masked
    entries are exactly zero; a row with no allowed entry is all zeros.
    """
    z = x.data
    if mask is not None:
        mask = np.asarray(_raw(mask), dtype=bool)
        try:
            mask = np.broadcast_to(mask, z.shape)
        except ValueError:
            raise ShapeError(f"mask shape {mask.shape} does not fit scores {z.shape}") from None
        z = np.where(mask, z, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - m)
    s = e.sum(axis=-1, keepdims=True)
    y = (e / np.where(s == 0, 1.0, s)).astype(x.dtype)

    def fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), fn, "softmax")


def log_softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def fn(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _result(out, (x,), fn, "log_softmax")


def normalize_rows(x: Tensor, mask=None, eps: float = KL_EPS) -> Tensor:
    """Clamp entries at ``eps`` and rescale each row to sum to one.

    Entries where ``mask`` is False are forced to zero.
    """
    keep = x.data > eps
    xc = np.maximum(x.data, eps)
    if mask is not None:
        m = np.broadcast_to(np.asarray(_raw(mask), dtype=bool), x.shape)
        xc = np.where(m, xc, 0.0)
        keep = keep & m
    s = xc.sum(axis=-1, keepdims=True)
    s = np.where(s == 0, 1.0, s)
    y = (xc / s).astype(x.dtype)

    def fn(g):
        return (((g - (g * y).sum(axis=-1, keepdims=True)) / s * keep).astype(x.dtype),)

    return _result(y, (x,), fn, "normalize_rows")


def kl_rows(p, q: Tensor, row_mask=None, eps: float = KL_EPS) -> Tensor:
    """Mean over active rows of KL(p_row || q_row).

    ``p`` is a constant target (its gradient is never computed). ``q`` is
    clamped at ``eps`` before the log and not renormalized; entries below
    the clamp receive no gradient. Terms with ``p == 0`` contribute 0.
    """
    pd = np.asarray(_raw(p))
    q = as_tensor(q)
    if pd.shape != q.shape:
        raise ShapeError(f"kl_rows shape mismatch: p {pd.shape} vs q {q.shape}")
    rows = pd.shape[:-1]
    if row_mask is None:
        w = np.ones(rows, dtype=q.dtype)
    else:
        try:
            w = np.broadcast_to(np.asarray(_raw(row_mask), dtype=bool), rows).astype(q.dtype)
        except ValueError:
            raise ShapeError(f"row mask does not fit rows {rows}") from None
    count = w.sum()
    qc = np.maximum(q.data, eps)
    pos = pd > 0
    logp = np.log(np.where(pos, pd, 1.0))
    terms = np.where(pos, pd * (logp - np.log(qc)), 0.0)
    if count == 0:
        out = np.zeros((), dtype=q.dtype)
    else:
        out = np.asarray((terms.sum(axis=-1) * w).sum() / count, dtype=q.dtype)

    def fn(g):
        if count == 0:
            return (np.zeros_like(q.data),)
        dq = np.where(q.data > eps, -pd / qc, 0.0) * (w[..., None] * (g / count))
        return (dq.astype(q.dtype),)

    return _result(out, (q,), fn, "kl_rows")


def cross_entropy(logits: Tensor, targets, ignore_id: int) -> Tensor:
    """Mean token negative log-likelihood over non-ignored rows of ``[n, V]``."""
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != t.size:
        raise ShapeError(f"cross_entropy expects [n, V] logits for {t.size} targets, got {logits.shape}")
    n, vocab = logits.shape
    bad = ((t < 0) | (t >= vocab)) & (t != ignore_id)
    if bad.any():
        raise InputError(f"target id {int(t[bad][0])} outside [0, {vocab})")
    valid = t != ignore_id
    count = int(valid.sum())
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    safe_t = np.where(valid, t, 0)
    if count == 0:
        out = np.zeros((), dtype=logits.dtype)
    else:
        picked = logp[np.arange(n), safe_t]
        out = np.asarray(-(picked * valid).sum() / count, dtype=logits.dtype)

    def fn(g):
        if count == 0:
            return (np.zeros_like(logits.data),)
        d = np.exp(logp)
        d[np.arange(n), safe_t] -= 1.0
        d *= valid[:, None] * (g / count)
        return (d.astype(logits.dtype),)

    return _result(out, (logits,), fn, "cross_entropy")


def parameters_checksum(params: Iterable[Tensor]) -> str:
    """Stable hex digest of parameter values (order-sensitive)."""
    import hashlib

    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()
