"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op that touches a tensor requiring grad appends a node to the tape.
Nodes carry a monotonically increasing sequence number, so walking the
reachable nodes from highest to lowest number is exactly reverse tape
order. The tape is rebuilt on every forward pass; nothing is reused.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_seq = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    pass


class DegenerateRowError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    __slots__ = ("seq", "inputs", "backward_fn", "name")

    def __init__(self, inputs, backward_fn, name):
        self.seq = next(_seq)
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.name = name


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

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

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


class Parameter(Tensor):
    """A named leaf tensor owned by a model, plus its Adam accumulators."""

    __slots__ = ("name", "adam_m", "adam_v", "step_count")

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data, inputs: Sequence[Tensor], backward_fn: Callable, name: str) -> Tensor:
    out = Tensor(out_data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(tuple(inputs), backward_fn, name)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tape:
    """Recorded ops reachable from a root, in recording order."""

    def __init__(self, root: Tensor):
        nodes: dict[int, Node] = {}
        stack = [root]
        seen: set[int] = set()
        while stack:
            t = stack.pop()
            if t.node is None or id(t) in seen:
                continue
            seen.add(id(t))
            nodes[t.node.seq] = (t, t.node)
            stack.extend(t.node.inputs)
        self.entries = [nodes[k] for k in sorted(nodes)]

    def __len__(self) -> int:
        return len(self.entries)

    def reversed(self):
        return reversed(self.entries)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any tensor requiring grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, node in Tape(loss).reversed():
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
            else:
                key = id(inp)
                grads[key] = grads[key] + ig if key in grads else ig
    if loss.node is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), bw, "add")


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _record(a.data * c, (a,), lambda g: (g * c,), "scale")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return _record(out, (x,), bw, "gelu")


# ---------------------------------------------------------------- reductions


def sum_all(a: Tensor) -> Tensor:
    return _record(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _record(
        a.data.mean(), (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),), "mean"
    )


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape) -> Tensor:
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _record(
        np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes"
    )


def take(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing with scatter-add backward."""

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _record(a.data[index], (a,), bw, "take")


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"id out of range for table of {vocab} rows")

    def bw(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return _record(weight.data[ids], (weight,), bw, "embedding")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def where_rows(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select ``a`` where ``mask`` (broadcastable boolean) is true, else ``b``."""
    mask = np.asarray(mask, dtype=bool)

    def bw(g):
        return _unbroadcast(np.where(mask, g, 0.0), a.shape), _unbroadcast(
            np.where(mask, 0.0, g), b.shape
        )

    return _record(np.where(mask, a.data, b.data), (a, b), bw, "where")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading axes broadcast like ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with the batch axes of ``x`` flattened for speed."""
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(*lead, weight.shape[1])

    def bw(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape)
        gw = x2.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, inputs, bw, "linear")


# ---------------------------------------------------------------- normalisers


def masked_softmax(logits: Tensor, mask) -> Tensor:
    """Softmax over the last axis; entries where ``mask`` is -inf are excluded.

    ``mask`` holds 0 (allowed) or -inf (prevented) and broadcasts against
    ``logits``. Prevented entries come out exactly 0.0.
    """
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=DTYPE)
    allowed = np.broadcast_to(mask == 0.0, logits.shape)
    if not allowed.any(axis=-1).all():
        raise DegenerateRowError("softmax row has every position masked")
    z = np.where(allowed, logits.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(allowed, np.exp(np.where(allowed, z, 0.0)), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record(p, (logits,), bw, "masked_softmax")


def softmax(logits: Tensor) -> Tensor:
    return masked_softmax(logits, np.zeros(logits.shape[-1]))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias {gain.shape}/{bias.shape} vs width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gxhat = g * gain.data
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(out, (x, gain, bias), bw, "layer_norm")


def log_softmax(logits: Tensor) -> Tensor:
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _record(out, (logits,), bw, "log_softmax")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]``."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy wants [rows x classes], got {logits.shape}")
    rows, classes = logits.shape
    if targets.shape != (rows,):
        raise ShapeError(f"{rows} logit rows but {targets.shape[0]} targets")
    if rows and (targets.min() < 0 or targets.max() >= classes):
        raise IndexError(f"target index outside [0, {classes})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(rows), targets]
    p = np.exp(z - lse[:, None])

    def bw(g):
        d = p.copy()
        d[np.arange(rows), targets] -= 1.0
        return (d * (g / rows),)

    return _record(nll.mean(), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------- optimisation


def lr_at(step: int, total_steps: int, base_lr: float, warmup_fraction: float = 0.1) -> float:
    """Linear warmup to ``base_lr`` then linear decay to zero at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    warm = warmup_fraction * total_steps
    if warm > 0 and step <= warm:
        return base_lr * step / warm
    if total_steps == warm:
        return base_lr
    return base_lr * (total_steps - step) / (total_steps - warm)


def adam_step(
    params: Iterable[Parameter],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update using each parameter's ``.grad``."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ContractError(f"parameter {p.name!r} has no gradient")
    for p in params:
        p.step_count += 1
        p.adam_m *= beta1
        p.adam_m += (1 - beta1) * p.grad
        p.adam_v *= beta2
        p.adam_v += (1 - beta2) * p.grad * p.grad
        m_hat = p.adam_m / (1 - beta1**p.step_count)
        v_hat = p.adam_v / (1 - beta2**p.step_count)
        if lr != 0.0:
            p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
