"""Dense f64 tensors with a dynamically recorded reverse-mode tape.

Operations record onto the innermost active :class:`Tape` when at least one
input requires a gradient. Outside a tape every op is a plain NumPy
evaluation, which is what the inference and benchmark paths use.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from nac import kernels

EXP_CLAMP = 60.0


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

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
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive ops; inputs always precede their consumers."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def gradient(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        grads = self._propagate(loss)
        return [grads.get(id(p), np.zeros_like(p.data)) for p in params]

    def _propagate(self, loss: Tensor) -> dict[int, np.ndarray]:
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return grads


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse sweep over ``tape``; accumulates into ``.grad`` of every reached leaf."""
    grads = tape._propagate(loss)
    produced = {id(n.output) for n in tape.nodes}
    out = {}
    seen = set()
    for node in tape.nodes:
        for inp in node.inputs:
            key = id(inp)
            if key in seen or key in produced or not inp.requires_grad or key not in grads:
                continue
            seen.add(key)
            inp.grad = grads[key] if inp.grad is None else inp.grad + grads[key]
            out[inp] = grads[key]
    return out


@contextlib.contextmanager
def no_grad():
    """Suspend recording on every active tape."""
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


def _make(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    track = bool(_TAPES) and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = track
    out.grad = None
    out.name = None
    if track:
        _TAPES[-1].nodes.append(Node(op, inputs, out, bwd))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op, *arrays):
    try:
        return np.broadcast_shapes(*(a.shape for a in arrays))
    except ValueError as exc:
        raise DimensionError(f"{op}: shapes {[a.shape for a in arrays]} do not broadcast") from exc


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.data, b.data)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a.data, b.data)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    inside = np.abs(a.data) <= EXP_CLAMP
    out = np.exp(np.clip(a.data, -EXP_CLAMP, EXP_CLAMP))
    return _make("exp", out, (a,), lambda g: (g * out * inside,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)  # _make reports the non-finite result
    return _make("log", out, (a,), lambda g: (g / ad,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(np.clip(-x, -EXP_CLAMP, EXP_CLAMP)))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(np.clip(-np.abs(x), -EXP_CLAMP, 0.0)))
    return _make("softplus", out, (a,), lambda g: (g * _sigmoid(x),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg, "exp": exp,
    "log": log, "sigmoid": sigmoid, "softplus": softplus, "tanh": tanh,
}


def elementwise(kind: str, *args) -> Tensor:
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}; expected one of {sorted(_ELEMENTWISE)}")
    return fn(*args)


# ---------------------------------------------------------------- contraction

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise DimensionError(f"matmul batch dims differ: {a.shape} @ {b.shape}") from exc
    ad, bd = a.data, b.data

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make("matmul", ad @ bd, (a, b), bwd)


# ---------------------------------------------------------------- reductions

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", np.asarray(out, dtype=np.float64).reshape(np.shape(out) or (1,)), (a,),
                 bwd if axis is not None else (lambda g: (np.full(shape, g.reshape(-1)[0]),)))


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tsum(a, axis, keepdims), 1.0 / count)


# ---------------------------------------------------------------- shape plumbing

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _make("swapaxes", np.ascontiguousarray(np.swapaxes(a.data, ax1, ax2)), (a,),
                 lambda g: (np.swapaxes(g, ax1, ax2),))


def index(a, key) -> Tensor:
    """Basic (slice/int) indexing."""
    a = as_tensor(a)
    shape = a.shape

    def bwd(g):
        out = np.zeros(shape)
        out[key] = g
        return (out,)

    return _make("index", np.array(a.data[key], dtype=np.float64, ndmin=1), (a,), bwd)


def concat_lastdim(tensors: Sequence) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise DimensionError("concat of zero tensors")
    lead = ts[0].shape[:-1]
    for t in ts[1:]:
        if t.shape[:-1] != lead:
            raise DimensionError(f"concat leading dims differ: {[t.shape for t in ts]}")
    splits = np.cumsum([t.shape[-1] for t in ts])[:-1]
    return _make("concat", np.concatenate([t.data for t in ts], axis=-1), ts,
                 lambda g: tuple(np.split(g, splits, axis=-1)))


def tile(a, k: int) -> Tensor:
    """[..., Q, D] -> [..., Q, k, D] by repeating each row ``k`` times."""
    a = as_tensor(a)
    out = np.ascontiguousarray(np.broadcast_to(a.data[..., None, :], a.shape[:-1] + (k, a.shape[-1])))
    return _make("tile", out, (a,), lambda g: (g.sum(axis=-2),))


def gather_rows(src, idx: np.ndarray) -> Tensor:
    """out[..., q, j, :] = src[..., idx[..., q, j], :].

    Leading dims of ``src`` (all but the last two) must equal those of ``idx``.
    Backward scatters into ``src``; ``idx`` receives no gradient.
    """
    src = as_tensor(src)
    idx = np.asarray(idx, dtype=np.int64)
    if src.ndim < 2 or idx.ndim != src.ndim:
        raise DimensionError(f"gather_rows: src {src.shape} vs idx {idx.shape}")
    if src.shape[:-2] != idx.shape[:-2]:
        raise DimensionError(f"gather_rows batch dims differ: {src.shape} vs {idx.shape}")
    n_rows, d = src.shape[-2], src.shape[-1]
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise IndexError("gather_rows index out of range")
    lead = int(np.prod(src.shape[:-2], dtype=np.int64))
    s2 = src.data.reshape(lead, n_rows, d)
    i2 = idx.reshape(lead, -1)
    rows = np.arange(lead)[:, None]
    out = s2[rows, i2].reshape(idx.shape + (d,))
    shape = src.shape

    def bwd(g):
        gs = np.zeros((lead * n_rows, d))
        flat = (rows * n_rows + i2).reshape(-1)
        np.add.at(gs, flat, g.reshape(-1, d))
        return (gs.reshape(shape),)

    return _make("gather", out, (src,), bwd)


def take_lastdim(a, idx) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape

    def bwd(g):
        out = np.zeros(shape)
        np.add.at(out, (Ellipsis, idx), g)
        return (out,)

    return _make("take", np.ascontiguousarray(a.data[..., idx]), (a,), bwd)


# ---------------------------------------------------------------- attention primitives

def softmax_lastdim(a) -> Tensor:
    a = as_tensor(a)
    if a.shape[-1] < 1:
        raise DimensionError("softmax over an empty last dim")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    return _make("softmax", out, (a,),
                 lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


def log_softmax_lastdim(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    return _make("log_softmax", out, (a,),
                 lambda g: (g - np.exp(out) * g.sum(axis=-1, keepdims=True),))


def topk_lastdim(a, k: int) -> tuple[Tensor, np.ndarray]:
    """Largest ``k`` entries per last-dim slice, descending, ties to the lower index."""
    a = as_tensor(a)
    if int(k) < 1:
        raise ValueError(f"top-k needs k >= 1, got {k}")
    if a.shape[-1] < 1:
        raise DimensionError("top-k over an empty last dim")
    _, idx = kernels.topk_lastdim(a.data, k)
    return take_along_lastdim(a, idx), idx


def take_along_lastdim(a, idx: np.ndarray) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bwd(g):
        lead = int(np.prod(shape[:-1], dtype=np.int64))
        flat = (np.arange(lead)[:, None] * shape[-1] + idx.reshape(lead, -1)).reshape(-1)
        acc = np.zeros(int(np.prod(shape, dtype=np.int64)))
        np.add.at(acc, flat, g.reshape(-1))
        return (acc.reshape(shape),)

    return _make("take_along", np.take_along_axis(a.data, idx, axis=-1), (a,), bwd)


def _broadcast3(*ts):
    return np.broadcast_shapes(*(t.shape for t in ts))


def exact_logits(phi, omega, t) -> Tensor:
    """a_t = (phi/omega)(1 - exp(-omega t)), the a0 = 0 closed-form trajectory."""
    phi, omega, t = as_tensor(phi), as_tensor(omega), as_tensor(t)
    _broadcast3(phi, omega, t)
    pd, wd, td = phi.data, omega.data, t.data

    def bwd(g):
        gp, gw, gt = kernels.exact_logits_grad(pd, wd, td, g)
        return _unbroadcast(gp, pd.shape), _unbroadcast(gw, wd.shape), _unbroadcast(gt, td.shape)

    return _make("exact_logits", kernels.exact_logits(pd, wd, td), (phi, omega, t), bwd)


def euler_logits(phi, omega, t, n_steps: int) -> Tensor:
    """``n_steps`` explicit Euler updates of da/dt = -omega a + phi from a = 0 over [0, t]."""
    if n_steps < 1:
        raise ValueError(f"euler_logits needs n_steps >= 1, got {n_steps}")
    phi, omega, t = as_tensor(phi), as_tensor(omega), as_tensor(t)
    _broadcast3(phi, omega, t)
    pd, wd, td = phi.data, omega.data, t.data

    def bwd(g):
        gp, gw, gt = kernels.euler_logits_grad(pd, wd, td, n_steps, g)
        return _unbroadcast(gp, pd.shape), _unbroadcast(gw, wd.shape), _unbroadcast(gt, td.shape)

    return _make("euler_logits", kernels.euler_logits(pd, wd, td, n_steps), (phi, omega, t), bwd)
