"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations on :class:`Tensor` values are recorded onto the active :class:`Tape`
(entered with ``with Tape():``).  Outside a tape everything is evaluated eagerly
with no bookkeeping, which is what inference code wants.

    >>> with Tape():
    ...     w = Parameter([1.0, 2.0])
    ...     loss = (w * w).sum()
    >>> grad(loss, [w])[w]
    array([2., 4.])
"""
from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

ARCCOS_CLAMP = 1e-7

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "active_tape", default=None
)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverses numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tensor:
    """A float64 array that may participate in a tape."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor({self.data!r}, requires_grad={self.requires_grad})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    # identity semantics so tensors can key gradient maps
    __hash__ = object.__hash__


class Parameter(Tensor):
    """A trainable tensor with a gradient accumulator.

    ``unit_rows`` marks parameters whose rows are re-projected onto the unit
    sphere after every optimizer step (the prototype bank).
    """

    def __init__(self, data, decay: bool = True, unit_rows: bool = False, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.decay = decay
        self.unit_rows = unit_rows
        self.name = name

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name or '?'}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    forward: Callable
    vjp: Callable


@dataclass
class Tape:
    """Ordered record of primitive operations.

    Nodes are appended as they execute, so any node's inputs always precede it.
    """

    nodes: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, output: Tensor, seed=None) -> dict:
        """Vector-Jacobian product of ``output`` against every recorded tensor.

        Returns a dict keyed by tensor identity.  ``seed`` defaults to ones.
        """
        grads: dict[int, np.ndarray] = {}
        seed = np.ones_like(output.data) if seed is None else np.asarray(seed, dtype=np.float64)
        if seed.shape != output.shape:
            raise ValueError(f"seed shape {seed.shape} != output shape {output.shape}")
        grads[id(output)] = seed
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_data = [t.data for t in node.inputs]
            in_grads = node.vjp(g, node.output.data, *in_data)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                gi = _unbroadcast(gi, t.shape)
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        grads.setdefault(id(output), seed)
        return grads

    def replay(self) -> dict:
        """Recompute every node's value from leaf data; returns id -> array."""
        values: dict[int, np.ndarray] = {}
        for node in self.nodes:
            args = [values.get(id(t), t.data) for t in node.inputs]
            values[id(node.output)] = node.forward(*args)
        return values


def _apply(op: str, forward: Callable, vjp: Callable, *inputs) -> Tensor:
    inputs = tuple(as_tensor(t) for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(forward(*[t.data for t in inputs]), dtype=np.float64)
    out.requires_grad = False
    out._tape = None
    tape = _active_tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.nodes.append(Node(op, inputs, out, forward, vjp))
    return out


# ---------------------------------------------------------------- primitives

def add(a, b) -> Tensor:
    return _apply("add", np.add, lambda g, o, x, y: (g, g), a, b)


def sub(a, b) -> Tensor:
    return _apply("sub", np.subtract, lambda g, o, x, y: (g, -g), a, b)


def mul(a, b) -> Tensor:
    return _apply("mul", np.multiply, lambda g, o, x, y: (g * y, g * x), a, b)


def div(a, b) -> Tensor:
    return _apply("div", np.divide, lambda g, o, x, y: (g / y, -g * x / (y * y)), a, b)


def neg(a) -> Tensor:
    return _apply("neg", np.negative, lambda g, o, x: (-g,), a)


def _matmul_vjp(g, o, x, y):
    if x.ndim == 1 and y.ndim == 1:
        return g * y, g * x
    if x.ndim == 1:
        return y @ g, np.outer(x, g)
    if y.ndim == 1:
        return np.outer(g, y), x.T @ g
    return g @ y.T, x.T @ g


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.requires_grad and b.requires_grad:
        return _apply("matmul", np.matmul, _matmul_vjp, a, b)
    # skip the product for the side that needs no gradient (e.g. a data batch)
    if b.requires_grad and a.ndim == 2 and b.ndim == 2:
        return _apply("matmul", np.matmul, lambda g, o, x, y: (None, x.T @ g), a, b)
    if a.requires_grad and a.ndim == 2 and b.ndim == 2:
        return _apply("matmul", np.matmul, lambda g, o, x, y: (g @ y.T, None), a, b)
    return _apply("matmul", np.matmul, _matmul_vjp, a, b)


def exp(a) -> Tensor:
    return _apply("exp", np.exp, lambda g, o, x: (g * o,), a)


def log(a) -> Tensor:
    return _apply("log", np.log, lambda g, o, x: (g / x,), a)


def sqrt(a) -> Tensor:
    return _apply("sqrt", np.sqrt, lambda g, o, x: (g * 0.5 / o,), a)


def square(a) -> Tensor:
    return _apply("square", np.square, lambda g, o, x: (2.0 * g * x,), a)


def tanh(a) -> Tensor:
    return _apply("tanh", np.tanh, lambda g, o, x: (g * (1.0 - o * o),), a)


def _sigmoid(x):
    # split by sign so neither branch overflows
    x = np.asarray(x, dtype=np.float64)
    flat = np.atleast_1d(x)
    out = np.empty_like(flat)
    pos = flat >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-flat[pos]))
    ex = np.exp(flat[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out.reshape(x.shape)


def sigmoid(a) -> Tensor:
    return _apply("sigmoid", _sigmoid,
                  lambda g, o, x: (g * o * (1.0 - o),), a)


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus(a) -> Tensor:
    """log(1 + e^x), stable for large |x|."""
    return _apply("softplus", _softplus,
                  lambda g, o, x: (g * _sigmoid(x),), a)


def cos(a) -> Tensor:
    return _apply("cos", np.cos, lambda g, o, x: (-g * np.sin(x),), a)


def arccos(a) -> Tensor:
    """arccos with the derivative evaluated at a clamped argument.

    The value is exact on [-1, 1]; the derivative uses
    ``clip(x, -1 + 1e-7, 1 - 1e-7)`` to stay finite at the endpoints.
    """
    lim = 1.0 - ARCCOS_CLAMP

    def vjp(g, o, x):
        xc = np.clip(x, -lim, lim)
        return (-g / np.sqrt(1.0 - xc * xc),)

    return _apply("arccos", lambda x: np.arccos(np.clip(x, -1.0, 1.0)), vjp, a)


def minimum(a, bound: float) -> Tensor:
    """Elementwise min against a constant; gradient flows where ``a <= bound``."""
    return _apply("minimum", lambda x: np.minimum(x, bound),
                  lambda g, o, x: (g * (x <= bound),), a)


def maximum(a, bound: float) -> Tensor:
    return _apply("maximum", lambda x: np.maximum(x, bound),
                  lambda g, o, x: (g * (x >= bound),), a)


def clip(a, lo: float, hi: float) -> Tensor:
    return _apply("clip", lambda x: np.clip(x, lo, hi),
                  lambda g, o, x: (g * ((x >= lo) & (x <= hi)),), a)


def _expand(g, x, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, x.shape)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    return _apply("sum", lambda x: np.sum(x, axis=axis, keepdims=keepdims),
                  lambda g, o, x: (_expand(g, x, axis, keepdims),), a)


def mean(a, axis=None, keepdims=False) -> Tensor:
    def vjp(g, o, x):
        n = x.size if axis is None else x.shape[axis]
        return (_expand(g, x, axis, keepdims) / n,)

    return _apply("mean", lambda x: np.mean(x, axis=axis, keepdims=keepdims), vjp, a)


def l2_norm(a, axis=-1, keepdims=True) -> Tensor:
    """Euclidean norm along ``axis``; differentiable away from zero."""
    def vjp(g, o, x):
        oo = o if keepdims else np.expand_dims(o, axis)
        gg = g if keepdims else np.expand_dims(g, axis)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(oo > 0, x / oo, 0.0)
        return (gg * r,)

    return _apply("l2_norm", lambda x: np.sqrt(np.sum(x * x, axis=axis, keepdims=keepdims)),
                  vjp, a)


def logsumexp(a, axis=-1) -> Tensor:
    def fwd(x):
        mx = np.max(x, axis=axis, keepdims=True)
        return np.squeeze(mx, axis) + np.log(np.sum(np.exp(x - mx), axis=axis))

    def vjp(g, o, x):
        p = np.exp(x - np.expand_dims(o, axis))
        return (np.expand_dims(g, axis) * p,)

    return _apply("logsumexp", fwd, vjp, a)


def transpose(a) -> Tensor:
    return _apply("transpose", np.transpose, lambda g, o, x: (np.transpose(g),), a)


def reshape(a, shape) -> Tensor:
    return _apply("reshape", lambda x: np.reshape(x, shape),
                  lambda g, o, x: (np.reshape(g, x.shape),), a)


def take_rows(a, labels) -> Tensor:
    """``a[i, labels[i]]`` for a 2-D tensor."""
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(len(labels))

    def vjp(g, o, x):
        out = np.zeros_like(x)
        out[rows, labels] = g
        return (out,)

    return _apply("take_rows", lambda x: x[rows, labels], vjp, a)


# ---------------------------------------------------------------- derivatives

def grad(output: Tensor, params: Iterable[Tensor]) -> dict:
    """Exact reverse-mode gradients of a 0-d ``output`` w.r.t. ``params``.

    Parameters that do not influence ``output`` get a zero gradient.
    """
    params = list(params)
    if output.ndim != 0:
        raise ValueError(f"grad needs a scalar output, got shape {output.shape}")
    tape = output._tape
    if tape is None:
        return {p: np.zeros_like(p.data) for p in params}
    g = tape.backward(output)
    return {p: g.get(id(p), np.zeros_like(p.data)) for p in params}


def backward(output: Tensor, params: Sequence[Parameter]) -> None:
    """Accumulate gradients of ``output`` into each parameter's ``.grad``."""
    for p, g in grad(output, params).items():
        p.grad = p.grad + g


def batch_jacobian(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    """Per-row Jacobians of a row-wise map ``f: (n, d) -> (n, d_z)``.

    Runs one reverse pass per output component; returns shape ``(n, d_z, d)``.
    ``f`` must not mix rows (true of every network in this package).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D batch, got shape {x.shape}")
    with Tape() as tape:
        xt = Tensor(x, requires_grad=True)
        y = f(xt)
    if y.ndim != 2 or y.shape[0] != x.shape[0]:
        raise ValueError(f"f returned shape {y.shape} for input {x.shape}")
    n, dz = y.shape
    jac = np.zeros((n, dz, x.shape[1]))
    if y._tape is None:
        return jac
    for j in range(dz):
        seed = np.zeros((n, dz))
        seed[:, j] = 1.0
        g = tape.backward(y, seed).get(id(xt))
        if g is not None:
            jac[:, j, :] = g
    return jac


def jacobian(f: Callable[[Tensor], Tensor], x) -> np.ndarray:
    """Jacobian ``(d_z, d)`` of ``f: R^d -> R^{d_z}`` at a single point ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a vector input, got shape {x.shape}")
    with Tape() as tape:
        xt = Tensor(x, requires_grad=True)
        y = f(xt)
    if y.ndim != 1:
        raise ValueError(f"f must return a vector, got shape {y.shape}")
    jac = np.zeros((y.shape[0], x.shape[0]))
    if y._tape is None:
        return jac
    for j in range(y.shape[0]):
        seed = np.zeros(y.shape)
        seed[j] = 1.0
        g = tape.backward(y, seed).get(id(xt))
        if g is not None:
            jac[j] = g
    return jac


def fd_jacobian(f: Callable[[np.ndarray], np.ndarray], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of a plain-array function."""
    if not h > 0:
        raise ValueError("step size h must be positive")
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    cols = []
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = h
        fp = np.asarray(f((flat + e).reshape(x.shape)), dtype=np.float64)
        fm = np.asarray(f((flat - e).reshape(x.shape)), dtype=np.float64)
        cols.append(((fp - fm) / (2.0 * h)).reshape(-1))
    return np.stack(cols, axis=-1)
