"""Dense tensors with tape-based reverse-mode differentiation.

Every primitive appends one node to the active :class:`Tape`.  Nodes are
stored in creation order, which is already a topological order, so the
backward pass is a single reverse sweep without graph sorting.  Tensors
created while no tape is active (or whose inputs are all untracked) are
plain constants and cost nothing on the tape.

    >>> with Tape() as tape:
    ...     x = tape.watch(3.0)
    ...     loss = square(x)
    >>> backward(loss, {"x": x}).grads["x"]
    array(6.)
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "no_grad",
    "GradResult",
    "FiniteDiffReport",
    "ShapeError",
    "constant",
    "forward_op",
    "backward",
    "finite_diff_check",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "square",
    "tsum",
    "mean",
    "scale",
    "index",
    "stack",
    "reshape",
    "lincomb",
]


class ShapeError(ValueError):
    """Operand shapes do not conform to the requested primitive."""


_state = threading.local()


def _active_tape() -> Tape | None:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive operations.

    A node is ``(parent_ids, vjp)``; leaves have ``vjp=None``.  Parent ids
    are ``-1`` for untracked inputs.
    """

    def __init__(self) -> None:
        self.nodes: list[tuple[tuple[int, ...], Callable | None]] = []

    def __enter__(self) -> Tape:
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def watch(self, value) -> Tensor:
        """Register ``value`` as a differentiable leaf on this tape."""
        data = value.data if isinstance(value, Tensor) else _as_array(value)
        t = Tensor._raw(data)
        t._tape = self
        t._node = len(self.nodes)
        self.nodes.append(((), None))
        return t

    def watch_all(self, values: Mapping[str, object]) -> dict[str, Tensor]:
        return {k: self.watch(v) for k, v in values.items()}


class no_grad:
    """Context in which primitives record nothing, even on tracked inputs."""

    def __enter__(self) -> None:
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(None)

    def __exit__(self, *exc) -> None:
        _state.stack.pop()


def _as_array(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor values must be finite")
    return arr


class Tensor:
    """A float64 array, optionally tracked on a tape."""

    __slots__ = ("data", "_tape", "_node")
    __array_priority__ = 1000

    def __init__(self, values) -> None:
        self.data = _as_array(values)
        self._tape = None
        self._node = -1

    @classmethod
    def _raw(cls, data: np.ndarray) -> Tensor:
        t = cls.__new__(cls)
        t.data = data
        t._tape = None
        t._node = -1
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self._tape is not None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def __repr__(self) -> str:
        tag = ", tracked" if self.tracked else ""
        return f"Tensor({self.data!r}{tag})"

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, i: int):
        return index(self, i)


def constant(value) -> Tensor:
    """Untracked tensor; gradients never flow into it."""
    if isinstance(value, Tensor):
        return Tensor._raw(value.data)
    return Tensor(value)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._raw(np.asarray(x, dtype=np.float64))


def _emit(data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor._raw(data)
    stack = getattr(_state, "stack", None)
    tape = stack[-1] if stack else None
    if tape is None:
        return out
    parents = tuple(t._node if t._tape is tape else -1 for t in inputs)
    if all(p < 0 for p in parents):
        return out
    out._tape = tape
    out._node = len(tape.nodes)
    tape.nodes.append((parents, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.reshape(np.sum(g), shape)


def _check_elementwise(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(f"{op}: incompatible shapes {a.data.shape} and {b.data.shape}")


# -- primitives --------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_elementwise("add", a, b)
    sa, sb = a.data.shape, b.data.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_elementwise("sub", a, b)
    sa, sb = a.data.shape, b.data.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_elementwise("mul", a, b)
    ad, bd = a.data, b.data
    return _emit(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_elementwise("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def neg(a) -> Tensor:
    a = _lift(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    """Multiply by a constant scalar ``c``."""
    a = _lift(a)
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim not in (1, 2) or ad.shape[1] != bd.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")
    if bd.ndim == 1:
        vjp = lambda g: (np.outer(g, bd), ad.T @ g)  # noqa: E731
    else:
        vjp = lambda g: (g @ bd.T, ad.T @ g)  # noqa: E731
    return _emit(ad @ bd, (a, b), vjp)


def tanh(a) -> Tensor:
    a = _lift(a)
    out = np.tanh(a.data)
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = _lift(a)
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _lift(a)
    ad = a.data
    return _emit(np.log(ad), (a,), lambda g: (g / ad,))


def square(a) -> Tensor:
    a = _lift(a)
    ad = a.data
    return _emit(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def tsum(a) -> Tensor:
    """Sum of all entries, returned as a scalar tensor."""
    a = _lift(a)
    shape = a.data.shape
    return _emit(np.sum(a.data), (a,), lambda g: (np.full(shape, g),))


def mean(a) -> Tensor:
    a = _lift(a)
    shape, n = a.data.shape, a.data.size
    return _emit(np.sum(a.data) / n, (a,), lambda g: (np.full(shape, g / n),))


def index(a, i: int) -> Tensor:
    """Entry ``i`` of a 1-D tensor as a scalar tensor."""
    a = _lift(a)
    if a.data.ndim != 1:
        raise ShapeError(f"index: expected 1-D tensor, got shape {a.data.shape}")
    shape = a.data.shape

    def vjp(g):
        out = np.zeros(shape)
        out[i] = g
        return (out,)

    return _emit(a.data[i], (a,), vjp)


def stack(items: Sequence) -> Tensor:
    """Stack scalar or equally shaped tensors along a new leading axis."""
    items = [_lift(x) for x in items]
    shapes = {x.data.shape for x in items}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mixed shapes {sorted(shapes)}")
    n = len(items)
    return _emit(
        np.stack([x.data for x in items]),
        items,
        lambda g: tuple(g[k] for k in range(n)),
    )


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _lift(a)
    old = a.data.shape
    try:
        out = np.reshape(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from exc
    return _emit(out, (a,), lambda g: (np.reshape(g, old),))


def lincomb(items: Sequence, coeffs: Sequence[float]) -> Tensor:
    """``sum_k coeffs[k] * items[k]`` with constant coefficients, as one node.

    Used for Runge-Kutta stage combinations, where it replaces a chain of
    scale/add nodes.
    """
    items = [x if isinstance(x, Tensor) else _lift(x) for x in items]
    if len(items) != len(coeffs):
        raise ShapeError("lincomb: items and coeffs differ in length")
    shape = items[0].data.shape
    for x in items[1:]:
        if x.data.shape != shape:
            raise ShapeError(f"lincomb: incompatible shapes {shape} and {x.data.shape}")
    cs = [float(c) for c in coeffs]
    out = (np.asarray(cs) @ np.array([x.data for x in items]).reshape(len(cs), -1)).reshape(shape)
    return _emit(out, items, lambda g: tuple(g * c for c in cs))


_UNARY = {
    "neg": neg,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "square": square,
    "sum": tsum,
    "mean": mean,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div, "matmul": matmul}


def forward_op(op: str, *inputs, **kwargs) -> Tensor:
    """Apply a primitive by name, e.g. ``forward_op("matmul", W, v)``.

    ``scale`` takes the constant as keyword ``c``; ``index`` takes ``i``.
    """
    if op in _UNARY:
        (a,) = inputs
        return _UNARY[op](a)
    if op in _BINARY:
        a, b = inputs
        return _BINARY[op](a, b)
    if op == "scale":
        (a,) = inputs
        return scale(a, kwargs["c"])
    if op == "index":
        (a,) = inputs
        return index(a, kwargs["i"])
    if op == "stack":
        return stack(inputs)
    if op == "reshape":
        (a,) = inputs
        return reshape(a, kwargs["shape"])
    raise ValueError(f"unknown primitive {op!r}")


# -- gradients ---------------------------------------------------------------


@dataclass
class GradResult:
    value: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)


def backward(loss: Tensor, params: Mapping[str, Tensor]) -> GradResult:
    """Reverse sweep over the loss's tape.

    Parameters that the loss does not depend on receive zero gradients.
    The tape itself is not modified, so calling this twice gives
    identical results.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    value = float(loss.data)
    tape = loss._tape
    if tape is None:
        return GradResult(value, {k: np.zeros(p.data.shape) for k, p in params.items()})

    nodes = tape.nodes
    grads: list = [None] * (loss._node + 1)
    grads[loss._node] = np.ones(loss.data.shape)
    for i in range(loss._node, -1, -1):
        g = grads[i]
        if g is None:
            continue
        parents, vjp = nodes[i]
        if vjp is None:
            continue
        for p, gp in zip(parents, vjp(g)):
            if p >= 0:
                prev = grads[p]
                grads[p] = gp if prev is None else prev + gp

    out = {}
    for name, p in params.items():
        g = None
        if p._tape is tape and p._node < len(grads):
            g = grads[p._node]
        out[name] = np.zeros(p.data.shape) if g is None else np.array(g, dtype=np.float64).reshape(p.data.shape)
    return GradResult(value, out)


@dataclass
class FiniteDiffReport:
    passed: bool
    max_rel_error: float
    worst: tuple[str, int] | None
    analytic: dict[str, np.ndarray]
    numeric: dict[str, np.ndarray]


def finite_diff_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    step: float = 1e-6,
    tol: float = 1e-5,
    atol: float = 1e-8,
) -> FiniteDiffReport:
    """Compare :func:`backward` against central differences of ``f``.

    An entry passes when ``|ad - fd| <= atol`` or when the relative error
    ``|ad - fd| / max(|ad|, |fd|)`` is below ``tol``.
    """
    if not step > 0:
        raise ValueError("finite-difference step must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    with Tape() as tape:
        leaves = tape.watch_all(base)
        loss = f(leaves)
    analytic = backward(loss, leaves).grads

    def evaluate(values):
        return float(f({k: constant(v) for k, v in values.items()}).data)

    numeric = {}
    max_rel, worst, passed = 0.0, None, True
    for name, arr in base.items():
        fd = np.zeros(arr.shape)
        flat = fd.reshape(-1)
        for j in range(arr.size):
            plus = dict(base)
            minus = dict(base)
            p, m = arr.copy().reshape(-1), arr.copy().reshape(-1)
            p[j] += step
            m[j] -= step
            plus[name] = p.reshape(arr.shape)
            minus[name] = m.reshape(arr.shape)
            flat[j] = (evaluate(plus) - evaluate(minus)) / (2.0 * step)
        numeric[name] = fd
        ad = analytic[name].reshape(-1)
        for j in range(arr.size):
            diff = abs(ad[j] - flat[j])
            if diff <= atol:
                continue
            rel = diff / max(abs(ad[j]), abs(flat[j]))
            if rel > max_rel:
                max_rel, worst = rel, (name, j)
            if rel >= tol:
                passed = False
    return FiniteDiffReport(passed, max_rel, worst, analytic, numeric)
