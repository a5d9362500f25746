"""Minimal tape-based reverse-mode differentiation over float64 numpy arrays.

Usage::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = mean(linear_forward(x, w, b))
    backward(tape, loss)
    w.grad  # same shape as w.data

Tensors are value-like: no operation mutates ``data`` in place, and
``sgd_step`` rebinds parameter arrays instead of writing into them, so the
values saved on a tape stay valid after the parameters move on.
"""

from __future__ import annotations

import itertools
import threading
from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "UsageError",
    "NumericError",
    "ConfigurationError",
    "DataError",
    "Tensor",
    "Tape",
    "ParamSet",
    "as_tensor",
    "linear_forward",
    "matmul",
    "transpose",
    "activation",
    "relu",
    "tanh",
    "sigmoid",
    "exp",
    "add",
    "sub",
    "mul",
    "neg",
    "sum_all",
    "mean",
    "sum_axis",
    "square",
    "squared_norm",
    "row_squared_norms",
    "concat",
    "take_rows",
    "take_cols",
    "softmax",
    "softmax_cross_entropy",
    "bce_with_logits",
    "backward",
    "clip_grad_norm",
    "sgd_step",
    "zero_grad",
    "finite_difference_gradcheck",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class UsageError(RuntimeError):
    """An API was called in a state it does not support."""


class NumericError(ArithmeticError):
    """A NaN or infinity appeared where a finite value is required."""


class ConfigurationError(ValueError):
    """An unsupported option or mode was requested."""


class DataError(ValueError):
    """Input data violates a documented precondition."""


_ids = itertools.count()
_state = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_state, "tape", None)


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "tape_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; each delegates to a recorded op
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("kind", "inputs", "output", "backward_fn")

    def __init__(self, kind, inputs, output, backward_fn):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of operations, in execution (topological) order.

    Entering the tape as a context manager makes it the recording target for
    the current thread; the previously active tape (if any) is restored on
    exit.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._previous = None

    def __enter__(self) -> "Tape":
        self._previous = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._previous
        self._previous = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, kind, inputs, output, backward_fn) -> None:
        output.tape_id = next(_ids)
        self.nodes.append(_Node(kind, inputs, output, backward_fn))


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t.tape_id is not None


def _fresh(data: np.ndarray) -> Tensor:
    # op outputs are new arrays owned by nobody else, so skip the defensive copy
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad, out.requires_grad, out.tape_id, out.name = None, False, None, None
    return out


def _emit(kind: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    out = _fresh(out_data)
    tape = _active_tape()
    if tape is not None and any(_tracked(t) for t in inputs):
        tape.record(kind, tuple(inputs), out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, kind: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", (a, b), a.data + b.data, back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", (a, b), a.data - b.data, back)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    av, bv = a.data, b.data

    def back(g):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)

    return _emit("mul", (a, b), av * bv, back)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def square(a) -> Tensor:
    a = as_tensor(a)
    av = a.data
    return _emit("square", (a,), av * av, lambda g: (2.0 * av * g,))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _emit("sum", (a,), np.asarray(a.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.size
    if n == 0:
        raise ShapeError("mean of an empty tensor")
    return _emit("mean", (a,), np.asarray(a.data.mean()), lambda g: (np.full(shape, g / n),))


def sum_axis(a, axis: int, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum_axis", (a,), a.data.sum(axis=axis, keepdims=keepdims), back)


def squared_norm(a) -> Tensor:
    a = as_tensor(a)
    av = a.data
    return _emit("squared_norm", (a,), np.asarray(np.sum(av * av)), lambda g: (2.0 * g * av,))


def row_squared_norms(a) -> Tensor:
    """Per-row squared Euclidean norm as a column vector [n, 1]."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"row_squared_norms expects a matrix, got shape {a.shape}")
    av = a.data
    return _emit("row_squared_norms", (a,), np.sum(av * av, axis=1, keepdims=True), lambda g: (2.0 * g * av,))


# ---------------------------------------------------------------------------
# linear algebra and structure
# ---------------------------------------------------------------------------


def _require_matrix(t: Tensor, what: str) -> None:
    if t.data.ndim != 2:
        raise ShapeError(f"{what} must be a matrix, got shape {t.shape}")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _require_matrix(a, "matmul lhs")
    _require_matrix(b, "matmul rhs")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    av, bv = a.data, b.data
    return _emit("matmul", (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    _require_matrix(a, "transpose operand")
    return _emit("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


def linear_forward(x, W, b) -> Tensor:
    """Affine map ``x @ W + b`` for x [batch, in], W [in, out], b [out]."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ShapeError(f"linear_forward: x {x.shape} is incompatible with W {W.shape}")
    if b.shape != (W.shape[1],):
        raise ShapeError(f"linear_forward: bias {b.shape} does not match W {W.shape}")
    xv, Wv = x.data, W.data

    def back(g):
        return g @ Wv.T, xv.T @ g, g.sum(axis=0)

    return _emit("linear", (x, W, b), xv @ Wv + b.data, back)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concat of nothing")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as err:
        raise ShapeError(f"concat: {[p.shape for p in parts]} along axis {axis}: {err}") from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", parts, out, back)


def take_rows(a, index) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _emit("take_rows", (a,), a.data[idx], back)


def take_cols(a, index) -> Tensor:
    a = as_tensor(a)
    _require_matrix(a, "take_cols operand")
    idx = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, (slice(None), idx), g)
        return (full,)

    return _emit("take_cols", (a,), a.data[:, idx], back)


# ---------------------------------------------------------------------------
# nonlinearities and losses
# ---------------------------------------------------------------------------


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _stable_sigmoid(a.data)
    return _emit("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


_ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}


def activation(x, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigurationError(
            f"unsupported activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}"
        ) from None
    return fn(x)


def _softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax(logits) -> Tensor:
    """Row-wise softmax of a [batch, C] matrix."""
    z = as_tensor(logits)
    _require_matrix(z, "softmax input")
    p = _softmax_np(z.data)

    def back(g):
        return (p * (g - np.sum(g * p, axis=1, keepdims=True)),)

    return _emit("softmax", (z,), p, back)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under row-wise softmax."""
    z = as_tensor(logits)
    _require_matrix(z, "logits")
    y = np.asarray(labels)
    n, C = z.shape
    if n < 1:
        raise ShapeError("softmax_cross_entropy needs at least one row")
    if y.shape != (n,):
        raise ShapeError(f"labels shape {y.shape} does not match logits {z.shape}")
    bad = np.flatnonzero((y < 0) | (y >= C))
    if bad.size:
        raise DataError(f"label {y[bad[0]]} at row {bad[0]} is outside [0, {C})")
    y = y.astype(np.intp)
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    nll = logsumexp - shifted[np.arange(n), y]
    p = _softmax_np(z.data)

    def back(g):
        d = p.copy()
        d[np.arange(n), y] -= 1.0
        return (d * (g / n),)

    return _emit("softmax_ce", (z,), np.asarray(nll.mean()), back)


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 targets."""
    z = as_tensor(logits)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != z.shape:
        raise ShapeError(f"targets shape {t.shape} does not match logits {z.shape}")
    if z.size == 0:
        raise ShapeError("bce_with_logits of an empty batch")
    zv = z.data
    # log(1 + e^z) - t*z, evaluated without overflow
    loss = np.maximum(zv, 0.0) - zv * t + np.log1p(np.exp(-np.abs(zv)))
    n = z.size
    s = _stable_sigmoid(zv)
    return _emit("bce_logits", (z,), np.asarray(loss.mean()), lambda g: ((s - t) * (g / n),))


# ---------------------------------------------------------------------------
# backward pass and parameter updates
# ---------------------------------------------------------------------------


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf with requires_grad."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.tape_id is None:
        # constant w.r.t. everything recorded: leaves below get zero gradients
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
    elif not any(node.output is loss for node in reversed(tape.nodes)):
        raise UsageError("loss was not recorded on this tape")
    else:
        grads[id(loss)] = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if not _tracked(inp):
                continue
            if inp.tape_id is None:
                # leaf parameter: accumulate straight into its slot
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                continue
            key = id(inp)
            grads[key] = grads[key] + gi if key in grads else gi
    for node in tape.nodes:
        for inp in node.inputs:
            if inp.requires_grad and inp.tape_id is None and inp.grad is None:
                inp.grad = np.zeros_like(inp.data)


class ParamSet(OrderedDict):
    """Ordered mapping of parameter name to trainable Tensor."""

    def tensors(self) -> list[Tensor]:
        return list(self.values())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.values()]) if self else np.zeros(0)


def _iter_params(params) -> Iterable[tuple[str, Tensor]]:
    if isinstance(params, dict):
        return params.items()
    return ((t.name or f"param{i}", t) for i, t in enumerate(params))


def zero_grad(params) -> None:
    for _, p in _iter_params(params):
        p.grad = None


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients so their global 2-norm is at most ``max_norm``; return the pre-clip norm."""
    items = [p for _, p in _iter_params(params) if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in items)))
    if total > max_norm:
        scale = max_norm / total
        for p in items:
            p.grad = p.grad * scale
    return total


def sgd_step(params, learning_rate: float, clip_norm: float | None = None,
             weight_decay: float = 0.0) -> None:
    """In-place plain SGD on a ParamSet (parameter arrays are rebound, not mutated)."""
    if learning_rate < 0:
        raise UsageError(f"learning rate must be non-negative, got {learning_rate}")
    items = list(_iter_params(params))
    for name, p in items:
        if p.grad is None:
            raise UsageError(f"parameter {name!r} has no gradient")
    if clip_norm is not None:
        clip_grad_norm(params, clip_norm)
    for _, p in items:
        g = p.grad
        if weight_decay:
            g = g + weight_decay * p.data
        p.data = p.data - learning_rate * g
        p.grad = None


def finite_difference_gradcheck(params, loss_fn: Callable[[], Tensor], h: float = 1e-6,
                                relative_step: bool = True,
                                analytic: dict[str, np.ndarray] | None = None,
                                floor: float = 1e-8) -> float:
    """Largest relative error between backward gradients and central differences.

    ``loss_fn`` builds the loss from the current parameter values; it is run once
    under a tape for the analytic gradient and twice per coordinate without one.
    ``analytic`` overrides the backward gradients (used to test the checker itself).
    The step for coordinate p is ``h * max(1, |p|)`` when ``relative_step``.
    The error is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps components
    that are zero up to rounding (about 1e-10 at h = 1e-6) from dominating.
    """
    items = list(_iter_params(params))
    if analytic is None:
        zero_grad(params)
        with Tape() as tape:
            loss = loss_fn()
        if not np.isfinite(loss.data).all():
            raise NumericError("loss is not finite at the base point")
        backward(tape, loss)
        analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy()
                    for name, p in items}
        zero_grad(params)

    worst = 0.0
    for name, p in items:
        base = p.data
        grad = analytic[name].reshape(-1)
        for i in range(base.size):
            flat = base.reshape(-1)
            step = h * max(1.0, abs(flat[i])) if relative_step else h
            plus = flat.copy()
            plus[i] += step
            minus = flat.copy()
            minus[i] -= step
            p.data = plus.reshape(base.shape)
            lp = loss_fn().item()
            p.data = minus.reshape(base.shape)
            lm = loss_fn().item()
            p.data = base
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericError(f"loss is not finite when perturbing {name}[{i}]")
            numeric = (lp - lm) / (2.0 * step)
            a = grad[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst
