"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything learnable in the package (encoder, policies, critics, temperatures)
is a :class:`Tensor` whose ``data`` is a float64 numpy array. Operations are
recorded on the innermost active :class:`Tape` whenever one of their inputs
participates in differentiation; outside a tape they are plain numpy
arithmetic, which keeps rollouts cheap.

Example::

    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = (w * w).sum()
    (dw,) = tape.gradient(loss, [w])
"""

from __future__ import annotations

import contextlib
import hashlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class NumericError(ArithmeticError):
    """Raised when a non-finite value is produced under differentiation."""


_local = threading.local()
_debug = {"check_finite": False}


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    """Check every recorded op output for NaN/Inf while active."""
    previous = _debug["check_finite"]
    _debug["check_finite"] = enabled
    try:
        yield
    finally:
        _debug["check_finite"] = previous


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation.

    ``requires_grad`` marks leaves whose gradients may be requested, and is
    set on every output recorded on a tape.
    """

    __slots__ = ("data", "requires_grad")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def detach(x) -> Tensor:
    """Stop-gradient: same values, no connection to the tape."""
    return Tensor(as_tensor(x).data)


@dataclass
class _Node:
    name: str
    inputs: tuple
    output: Tensor
    vjp: Callable


class Tape:
    """Ordered record of primitive operations for one backward sweep.

    Tapes nest; operations are recorded on the innermost one. A tape belongs
    to the thread that opened it.
    """

    def __init__(self, check_finite: bool | None = None):
        self.nodes: list[_Node] = []
        self.check_finite = check_finite

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def _checking(self) -> bool:
        return _debug["check_finite"] if self.check_finite is None else self.check_finite

    def record(self, name: str, inputs: tuple, output: Tensor, vjp: Callable) -> None:
        if self._checking() and not np.all(np.isfinite(output.data)):
            raise NumericError(f"non-finite value produced by op #{len(self.nodes)} ({name})")
        self.nodes.append(_Node(name, inputs, output, vjp))

    def _first_nonfinite(self) -> int | None:
        for i, node in enumerate(self.nodes):
            if not np.all(np.isfinite(node.output.data)):
                return i
        return None

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``target`` w.r.t. each source (zeros if unused)."""
        if target.data.size != 1:
            raise ShapeError(f"gradient target must be scalar, got shape {target.shape}")
        if not np.isfinite(target.data).all():
            index = self._first_nonfinite()
            message = "non-finite loss"
            if index is not None:
                message += f"; first non-finite value at op #{index} ({self.nodes[index].name})"
            raise NumericError(message)
        adjoints: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        for node in reversed(self.nodes):
            g = adjoints.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + gi
                else:
                    adjoints[key] = gi
        out = []
        for src in sources:
            g = adjoints.get(id(src))
            out.append(np.zeros_like(src.data) if g is None else np.array(g, dtype=np.float64))
        return out


def _record(name: str, value: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    out = Tensor(value)
    stack = getattr(_local, "stack", None)
    if stack and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        stack[-1].record(name, inputs, out, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --- elementwise binary -----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    value = a.data / b.data

    def vjp(g):
        gb = -g * value / b.data
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(gb, b.shape)

    return _record("div", value, (a, b), vjp)


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    return _record("minimum", np.where(pick_a, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data
    return _record("maximum", np.where(pick_a, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


# --- elementwise unary ------------------------------------------------------

def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _record("power", a.data ** exponent, (a,),
                   lambda g: (g * exponent * a.data ** (exponent - 1),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _record("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    value = np.exp(a.data)
    return _record("exp", value, (a,), lambda g: (g * value,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    value = np.sqrt(a.data)
    return _record("sqrt", value, (a,), lambda g: (0.5 * g / value,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    value = np.tanh(a.data)
    return _record("tanh", value, (a,), lambda g: (g * (1.0 - value * value),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record("relu", a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    value = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record("sigmoid", value, (a,), lambda g: (g * value * (1.0 - value),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    slope = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record("softplus", np.logaddexp(0.0, a.data), (a,), lambda g: (g * slope,))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return _record("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is zero wherever the clamp is active."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _record("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# --- reductions and structure -----------------------------------------------

def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return _record("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,),
                   lambda g: (_expand_reduced(g, a.shape, axis, keepdims),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return _record("mean", np.mean(a.data, axis=axis, keepdims=keepdims), (a,),
                   lambda g: (_expand_reduced(g / count, a.shape, axis, keepdims),))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (value * (g - (g * value).sum(axis=axis, keepdims=True)),)

    return _record("softmax", value, (a,), vjp)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul extent mismatch: left has {a.shape[-1]} columns,"
                         f" right has {b.shape[-2]} rows")

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _record("matmul", a.data @ b.data, (a, b), vjp)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _record("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def reshape(a, shape: tuple) -> Tensor:
    a = as_tensor(a)
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a, axis1: int, axis2: int) -> Tensor:
    a = as_tensor(a)
    return _record("swapaxes", np.swapaxes(a.data, axis1, axis2), (a,),
                   lambda g: (np.swapaxes(g, axis1, axis2),))


def broadcast_to(a, shape: tuple) -> Tensor:
    a = as_tensor(a)
    return _record("broadcast_to", np.broadcast_to(a.data, shape), (a,),
                   lambda g: (_unbroadcast(g, a.shape),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _record("getitem", a.data[index], (a,), vjp)


# --- networks ---------------------------------------------------------------

_ACTIVATIONS = {"tanh": tanh, "relu": relu, "sigmoid": sigmoid, "softplus": softplus,
                "identity": None}


@dataclass
class MlpParams:
    """Weights ``(in, out)`` and biases ``(out,)`` per layer plus activation names."""

    weights: list[Tensor]
    biases: list[Tensor]
    activations: list[str]

    def __post_init__(self):
        for w_in, w_out in zip(self.weights, self.weights[1:]):
            if w_in.shape[1] != w_out.shape[0]:
                raise ShapeError(f"layer output {w_in.shape[1]} does not feed next input {w_out.shape[0]}")
        for name in self.activations:
            if name not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {name!r}")

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def tensors(self) -> list[Tensor]:
        return [t for pair in zip(self.weights, self.biases) for t in pair]

    def frozen(self) -> "MlpParams":
        """View sharing the same arrays but invisible to differentiation."""
        return MlpParams([Tensor(w.data) for w in self.weights],
                         [Tensor(b.data) for b in self.biases], list(self.activations))

    def clone(self) -> "MlpParams":
        return MlpParams([Tensor(w.data.copy(), True) for w in self.weights],
                         [Tensor(b.data.copy(), True) for b in self.biases], list(self.activations))


def param_count(sizes: Sequence[int]) -> int:
    return sum((n_in + 1) * n_out for n_in, n_out in zip(sizes, sizes[1:]))


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, hidden_activation: str = "tanh",
             output_activation: str = "identity", output_scale: float | None = None) -> MlpParams:
    """Uniform(+-1/sqrt(fan_in)) initialisation; ``output_scale`` shrinks the last layer."""
    weights, biases = [], []
    for i, (n_in, n_out) in enumerate(zip(sizes, sizes[1:])):
        bound = 1.0 / np.sqrt(n_in)
        if output_scale is not None and i == len(sizes) - 2:
            bound = output_scale
        weights.append(Tensor(rng.uniform(-bound, bound, size=(n_in, n_out)), True))
        biases.append(Tensor(rng.uniform(-bound, bound, size=n_out), True))
    activations = [hidden_activation] * (len(sizes) - 2) + [output_activation]
    return MlpParams(weights, biases, activations)


def mlp_forward(params: MlpParams, x) -> Tensor:
    x = as_tensor(x)
    n_in = params.weights[0].shape[0]
    if x.ndim == 0 or x.shape[-1] != n_in:
        raise ShapeError(f"input last extent {x.shape[-1] if x.ndim else None}"
                         f" does not match first layer input dimension {n_in}")
    vector = x.ndim == 1
    h = reshape(x, (1, n_in)) if vector else x
    for w, b, act in zip(params.weights, params.biases, params.activations):
        h = matmul(h, w) + b
        fn = _ACTIVATIONS[act]
        if fn is not None:
            h = fn(h)
    return reshape(h, (h.shape[-1],)) if vector else h


def _tensor_list(params) -> list[Tensor]:
    if isinstance(params, Tensor):
        return [params]
    if hasattr(params, "tensors"):
        return list(params.tensors())
    out = []
    for p in params:
        out.extend(_tensor_list(p))
    return out


def grad(loss_builder: Callable[[], Tensor], params) -> list[np.ndarray]:
    """Gradients of ``loss_builder()`` w.r.t. every tensor in ``params``.

    ``params`` may be a Tensor, anything with ``tensors()``, or a nested
    sequence of those. Gradients come back flat, in ``tensors()`` order.
    """
    return value_and_grad(loss_builder, params)[1]


def value_and_grad(loss_builder: Callable[[], Tensor], params) -> tuple[float, list[np.ndarray]]:
    tensors = _tensor_list(params)
    with Tape() as tape:
        loss = as_tensor(loss_builder())
    grads = tape.gradient(loss, tensors)
    return loss.item(), grads


def checksum(params) -> str:
    """SHA-256 over the raw bytes of every parameter array."""
    h = hashlib.sha256()
    for t in _tensor_list(params):
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


# --- optimisation -----------------------------------------------------------

@dataclass
class AdamState:
    """Adaptive-moment optimiser state; ``method='sgd'`` gives plain descent."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    method: str = "adam"
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **kwargs) -> "AdamState":
        tensors = _tensor_list(params)
        return cls(m=[np.zeros_like(t.data) for t in tensors],
                   v=[np.zeros_like(t.data) for t in tensors], **kwargs)


def adam_step(state: AdamState, params, grads: Sequence[np.ndarray]):
    """Apply one update in place; returns ``params`` for chaining."""
    tensors = _tensor_list(params)
    if len(tensors) != len(grads) or len(tensors) != len(state.m):
        raise ShapeError(f"{len(tensors)} parameters, {len(grads)} gradients,"
                         f" {len(state.m)} moment slots")
    for t, g in zip(tensors, grads):
        if t.shape != np.shape(g):
            raise ShapeError(f"gradient shape {np.shape(g)} does not match parameter shape {t.shape}")
    state.step += 1
    if state.method == "sgd":
        for t, g in zip(tensors, grads):
            t.data -= state.lr * g
        return params
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for t, g, m, v in zip(tensors, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        t.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def gaussian_sample_reparam(mean, log_std, noise, clamp: tuple[float, float] = (LOG_STD_MIN, LOG_STD_MAX)) -> Tensor:
    """``mean + exp(log_std) * noise`` with ``log_std`` clamped first."""
    mean, log_std = as_tensor(mean), as_tensor(log_std)
    noise = np.asarray(noise, dtype=np.float64)
    if mean.shape != log_std.shape or mean.shape != noise.shape:
        raise ShapeError(f"mean {mean.shape}, log_std {log_std.shape} and noise {noise.shape} must match")
    return mean + exp(clip(log_std, *clamp)) * noise


def tensor_list(params) -> list[Tensor]:
    """Flatten a Tensor, a params object, or a nested sequence of them."""
    return _tensor_list(params)
