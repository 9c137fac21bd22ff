"""
Small reverse-mode differentiation core on top of numpy.

Tensors hold float64 arrays of rank <= 3. While a ComputeTape is active,
every primitive that touches a tensor with requires_grad is recorded, and
ComputeTape.backward replays the records in reverse to fill .grad buffers.
Outside a tape the same functions just compute values.
"""
import threading
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field

import numpy as np

from attlist.errors import (
    ConfigurationError,
    DegenerateInputError,
    DeterminismError,
    DimensionError,
    UninitializedGradientError,
)

MAX_RANK = 3

# clamp used by the cross-entropy so log() never sees 0 or 1
BCE_EPS = 1e-12

_SIGMOID_HI = np.nextafter(1.0, 0.0)
_SIGMOID_LO = np.finfo(np.float64).tiny


class Tensor:
    """A float64 array with an optional gradient buffer of the same shape."""

    __slots__ = ("values", "grad", "requires_grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        if self.values.ndim > MAX_RANK:
            raise DimensionError("tensor", self.values.shape)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def accumulate(self, grad: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += grad

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape}>"


@dataclass
class TapeRecord:
    op: str
    inputs: tuple
    result: Tensor
    backward: Callable[[np.ndarray], None]


_local = threading.local()


def _active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class ComputeTape:
    """
    Ordered record of the primitives executed while the tape is active.
    Use as a context manager; tapes nest per thread.
    """

    def __init__(self):
        self.records: list[TapeRecord] = []

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def record(self, op: str, inputs: tuple, result: Tensor, backward):
        self.records.append(TapeRecord(op, inputs, result, backward))

    def backward(self, loss: Tensor):
        """Seed d(loss)/d(loss) = 1 and walk the records in reverse."""
        if loss.values.size != 1:
            raise DimensionError("backward", loss.shape)
        loss.grad = np.ones_like(loss.values)
        for rec in reversed(self.records):
            if rec.result.grad is not None:
                rec.backward(rec.result.grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, values: np.ndarray, inputs: tuple, backward) -> Tensor:
    """Create the result tensor and record it when anything upstream needs a gradient."""
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=needs_grad)
    tape = _active_tape()
    if needs_grad and tape is not None:
        tape.record(op, inputs, out, backward)
    return out


def _send(t: Tensor, grad: np.ndarray):
    if t.requires_grad:
        t.accumulate(grad)


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes.
    a may be (m, k) or (B, m, k); b is (k, n) or, when a is batched, (B, k, n).
    """
    a, b = _wrap(a), _wrap(b)
    av, bv = a.values, b.values
    ok = (
        av.ndim in (2, 3)
        and bv.ndim in (2, 3)
        and av.shape[-1] == bv.shape[-2]
        and (bv.ndim == 2 or (av.ndim == 3 and av.shape[0] == bv.shape[0]))
    )
    if not ok:
        raise DimensionError("matmul", av.shape, bv.shape)

    def backward(g):
        _send(a, g @ _swap(bv))
        if b.requires_grad:
            if bv.ndim == 2 and av.ndim == 3:
                k, n = bv.shape
                b.accumulate(av.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                b.accumulate(_swap(av) @ g)

    return _emit("matmul", av @ bv, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    a = _wrap(a)
    if a.values.ndim < 2:
        raise DimensionError("transpose", a.shape)
    return _emit("transpose", _swap(a.values), (a,), lambda g: _send(a, _swap(g)))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    a = _wrap(a)
    try:
        values = a.values.reshape(shape)
    except ValueError:
        raise DimensionError("reshape", a.shape, shape) from None
    if values.ndim > MAX_RANK:
        raise DimensionError("reshape", a.shape, shape)
    return _emit("reshape", values, (a,), lambda g: _send(a, g.reshape(a.shape)))


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    try:
        values = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError("concat", *[t.shape for t in tensors]) from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, sizes, axis=axis)):
            _send(t, part)

    return _emit("concat", values, tuple(tensors), backward)


def gather(table: Tensor, ids) -> Tensor:
    """Embedding lookup: rows of a 2-D table picked by an integer array of any shape."""
    table = _wrap(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.values.ndim != 2:
        raise DimensionError("gather", table.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = int(ids.max() if ids.max() >= table.shape[0] else ids.min())
        raise IndexError(f"row {bad} out of range for table with {table.shape[0]} rows")

    def backward(g):
        if table.requires_grad:
            grad = np.zeros_like(table.values)
            np.add.at(grad, ids.reshape(-1), g.reshape(-1, table.shape[1]))
            table.accumulate(grad)

    return _emit("gather", table.values[ids], (table,), backward)


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    """Sum over every element (axis=None) or over the last axis (axis=-1)."""
    a = _wrap(a)
    if axis is None:
        values = np.asarray(a.values.sum())

        def backward(g):
            _send(a, np.broadcast_to(g, a.shape).copy())
    elif axis == -1:
        values = a.values.sum(axis=-1)

        def backward(g):
            _send(a, np.broadcast_to(g[..., None], a.shape).copy())
    else:
        raise DimensionError("reduce_sum", a.shape)
    return _emit("reduce_sum", values, (a,), backward)


# ---------------------------------------------------------------- normalization

def row_softmax(x: Tensor, mask=None) -> Tensor:
    """
    Softmax over the last axis. Masked positions come out exactly 0 and the
    live positions of every row sum to 1. Rows are shifted by their max first.
    """
    x = _wrap(x)
    xv = x.values
    if xv.ndim == 0:
        raise DimensionError("row_softmax", xv.shape)
    if mask is None:
        live = np.ones(xv.shape, dtype=bool)
    else:
        try:
            live = np.broadcast_to(np.asarray(mask, dtype=bool), xv.shape)
        except ValueError:
            raise DimensionError("row_softmax", xv.shape, np.shape(mask)) from None
    if not live.any(axis=-1).all():
        raise DegenerateInputError("row_softmax: a row has every position masked")

    shifted = np.where(live, xv, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.where(live, np.exp(shifted), 0.0)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _send(x, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _emit("row_softmax", s, (x,), backward)


# ---------------------------------------------------------------- pointwise

def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise DimensionError(op, a.shape, b.shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _same_shape("add", a, b)

    def backward(g):
        _send(a, g)
        _send(b, g)

    return _emit("add", a.values + b.values, (a, b), backward)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _same_shape("multiply", a, b)
    av, bv = a.values, b.values

    def backward(g):
        _send(a, g * bv)
        _send(b, g * av)

    return _emit("multiply", av * bv, (a, b), backward)


def scale(a: Tensor, factor: float) -> Tensor:
    a = _wrap(a)
    return _emit("scale", a.values * factor, (a,), lambda g: _send(a, g * factor))


def add_bias(a: Tensor, bias: Tensor) -> Tensor:
    """Add a vector along the last axis of every row."""
    a, bias = _wrap(a), _wrap(bias)
    if bias.values.ndim != 1 or a.values.ndim == 0 or a.shape[-1] != bias.shape[0]:
        raise DimensionError("add_bias", a.shape, bias.shape)

    def backward(g):
        _send(a, g)
        _send(bias, g.reshape(-1, bias.shape[0]).sum(axis=0))

    return _emit("add_bias", a.values + bias.values, (a, bias), backward)


def tanh(a: Tensor) -> Tensor:
    a = _wrap(a)
    t = np.tanh(a.values)
    return _emit("tanh", t, (a,), lambda g: _send(a, g * (1.0 - t * t)))


def relu(a: Tensor) -> Tensor:
    a = _wrap(a)
    live = a.values > 0
    return _emit("relu", np.where(live, a.values, 0.0), (a,), lambda g: _send(a, g * live))


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return np.clip(s, _SIGMOID_LO, _SIGMOID_HI)


def sigmoid(a: Tensor) -> Tensor:
    """Logistic function, kept strictly inside (0, 1)."""
    a = _wrap(a)
    s = _sigmoid_values(a.values)
    return _emit("sigmoid", s, (a,), lambda g: _send(a, g * s * (1.0 - s)))


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(x)) without overflow for large |x|."""
    a = _wrap(a)
    values = -np.logaddexp(0.0, -a.values)
    return _emit(
        "log_sigmoid", values, (a,), lambda g: _send(a, g * _sigmoid_values(-a.values))
    )


POINTWISE = {
    "add": add,
    "multiply": multiply,
    "tanh": tanh,
    "relu": relu,
    "sigmoid": sigmoid,
    "scale": scale,
}


def pointwise(kind: str, *operands, **kwargs) -> Tensor:
    """Dispatch by name, e.g. pointwise("scale", x, factor=0.5)."""
    try:
        fn = POINTWISE[kind]
    except KeyError:
        raise ConfigurationError(f"unknown pointwise kind '{kind}'", field="kind") from None
    return fn(*operands, **kwargs)


# ---------------------------------------------------------------- losses

def binary_cross_entropy(pred: Tensor, labels) -> Tensor:
    """Summed BCE against fixed 0/1 labels; predictions clamped to [eps, 1 - eps]."""
    pred = _wrap(pred)
    r = np.asarray(labels, dtype=np.float64)
    if r.shape != pred.shape:
        raise DimensionError("binary_cross_entropy", pred.shape, r.shape)
    p = np.clip(pred.values, BCE_EPS, 1.0 - BCE_EPS)
    inside = (pred.values >= BCE_EPS) & (pred.values <= 1.0 - BCE_EPS)
    values = np.asarray(-(r * np.log(p) + (1.0 - r) * np.log(1.0 - p)).sum())

    def backward(g):
        _send(pred, g * inside * (-(r / p) + (1.0 - r) / (1.0 - p)))

    return _emit("binary_cross_entropy", values, (pred,), backward)


# ---------------------------------------------------------------- randomness

def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """
    Counter-based generator keyed by (seed, stream...).
    The same key always yields the same draws, whatever ran before.
    """
    key = np.random.SeedSequence([int(seed), *[int(s) for s in stream]])
    return np.random.Generator(np.random.Philox(key))


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None):
    """
    Inverted dropout: zero each element with probability `rate` and scale the
    survivors by 1 / (1 - rate). Identity at inference.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}", field="gamma")
    x = _wrap(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigurationError("training-mode dropout needs a generator", field="rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _emit("dropout", x.values * keep, (x,), lambda g: _send(x, g * keep))


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    """Moment accumulators per parameter name plus the step counter."""
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], state: AdamState) -> AdamState:
    """
    One bias-corrected Adam update, in place. Every parameter must carry a
    gradient; gradients are cleared afterwards.
    """
    for name, p in params.items():
        if p.grad is None:
            raise UninitializedGradientError(name)

    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step

    for name, p in params.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.values)
            state.v[name] = np.zeros_like(p.values)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.values -= (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.epsilon)
        p.grad = None
    return state


# ---------------------------------------------------------------- gradient checking

@dataclass
class GradientReport:
    errors: dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def gradient_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradientReport:
    """
    Compare tape gradients with central finite differences, element by element.
    Error is |analytic - numeric| / max(1, |analytic|, |numeric|), worst per parameter.
    """
    for p in params.values():
        p.zero_grad()
    with ComputeTape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.values))
        for name, p in params.items()
    }
    for p in params.values():
        p.zero_grad()

    # the loss has to be a pure function of the parameters
    first, second = loss_fn().item(), loss_fn().item()
    if first != second or first != loss.item():
        raise DeterminismError(f"loss evaluated to {first} and then {second}")

    errors = {}
    for name, p in params.items():
        worst = 0.0
        flat = p.values.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_fn().item()
            flat[i] = orig - step
            lo = loss_fn().item()
            flat[i] = orig
            gn = (hi - lo) / (2.0 * step)
            worst = max(worst, abs(ga[i] - gn) / max(1.0, abs(ga[i]), abs(gn)))
        errors[name] = worst
    return GradientReport(errors=errors, tolerance=tolerance)
