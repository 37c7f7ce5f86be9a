"""
Numerics - dense tensors with tape-based reverse-mode differentiation

This module is the substrate every model module builds on. A ``Tensor`` wraps a
row-major numpy array; operations executed while a ``Tape`` is recording are
appended to it together with a closure that maps the output gradient to input
gradients. ``Tape.backward`` replays the records in reverse order, which is a
valid topological order because records are appended in execution order.

Two float widths are supported: 64-bit for gradient checks and oracle tests,
32-bit for training throughput. The active width is process-wide and selected
with ``float_width``.
"""

import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf, expit
from scipy.special import logsumexp as _logsumexp

from .exceptions import (
    ConfigError,
    MissingGradientError,
    NumericalError,
    ShapeError,
)

logger = logging.getLogger(__name__)

FLOAT_WIDTHS = {32: np.float32, 64: np.float64}

# Slices with a smaller norm are returned unchanged by l2_normalize.
NORM_FLOOR = 1e-12

# grad_check never samples fewer coordinates than this.
MIN_SAMPLED_COORDS = 200

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_default_dtype = np.float64
_active_tapes: List["Tape"] = []


def get_default_dtype():
    return _default_dtype


def set_default_dtype(width: int) -> None:
    """Select the float width (32 or 64) used for newly created tensors."""
    global _default_dtype
    if width not in FLOAT_WIDTHS:
        raise ConfigError(f"float width must be 32 or 64, got {width}")
    _default_dtype = FLOAT_WIDTHS[width]


@contextmanager
def float_width(width: int) -> Iterator[None]:
    """Temporarily switch the default float width."""
    previous = _default_dtype
    set_default_dtype(width)
    try:
        yield
    finally:
        _set_dtype(previous)


def _set_dtype(dtype) -> None:
    global _default_dtype
    _default_dtype = dtype


class Tensor:
    """
    A shaped float array with an optional gradient slot.

    ``grad`` is allocated lazily by the first backward pass that reaches the
    tensor and always has the same shape as ``data``.
    """

    __slots__ = ('data', 'requires_grad', 'grad')

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _default_dtype
        array = np.asarray(data, dtype=dtype)
        if not array.flags.c_contiguous:
            array = np.ascontiguousarray(array)
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype).reshape(self.data.shape)
        else:
            self.grad = self.grad + grad

    # Operator sugar; every method routes through a primitive below.
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class ParamTensor(Tensor):
    """A learnable tensor addressed by a unique slash-separated name."""

    __slots__ = ('name',)

    def __init__(self, name: str, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self):
        return f"ParamTensor({self.name!r}, shape={self.shape}, dtype={self.dtype})"


TensorLike = Union[Tensor, np.ndarray, float, int]


class Tape:
    """
    Ordered record of primitive operations executed while recording.

    Usage::

        with Tape() as tape:
            loss = model_loss(...)
        tape.backward(loss)
    """

    def __init__(self):
        self.records: List[Tuple[Tensor, Tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _active_tapes.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, parents: Tuple[Tensor, ...], backward: Callable) -> None:
        self.records.append((out, parents, backward))

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(tensor) into every recorded tensor that requires grad."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, parents, backward in reversed(self.records):
            if out.grad is None:
                continue
            grads = backward(out.grad)
            for parent, grad in zip(parents, grads):
                if grad is None or not parent.requires_grad:
                    continue
                parent._accumulate(grad)

    def clear(self) -> None:
        self.records.clear()


def constant(x) -> Tensor:
    """Wrap an array as a non-learnable tensor in the active float width."""
    return Tensor(np.asarray(x, dtype=_default_dtype))


def _as_tensor(x: TensorLike) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return constant(x)


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], backward: Callable) -> Tensor:
    tape = _active_tapes[-1] if _active_tapes else None
    needs_grad = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs_grad, dtype=data.dtype)
    if needs_grad:
        tape.record(out, parents, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise and structural primitives
# ---------------------------------------------------------------------------

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), backward)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(out, (a, b), backward)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    out = x.data * factor

    def backward(g):
        return (g * factor,)

    return _result(out, (x,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product of ``a`` (``[..., m, k]``) with a 2-D ``b`` (``[k, n]``).

    Backward produces ``dA = dC @ B.T`` and ``dB = A.T @ dC``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 1 or b.data.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {list(a.shape)} by {list(b.shape)}")
    out = a.data @ b.data

    def backward(g):
        grad_a = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        g2 = g.reshape(-1, b.shape[1])
        return grad_a, a2.T @ g2

    return _result(out, (a, b), backward)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {list(x.shape)}")
    out = np.ascontiguousarray(x.data.T)

    def backward(g):
        return (g.T,)

    return _result(out, (x,), backward)


def permute(x: Tensor, axes: Tuple[int, ...]) -> Tensor:
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    inverse = tuple(int(i) for i in np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _result(out, (x,), backward)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched product of ``[..., m, k]`` and ``[..., k, n]`` with equal leading extents."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 3 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"bmm: cannot multiply {list(a.shape)} by {list(b.shape)}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        return np.matmul(g, np.swapaxes(b.data, -1, -2)), np.matmul(np.swapaxes(a.data, -1, -2), g)

    return _result(out, (a, b), backward)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)
    original = x.shape

    def backward(g):
        return (g.reshape(original),)

    return _result(out, (x,), backward)


def take(x: Tensor, index) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate in backward."""
    out = np.array(x.data[index])

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(out, (x,), backward)


def take_rows(x: Tensor, rows: Sequence[int]) -> Tensor:
    return take(x, np.asarray(rows, dtype=np.int64))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _result(out, tuple(tensors), backward)


def reduce_sum(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), backward)


def reduce_mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return scale(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _result(out, (x,), backward)


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)

    def backward(g):
        return (g / x.data,)

    return _result(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _result(out, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf form of the normal CDF."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = x.data * cdf

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _result(out.astype(x.dtype, copy=False), (x,), backward)


def masked_fill(x: Tensor, allowed: np.ndarray, value: float = -np.inf) -> Tensor:
    """Replace entries where ``allowed`` is false by ``value`` (no gradient flows there)."""
    allowed = np.asarray(allowed, dtype=bool)
    out = np.where(allowed, x.data, x.dtype.type(value))

    def backward(g):
        return (np.where(allowed, g, 0.0).astype(g.dtype, copy=False),)

    return _result(out, (x,), backward)


# ---------------------------------------------------------------------------
# Normalization and probability primitives
# ---------------------------------------------------------------------------

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """
    Normalize the last axis to mean 0 / variance 1, then apply ``gain`` and ``bias``.

    ``eps`` is added inside the square root. A zero-variance slice with
    ``eps == 0`` normalizes to zeros.
    """
    d = x.shape[-1]
    if d < 2:
        raise ShapeError(f"layer_norm: normalized axis has extent {d}, need at least 2")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain {list(gain.shape)} / bias {list(bias.shape)} do not match axis {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    denom = np.sqrt(var + eps)
    inv = np.divide(1.0, denom, out=np.zeros_like(denom), where=denom > 0)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        g_hat = g * gain.data
        dx = inv * (
            g_hat
            - g_hat.mean(axis=-1, keepdims=True)
            - xhat * (g_hat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gain, bias), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """
    Softmax over the last axis with per-row max subtraction.

    ``-inf`` entries receive probability 0. A row whose entries are all
    ``-inf`` has no defined distribution and raises ``NumericalError``.
    """
    row_max = x.data.max(axis=-1, keepdims=True)
    if np.any(np.isneginf(row_max)):
        bad = np.argwhere(np.isneginf(row_max[..., 0]))[0].tolist()
        raise NumericalError(f"softmax_rows: row {bad} has no finite entries")
    e = np.exp(x.data - row_max)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (x,), backward)


def logsumexp_rows(x: Tensor) -> Tensor:
    """``log(sum(exp(x)))`` over the last axis (the axis is removed)."""
    out = np.asarray(_logsumexp(x.data, axis=-1)).astype(x.dtype, copy=False)

    def backward(g):
        probs = np.exp(x.data - out[..., None])
        return (probs * g[..., None],)

    return _result(out, (x,), backward)


def l2_normalize(x: Tensor, return_flags: bool = False):
    """
    Scale every last-axis slice to unit norm.

    Slices with norm below ``NORM_FLOOR`` are returned unchanged; with
    ``return_flags`` a boolean array marking those slices is returned too.
    """
    norms = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    degenerate = norms < NORM_FLOOR
    safe = np.where(degenerate, 1.0, norms).astype(x.dtype, copy=False)
    out = np.where(degenerate, x.data, x.data / safe)

    def backward(g):
        projected = (g - out * (g * out).sum(axis=-1, keepdims=True)) / safe
        return (np.where(degenerate, g, projected),)

    result = _result(out, (x,), backward)
    if return_flags:
        return result, degenerate[..., 0]
    return result


def bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy computed stably from logits."""
    z = logits.data
    y = np.asarray(labels, dtype=z.dtype).reshape(z.shape)
    losses = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray(losses.mean(), dtype=z.dtype)
    n = z.size

    def backward(g):
        return (g * (expit(z) - y) / n,)

    return _result(out, (logits,), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


def is_finite(x: Tensor) -> bool:
    return bool(np.all(np.isfinite(x.data)))


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

class ParameterSet:
    """
    Name-unique collection of ``ParamTensor`` objects.

    Names encode module/layer/slot, e.g. ``user_tower/layer0/mhsa/wq``.
    """

    def __init__(self):
        self._params: Dict[str, ParamTensor] = {}

    def add(self, name: str, data) -> ParamTensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name '{name}'")
        if ' ' in name:
            raise ConfigError(f"parameter name '{name}' must not contain spaces")
        param = ParamTensor(name, np.array(data, dtype=_default_dtype))
        self._params[name] = param
        return param

    def normal(self, name: str, shape: Tuple[int, ...], rng: np.random.Generator,
               std: float = 0.02) -> ParamTensor:
        return self.add(name, rng.normal(0.0, std, size=shape))

    def zeros(self, name: str, shape: Tuple[int, ...]) -> ParamTensor:
        return self.add(name, np.zeros(shape))

    def ones(self, name: str, shape: Tuple[int, ...]) -> ParamTensor:
        return self.add(name, np.ones(shape))

    def __getitem__(self, name: str) -> ParamTensor:
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"unknown parameter '{name}'") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[ParamTensor]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def with_prefix(self, prefix: str) -> List[ParamTensor]:
        return [p for name, p in self._params.items() if name.startswith(prefix)]

    def merge(self, other: "ParameterSet") -> None:
        for param in other:
            if param.name in self._params:
                raise ConfigError(f"duplicate parameter name '{param.name}'")
            self._params[param.name] = param

    def zero_grad(self) -> None:
        for param in self._params.values():
            param.grad = None

    def cast(self, width: int) -> None:
        """Convert every parameter to the given float width in place."""
        dtype = FLOAT_WIDTHS[width]
        for param in self._params.values():
            param.data = param.data.astype(dtype)
            param.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self._params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = sorted(set(self._params) - set(state))
        unexpected = sorted(set(state) - set(self._params))
        if missing or unexpected:
            raise ShapeError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, param in self._params.items():
            if state[name].shape != param.shape:
                raise ShapeError(
                    f"parameter '{name}': checkpoint shape {list(state[name].shape)} "
                    f"!= model shape {list(param.shape)}"
                )
            param.data = np.array(state[name])
            param.grad = None


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    first: Dict[str, np.ndarray] = field(default_factory=dict)
    second: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[ParamTensor], state: AdamState, *, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              step_index: int) -> None:
    """
    One bias-corrected Adam update, in place.

    ``step_index`` starts at 1. Every parameter must carry a gradient; the
    check runs before any parameter is touched.
    """
    if step_index < 1:
        raise ConfigError(f"adam step_index starts at 1, got {step_index}")
    for param in params:
        if param.grad is None:
            raise MissingGradientError(f"adam_step: parameter '{param.name}' has no gradient")
    correction1 = 1.0 - beta1 ** step_index
    correction2 = 1.0 - beta2 ** step_index
    for param in params:
        grad = param.grad
        m = state.first.get(param.name)
        v = state.second.get(param.name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        state.first[param.name] = m
        state.second[param.name] = v
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
        param.data = (param.data - update).astype(param.data.dtype, copy=False)


class Adam:
    """Stateful wrapper around ``adam_step`` that counts steps."""

    def __init__(self, params: Sequence[ParamTensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState()
        self.step_index = 0

    def step(self) -> None:
        self.step_index += 1
        adam_step(self.params, self.state, lr=self.lr, beta1=self.beta1,
                  beta2=self.beta2, eps=self.eps, step_index=self.step_index)

    def zero_grad(self) -> None:
        for param in self.params:
            param.grad = None


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Outcome of a central-difference gradient check."""

    max_rel_error: float
    tolerance: float
    n_coords: int
    per_param: Dict[str, float]
    worst_param: Optional[str] = None
    worst_index: Optional[Tuple[int, ...]] = None

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    @property
    def failures(self) -> List[str]:
        return sorted(name for name, err in self.per_param.items() if err >= self.tolerance)

    def summary(self) -> str:
        status = 'PASS' if self.passed else 'FAIL'
        return (f"{status} max_rel_err={self.max_rel_error:.3e} tol={self.tolerance:.1e} "
                f"coords={self.n_coords} worst={self.worst_param}{list(self.worst_index or ())}")


def _select_coordinates(params: Sequence[ParamTensor], max_coords: Optional[int],
                        rng: np.random.Generator) -> List[Tuple[ParamTensor, Tuple[int, ...]]]:
    total = int(np.sum([p.data.size for p in params]))
    chosen = []
    if max_coords is None or total <= max(max_coords, MIN_SAMPLED_COORDS):
        for param in params:
            chosen.extend((param, idx) for idx in np.ndindex(param.shape))
        return chosen
    budget = max(max_coords, MIN_SAMPLED_COORDS)
    for param in params:
        k = min(param.data.size, max(1, math.ceil(budget * param.data.size / total)))
        flat = np.sort(rng.choice(param.data.size, size=k, replace=False))
        chosen.extend((param, np.unravel_index(i, param.shape)) for i in flat)
    return chosen


def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[ParamTensor],
               eps: float = 1e-5, tolerance: float = 1e-4,
               max_coords: Optional[int] = None, seed: int = 0,
               abs_floor: float = 1e-6) -> GradCheckReport:
    """
    Compare tape gradients of ``loss_fn`` against central finite differences.

    ``loss_fn`` must rebuild the loss from ``params`` on every call. The
    relative error of a coordinate is ``|a - n| / max(|a|, |n|, abs_floor)``.
    Requires every parameter in 64-bit.
    """
    for param in params:
        if param.dtype != np.float64:
            raise ConfigError(f"grad_check needs 64-bit tensors; '{param.name}' is {param.dtype}")

    for param in params:
        param.grad = None
    with Tape() as tape:
        loss = loss_fn()
    if not is_finite(loss):
        raise NumericalError("grad_check: non-finite loss at the unperturbed point")
    tape.backward(loss)
    analytic = {p.name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for p in params}

    rng = np.random.default_rng(seed)
    coords = _select_coordinates(params, max_coords, rng)
    per_param: Dict[str, float] = {p.name: 0.0 for p in params}
    worst = (0.0, None, None)
    for param, idx in coords:
        original = param.data[idx]
        param.data[idx] = original + eps
        plus = float(loss_fn().data)
        param.data[idx] = original - eps
        minus = float(loss_fn().data)
        param.data[idx] = original
        if not (math.isfinite(plus) and math.isfinite(minus)):
            raise NumericalError(f"grad_check: non-finite loss perturbing {param.name}{list(idx)}")
        numeric = (plus - minus) / (2.0 * eps)
        a = float(analytic[param.name][idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
        if err > per_param[param.name]:
            per_param[param.name] = err
        if err > worst[0]:
            worst = (err, param.name, tuple(int(i) for i in idx))

    report = GradCheckReport(max_rel_error=worst[0], tolerance=tolerance, n_coords=len(coords),
                             per_param=per_param, worst_param=worst[1], worst_index=worst[2])
    logger.debug(f"grad_check: {report.summary()}")
    return report
