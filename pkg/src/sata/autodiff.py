"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation appends a node to the active :class:`Tape`
while it executes. :func:`backward` walks that tape in exact reverse order,
accumulating gradients additively, then clears it.

The engine is deliberately 64-bit only; it exists to make gradient and
bound checks tight, not to be fast.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DataError, DimensionError, NonFiniteError, ParameterError

DTYPE = np.float64

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """An n-d float64 array with an optional gradient slot."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._grad: np.ndarray | None = None

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
    def grad(self) -> np.ndarray | None:
        if not self.requires_grad:
            return None
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        if value is None:
            self._grad = None
            return
        value = np.asarray(value, dtype=DTYPE)
        if value.shape != self.data.shape:
            raise DimensionError(f"grad shape {value.shape} does not match tensor shape {self.data.shape}")
        self._grad = value

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar; all of these go through the recorded ops below
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

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class Tape:
    """Ordered record of executed operations.

    Usable as a context manager, in which case it becomes the active tape of
    the current thread for the duration of the block.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _state().stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _state().stack
        if stack and stack[-1] is self:
            stack.pop()


class _ThreadState(threading.local):
    def __init__(self) -> None:
        self.stack: list[Tape] = []
        self.default = Tape()
        self.enabled = True


_local = _ThreadState()


def _state() -> _ThreadState:
    return _local


def current_tape() -> Tape:
    st = _state()
    return st.stack[-1] if st.stack else st.default


@contextmanager
def no_grad() -> Iterator[None]:
    """Run operations without recording them."""
    st = _state()
    prev = st.enabled
    st.enabled = False
    try:
        yield
    finally:
        st.enabled = prev


def is_recording() -> bool:
    return _state().enabled


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, data: np.ndarray) -> None:
    if not np.all(np.isfinite(data)):
        bad = int(np.size(data) - np.count_nonzero(np.isfinite(data)))
        raise NonFiniteError(f"{op} produced {bad} non-finite value(s) in output of shape {np.shape(data)}")


def apply_op(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn: BackwardFn) -> Tensor:
    """Wrap ``out_data`` as the output of ``op`` and record it if needed.

    ``backward_fn`` maps the output gradient to one gradient (or None) per
    input. This is also the hook for user-defined operations.
    """
    _check_finite(op, out_data)
    needs = is_recording() and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(out_data, dtype=DTYPE)
    out.requires_grad = needs
    out.name = None
    out._grad = None
    if needs:
        current_tape().record(Node(op, tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` on every leaf tensor (one not produced on the tape) that feeds ``loss``.

    Gradients accumulate into existing ``.grad`` buffers. Intermediate
    results do not keep gradients. The tape is cleared afterwards.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    tape = tape if tape is not None else current_tape()

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {id(loss): loss}
    nodes = tape.nodes
    for pos in range(len(nodes) - 1, -1, -1):
        node = nodes[pos]
        nodes[pos] = None  # release activations as soon as they are consumed
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        leaves.pop(id(node.output), None)
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in pending:
                pending[key] = pending[key] + gi
            else:
                pending[key] = gi
                leaves[key] = inp
    for key, g in pending.items():
        t = leaves[key]
        t._grad = g.copy() if t._grad is None else t._grad + g
    tape.clear()


# ---------------------------------------------------------------- helpers


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return apply_op(
        "add", (a, b), a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return apply_op(
        "sub", (a, b), a.data - b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return apply_op(
        "mul", (a, b), a.data * b.data,
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return apply_op("div", (a, b), out, bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return apply_op("neg", (a,), -a.data, lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)  # overflow surfaces as NonFiniteError below
    return apply_op("exp", (a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return apply_op("log", (a,), out, lambda g: (g / a.data,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = as_tensor(x)
    d = x.data
    inner = _GELU_C * (d + 0.044715 * d**3)
    th = np.tanh(inner)
    out = 0.5 * d * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * d**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * d * (1.0 - th**2) * dinner),)

    return apply_op("gelu", (x,), out, bw)


def masked_fill(x, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant (no gradient there)."""
    x = as_tensor(x)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    out = np.where(mask, value, x.data)
    return apply_op("masked_fill", (x,), out, lambda g: (np.where(mask, 0.0, g),))


# ---------------------------------------------------------------- reductions / shape


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return apply_op("sum", (x,), out, bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {tuple(shape)}") from None
    return apply_op("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return apply_op("transpose", (x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inv),))


def swap_last(x) -> Tensor:
    """Swap the two trailing axes."""
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    out = x.data[index]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return apply_op("getitem", (x,), out if isinstance(out, np.ndarray) else np.array(out), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return apply_op("concat", ts, out, lambda g: tuple(np.split(g, bounds, axis=axis)))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the trailing two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return apply_op("matmul", (a, b), out, bw)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` as a single node; ``x`` may carry leading batch axes."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out += bias.data

    def bw(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        if bias is None:
            return gx, gw
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return apply_op("linear", inputs, out, bw)


# ---------------------------------------------------------------- fused ops


def _softmax_last(x: Tensor, scale: float = 1.0) -> Tensor:
    z = x.data * scale if scale != 1.0 else x.data
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        gx = out * (g - (g * out).sum(axis=-1, keepdims=True))
        return (gx * scale if scale != 1.0 else gx,)

    return apply_op("softmax", (x,), out, bw)


def softmax_rows(x, temperature=1.0) -> Tensor:
    """Row-wise softmax of ``temperature * x`` along the last axis.

    ``temperature`` may be a positive float or a scalar Tensor (learnable).
    """
    x = as_tensor(x)
    if isinstance(temperature, Tensor):
        if np.any(temperature.data <= 0):
            raise ParameterError(f"temperature must be positive, got {temperature.data}")
        return _softmax_last(mul(x, temperature))
    temperature = float(temperature)
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    return _softmax_last(x, temperature)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last dim {d} of {x.shape}")
    if eps < 0:
        raise ParameterError(f"eps must be non-negative, got {eps}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        lead = tuple(range(x.ndim - 1))
        ggain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gbias = g.sum(axis=lead) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, ggain, gbias

    return apply_op("layer_norm", (x, gain, bias), out, bw)


def cross_entropy_loss(logits, labels) -> Tensor:
    """Mean negative log-softmax probability of the true class."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs {labels.shape[0]} labels")
    c = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise DataError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    b = labels.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(b)
    out = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / b,)

    return apply_op("cross_entropy", (logits,), np.array(out), bw)


# ---------------------------------------------------------------- gradient oracle


@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    passed: bool
    worst: tuple[int, int] | None = None  # (input index, flat coordinate)
    checked: int = 0


def finite_diff_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    rel_tol: float = 1e-5,
    abs_tol: float = 1e-8,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f(*inputs)`` with central differences.

    Step per coordinate is ``1e-5 * max(1, |x|)``. Coordinates whose analytic
    gradient is below ``abs_tol`` in magnitude are compared absolutely
    against ``abs_tol``; all others relatively against ``rel_tol``.
    ``inputs`` are perturbed in place and restored.
    """
    for t in inputs:
        t.zero_grad()
    with Tape() as tape:
        out = f(*inputs)
        if out.data.size != 1:
            raise ContractError(f"finite_diff_check needs a scalar function, got shape {out.shape}")
        backward(out, tape)
    analytic = [t.grad.copy() if t.requires_grad else np.zeros_like(t.data) for t in inputs]

    max_rel = 0.0
    max_abs = 0.0
    passed = True
    worst = None
    worst_score = -1.0
    checked = 0
    with no_grad():
        for ti, t in enumerate(inputs):
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                x0 = flat[i]
                h = 1e-5 * max(1.0, abs(x0))
                flat[i] = x0 + h
                fp = f(*inputs).item()
                hi = flat[i]
                flat[i] = x0 - h
                fm = f(*inputs).item()
                lo = flat[i]
                flat[i] = x0
                numeric = (fp - fm) / (hi - lo)
                a = analytic[ti].reshape(-1)[i]
                err = abs(a - numeric)
                checked += 1
                if abs(a) < abs_tol:
                    max_abs = max(max_abs, err)
                    score = err / abs_tol * rel_tol
                    ok = err <= abs_tol
                else:
                    rel = err / max(abs(a), abs(numeric))
                    max_rel = max(max_rel, rel)
                    score = rel
                    ok = rel <= rel_tol
                if not ok:
                    passed = False
                if score > worst_score:
                    worst_score, worst = score, (ti, i)
    return GradCheckReport(max_rel, max_abs, passed, worst, checked)
