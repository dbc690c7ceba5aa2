"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its backward rule onto a per-thread computation
tape; ``backward(loss)`` replays the tape in reverse and populates ``.grad``
on every tensor that requires gradients. The tape lives for exactly one
forward pass: it is consumed by ``backward`` and a fresh one starts with
the next recorded operation. ``finite_difference_grad`` is the independent
gradient oracle used by the test suite.

Operations treat the last two axes as the matrix and any leading axes as a
batch (plain numpy ``@`` semantics); the 2-D case is the common contract.
Binary elementwise operations accept equal shapes or a Python scalar —
there is no general broadcasting.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf, expit

from .errors import ContractError, NumericError, ShapeError, StateError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

_LAYERNORM_EPS = 1e-5


class Tensor:
    """A dense float64 array with optional gradient tracking.

    ``data`` is a C-contiguous (row-major) float64 ndarray; its flat buffer
    and ``shape`` satisfy ``prod(shape) == data.size``. The shape is fixed
    at construction; ``reshape`` returns a new tensor. ``grad`` is filled
    by ``backward`` and always matches ``data``'s shape.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = arr.copy(order="C")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: "ComputationTape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """A defensive copy of the values, detached from the graph."""
        return self.data.copy()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the module-level functions are the primary API.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        return reshape(self, shape)

    def sum(self, axis: int | None = None) -> "Tensor":
        return reduce_sum(self, axis)

    def mean(self, axis: int | None = None) -> "Tensor":
        return reduce_mean(self, axis)

    def max(self, axis: int | None = None) -> "Tensor":
        return reduce_max(self, axis)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


class ComputationTape:
    """Ordered record of one forward pass.

    Entries are appended in execution order, so inputs always precede the
    operations that consume them (topological order by construction). A
    tape supports exactly one backward pass; afterwards it is dead and the
    next recorded operation starts a new one.
    """

    __slots__ = ("entries", "consumed")

    def __init__(self):
        # each entry: (output, inputs, grad_fn) where grad_fn maps the
        # output gradient to one gradient array (or None) per input
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.entries)


_state = threading.local()


def _thread_state():
    if not hasattr(_state, "tape"):
        _state.tape = None
        _state.grad_enabled = True
    return _state


class no_grad:
    """Context manager that disables tape recording (inference mode)."""

    def __enter__(self):
        st = _thread_state()
        self._prev = st.grad_enabled
        st.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _thread_state().grad_enabled = self._prev
        return False


def _record(out: Tensor, inputs: tuple[Tensor, ...], grad_fn: Callable) -> None:
    st = _thread_state()
    if not st.grad_enabled:
        return
    if not any(t.requires_grad for t in inputs):
        return
    if st.tape is None or st.tape.consumed:
        st.tape = ComputationTape()
    out.requires_grad = True
    out._tape = st.tape
    st.tape.entries.append((out, inputs, grad_fn))


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` for every gradient-tracking tensor behind ``loss``.

    ``loss`` must be a scalar produced by the live tape. Gradients from
    multiple uses of the same tensor accumulate within this pass; a tensor's
    ``.grad`` from any earlier pass is overwritten. The tape is freed
    afterwards and a second call on it raises ``StateError``.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        if loss.requires_grad:
            # identity graph: the loss is itself a tracked leaf
            loss.grad = np.ones_like(loss.data)
            return
        raise StateError("loss was not produced by a recorded forward pass")
    if tape.consumed:
        raise StateError("tape already consumed; run a new forward pass before backward")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, grad_fn in reversed(tape.entries):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        if out.requires_grad:
            out.grad = g
        for inp, ig in zip(inputs, grad_fn(g)):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
    for _, inputs, _ in tape.entries:
        for inp in inputs:
            g = grads.get(id(inp))
            if g is not None and inp.requires_grad:
                inp.grad = g
    st = _thread_state()
    if st.tape is tape:
        st.tape = None
    tape.entries.clear()


# ---------------------------------------------------------------------------
# primitive operations


def _unbatch(grad: np.ndarray, target_shape: tuple[int, ...]) -> np.ndarray:
    # collapse leading batch axes a shared (lower-rank) operand broadcast over
    while grad.ndim > len(target_shape):
        grad = grad.sum(axis=0)
    return grad


def _swap_last(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes are a batch."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    la, lb = a.shape[:-2], b.shape[:-2]
    if la and lb and la != lb:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data)

    def grad_fn(g):
        ga = _unbatch(g @ _swap_last(b.data), a.shape) if a.requires_grad else None
        gb = _unbatch(_swap_last(a.data) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    _record(out, (a, b), grad_fn)
    return out


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 axes, got shape {x.shape}")
    out = Tensor(_swap_last(x.data))
    _record(out, (x,), lambda g: (_swap_last(g),))
    return out


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} (size {x.size}) to {shape}")
    out = Tensor(x.data.reshape(shape))
    _record(out, (x,), lambda g: (g.reshape(x.shape),))
    return out


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate tensors along ``axis``; backward splits the gradient."""
    if not xs:
        raise ShapeError("concat of an empty list")
    ndim = xs[0].ndim
    axis = _normalize_axis(axis, ndim, "concat")
    base = list(xs[0].shape)
    for t in xs:
        if t.ndim != ndim:
            raise ShapeError(f"concat rank mismatch: {xs[0].shape} vs {t.shape}")
        other = list(t.shape)
        other[axis] = base[axis]
        if other != base:
            raise ShapeError(f"concat shapes ragged off axis {axis}: {[u.shape for u in xs]}")
    out = Tensor(np.concatenate([t.data for t in xs], axis=axis))
    offsets = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, offsets, axis=axis))

    _record(out, tuple(xs), grad_fn)
    return out


def _normalize_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for rank {ndim}")
    return axis % ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis``, computed with max-subtraction for stability."""
    axis = _normalize_axis(axis, max(x.ndim, 1), "softmax")
    if x.ndim and x.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis {axis} of shape {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax input contains non-finite values")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(y)

    def grad_fn(g):
        inner = np.sum(g * y, axis=axis, keepdims=True)
        return (y * (g - inner),)

    _record(out, (x,), grad_fn)
    return out


def _binary(a: Tensor, b, fwd, ga_fn, gb_fn) -> Tensor:
    if isinstance(b, Tensor):
        if a.shape != b.shape and a.size != 1 and b.size != 1:
            raise ShapeError(f"elementwise shapes differ: {a.shape} vs {b.shape}")
        out = Tensor(fwd(a.data, b.data))

        def grad_fn(g):
            ga = _unbatch_to(ga_fn(g, a.data, b.data), a.shape) if a.requires_grad else None
            gb = _unbatch_to(gb_fn(g, a.data, b.data), b.shape) if b.requires_grad else None
            return ga, gb

        _record(out, (a, b), grad_fn)
        return out
    c = float(b)
    out = Tensor(fwd(a.data, c))
    _record(out, (a,), lambda g: (ga_fn(g, a.data, c),))
    return out


def _unbatch_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # scalar-tensor broadcast: collapse back to the operand's shape
    if grad.shape == shape:
        return grad
    if grad.size == int(np.prod(shape, dtype=np.int64)):
        return grad.reshape(shape)
    return np.sum(grad).reshape(shape)


def add(a: Tensor, b) -> Tensor:
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a: Tensor, b) -> Tensor:
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a: Tensor, b) -> Tensor:
    return _binary(a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(x.data * c)
    _record(out, (x,), lambda g: (g * c,))
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    out = Tensor(y)
    _record(out, (x,), lambda g: (g * y * (1.0 - y),))
    return out


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0) or not np.all(np.isfinite(x.data)):
        raise NumericError("log requires strictly positive finite inputs")
    out = Tensor(np.log(x.data))
    _record(out, (x,), lambda g: (g / x.data,))
    return out


def gelu(x: Tensor) -> Tensor:
    """Exact-CDF GELU: x * Phi(x) with Phi the standard normal CDF."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = Tensor(x.data * cdf)

    def grad_fn(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (cdf + x.data * pdf),)

    _record(out, (x,), grad_fn)
    return out


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; gradient passes through the interior."""
    if not lo < hi:
        raise ContractError(f"clamp bounds must satisfy lo < hi, got [{lo}, {hi}]")
    out = Tensor(np.clip(x.data, lo, hi))
    inside = (x.data >= lo) & (x.data <= hi)
    _record(out, (x,), lambda g: (g * inside,))
    return out


def _canonical_sum(arr: np.ndarray, axis: int | None) -> np.ndarray:
    # Sort addends before summing so the result is independent of their
    # order: permutation-invariance tests can then assert bit equality.
    if axis is None:
        return np.sum(np.sort(arr, axis=None))
    return np.sum(np.sort(arr, axis=axis), axis=axis)


def _check_reduce_axis(x: Tensor, axis: int | None, op: str) -> int | None:
    if x.size == 0 and axis is None:
        raise ShapeError(f"{op} over an empty tensor")
    if axis is None:
        return None
    axis = _normalize_axis(axis, x.ndim, op)
    if x.shape[axis] == 0:
        raise ShapeError(f"{op} over empty axis {axis} of shape {x.shape}")
    return axis


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    axis = _check_reduce_axis(x, axis, "sum")
    out = Tensor(_canonical_sum(x.data, axis))

    def grad_fn(g):
        if axis is None:
            return (np.full(x.shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    _record(out, (x,), grad_fn)
    return out


def reduce_mean(x: Tensor, axis: int | None = None) -> Tensor:
    axis = _check_reduce_axis(x, axis, "mean")
    n = x.size if axis is None else x.shape[axis]
    out = Tensor(_canonical_sum(x.data, axis) / n)

    def grad_fn(g):
        if axis is None:
            return (np.full(x.shape, float(g) / n),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape) / n,)

    _record(out, (x,), grad_fn)
    return out


def reduce_max(x: Tensor, axis: int | None = None) -> Tensor:
    """Max reduction; the subgradient routes to the first maximal element."""
    axis = _check_reduce_axis(x, axis, "max")
    if axis is None:
        out = Tensor(np.max(x.data))
        flat_idx = int(np.argmax(x.data))

        def grad_fn(g):
            full = np.zeros(x.size)
            full[flat_idx] = float(g)
            return (full.reshape(x.shape),)

    else:
        out = Tensor(np.max(x.data, axis=axis))
        idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)

        def grad_fn(g):
            full = np.zeros(x.shape)
            np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
            return (full,)

    _record(out, (x,), grad_fn)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = _LAYERNORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}"
        )
    mu = np.mean(x.data, axis=-1, keepdims=True)
    var = np.mean((x.data - mu) ** 2, axis=-1, keepdims=True)
    inv_sigma = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_sigma
    out = Tensor(xhat * gain.data + bias.data)

    def grad_fn(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = np.mean(dxhat, axis=-1, keepdims=True)
            m2 = np.mean(dxhat * xhat, axis=-1, keepdims=True)
            gx = (dxhat - m1 - xhat * m2) * inv_sigma
        ggain = _unbatch_axes(g * xhat) if gain.requires_grad else None
        gbias = _unbatch_axes(g) if bias.requires_grad else None
        return gx, ggain, gbias

    _record(out, (x, gain, bias), grad_fn)
    return out


def _unbatch_axes(grad: np.ndarray) -> np.ndarray:
    while grad.ndim > 1:
        grad = grad.sum(axis=0)
    return grad


# ---------------------------------------------------------------------------
# gradient oracle


def finite_difference_grad(f: Callable[[Tensor], "Tensor | float"], x: Tensor, eps: float = 1e-4) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``, one coordinate at a time.

    ``x``'s values are perturbed in place and restored, so ``f`` may close
    over the same tensor object (as model-parameter checks do). Evaluation
    runs with recording disabled.
    """
    if eps <= 0:
        raise ContractError(f"finite differences need eps > 0, got {eps}")

    def scalar(v) -> float:
        return v.item() if isinstance(v, Tensor) else float(v)

    flat = x.data.reshape(-1)
    grad = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = scalar(f(x))
            flat[i] = orig - eps
            fm = scalar(f(x))
            flat[i] = orig
            grad[i] = (fp - fm) / (2.0 * eps)
    return Tensor(grad.reshape(x.shape))
