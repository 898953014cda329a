"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed inside an active :class:`Tape` context are recorded
together with a closure computing their vector-Jacobian product. Outside a
tape nothing is recorded, which is how inference and finite-difference
evaluation stay cheap.

Leaf tensors with ``requires_grad=True`` accumulate into ``.grad`` on every
backward pass (call :meth:`Tensor.zero_grad` between steps). Intermediate
gradients live only for the duration of one backward pass, so two backward
calls over the same tape give exactly twice the leaf gradient.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tape",
    "Tensor",
    "add",
    "backward",
    "concat",
    "exp",
    "layer_norm",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "relu",
    "reshape",
    "row_gather",
    "scalar_mul",
    "scatter_add_rows",
    "sigmoid",
    "softmax",
    "sub",
    "sum",
    "tanh",
    "transpose",
]

# exact scale invariance; constant rows map to 0 instead of dividing by zero
LAYER_NORM_EPS = 0.0


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; tapes nest, the innermost one records.
    """

    _stack: list["Tape"] = []

    def __init__(self) -> None:
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = Tape._stack.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.records)

    @classmethod
    def active(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss._recorded:
            raise ValueError("loss was not recorded on a tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, parents, vjp in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._recorded:
                    key = id(parent)
                    grads[key] = grads[key] + pg if key in grads else pg
                elif parent.grad is None:
                    parent.grad = np.array(pg, dtype=np.float64)
                else:
                    parent.grad = parent.grad + pg


def backward(tape: Tape, loss: "Tensor") -> None:
    """Populate ``.grad`` of every leaf that ``loss`` depends on."""
    tape.backward(loss)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_recorded")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._recorded = False

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
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scalar_mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(data)
    tape = Tape.active()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._recorded = True
        tape.records.append((out, tuple(parents), vjp))
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
    return g


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# -- elementwise arithmetic --------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check("add", a, b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check("sub", a, b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    """Hadamard product with numpy broadcasting."""
    a, b = _wrap(a), _wrap(b)
    _broadcast_check("mul", a, b)

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check("div", a, b)
    out = a.data / b.data
    return _result(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def scalar_mul(a, c: float) -> Tensor:
    a = _wrap(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


# -- linear algebra and shape ------------------------------------------------


def matmul(a, b) -> Tensor:
    """``numpy.matmul`` semantics, including batched leading dimensions."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul: scalar operand {a.shape} @ {b.shape}")
    a2 = a.data[None, :] if a.ndim == 1 else a.data
    b2 = b.data[:, None] if b.ndim == 1 else b.data
    if a2.shape[-1] != b2.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        out2 = np.matmul(a2, b2)
    except ValueError:
        raise ShapeError(f"matmul: cannot broadcast {a.shape} @ {b.shape}") from None
    out = out2
    if b.ndim == 1:
        out = out[..., 0]
    if a.ndim == 1:
        out = out[..., 0, :] if b.ndim > 1 else out[..., 0]

    def vjp(g):
        g2 = g.reshape(out2.shape)
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g2, np.swapaxes(b2, -1, -2)), a2.shape).reshape(a.shape)
        if b.requires_grad:
            if b2.ndim == 2 and a2.shape[:-1] == g2.shape[:-1]:
                # fold batch axes into one product instead of summing (B, k, m) slabs
                gb = a2.reshape(-1, a2.shape[-1]).T @ g2.reshape(-1, g2.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a2, -1, -2), g2), b2.shape)
            gb = gb.reshape(b.shape)
        return ga, gb

    return _result(out, (a, b), vjp)


def transpose(a) -> Tensor:
    """Swap the last two axes (identity on vectors)."""
    a = _wrap(a)
    if a.ndim < 2:
        return _result(a.data, (a,), lambda g: (g,))
    return _result(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in ts)
        raise ShapeError(f"concat(axis={axis}): incompatible shapes {shapes}") from None
    cuts = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _result(out, ts, lambda g: tuple(np.split(g, cuts, axis=axis)))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _result(out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return scalar_mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def row_gather(a, indices) -> Tensor:
    """``a[indices]`` along axis 0; ``indices`` may have any shape."""
    a = _wrap(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0]):
        raise IndexError(f"row_gather: index out of range for {a.shape[0]} rows")

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(a.data[idx], (a,), vjp)


def scatter_add_rows(src, indices, n_rows: int) -> Tensor:
    """Sum rows of ``src`` into ``n_rows`` buckets; repeated indices accumulate."""
    src = _wrap(src)
    idx = np.asarray(indices, dtype=np.intp)
    if src.shape[: idx.ndim] != idx.shape:
        raise ShapeError(f"scatter_add_rows: indices {idx.shape} vs source {src.shape}")
    out = np.zeros((n_rows,) + src.shape[idx.ndim:])
    np.add.at(out, idx, src.data)
    return _result(out, (src,), lambda g: (g[idx],))


# -- nonlinearities ----------------------------------------------------------


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    # tanh form never overflows
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = _wrap(a)
    on = a.data > 0
    return _result(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _wrap(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def softmax(a, temperature: float = 1.0, axis: int = -1, mask=None) -> Tensor:
    """Softmax of ``a / temperature``; entries where ``mask`` is False get 0."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    a = _wrap(a)
    x = a.data / temperature
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        x = np.where(mask, x, -np.inf)
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner) / temperature,)

    return _result(out, (a,), vjp)


def log_softmax(a, axis: int = -1, mask=None) -> Tensor:
    """Numerically stable log-softmax; masked entries are reported as 0."""
    a = _wrap(a)
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        x = np.where(mask, x, -np.inf)
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)
    if mask is not None:
        out = np.where(mask, out, 0.0)

    def vjp(g):
        if mask is not None:
            g = np.where(mask, g, 0.0)
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), vjp)


def layer_norm(a, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean and unit population variance.

    No learnable gain or bias. A constant row normalizes to zeros.
    """
    a = _wrap(a)
    d = a.shape[-1] if a.ndim else 0
    if d < 2:
        raise ShapeError(f"layer_norm needs a last dimension >= 2, got shape {a.shape}")
    centered = a.data - a.data.mean(axis=-1, keepdims=True)
    var = (centered * centered).mean(axis=-1, keepdims=True) + eps
    inv_std = np.divide(1.0, np.sqrt(var), out=np.zeros_like(var), where=var > 0)
    out = centered * inv_std

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out).mean(axis=-1, keepdims=True)
        return (inv_std * (g - gm - out * gy),)

    return _result(out, (a,), vjp)
