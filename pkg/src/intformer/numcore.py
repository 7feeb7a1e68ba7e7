"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable primitive records itself on the active :class:`GradTape`
(when one of its inputs requires a gradient).  ``GradTape.gradient`` walks the
records in reverse and applies each primitive's vector-Jacobian product.

Usage::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with GradTape() as tape:
        loss = mean(sigmoid(matmul(x, w)))
    (dw,) = tape.gradient(loss, [w])
"""

from __future__ import annotations

import builtins
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError, EvaluationError

LAYER_NORM_EPS = 1e-5

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


class Tensor:
    """A row-major float64 array, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
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
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradTape:
    """Ordered record of primitive operations for reverse-mode replay.

    A tape is active inside its ``with`` block and is confined to the thread
    that entered it.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:
            stack.remove(self)

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, inputs: tuple, backward: Callable) -> None:
        self._records.append((out, inputs, backward))

    def gradient(self, target: Tensor, sources: Sequence[Tensor], output_grad=None) -> list[np.ndarray]:
        """Return d(target)/d(source) for every source, zeros where unreachable."""
        if output_grad is None:
            if target.size != 1:
                raise DimensionError("gradient() of a non-scalar target needs output_grad")
            output_grad = np.ones_like(target.data)
        grads: dict[int, np.ndarray] = {id(target): np.asarray(output_grad, dtype=np.float64)}
        source_ids = {id(s) for s in sources}
        for out, inputs, backward in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = backward(g)
            for inp, ig in zip(inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
            # sources may themselves be intermediate results
            if id(out) in source_ids:
                grads[id(out)] = g
        return [grads.get(id(s), np.zeros_like(s.data)) for s in sources]


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def _make(data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = track
    if track:
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes.

    Backward: ``da = g @ b^T``, ``db = a^T @ g``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = ad @ bd
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(out, (a, b), backward)


# ---------------------------------------------------------------- reductions / shape


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def max(x, axis: int) -> Tensor:  # noqa: A001
    """Maximum along ``axis``; the gradient flows to the first arg-max."""
    x = as_tensor(x)
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    shape = x.shape

    def backward(g):
        grad = np.zeros(shape)
        np.put_along_axis(grad, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return _make(out, (x,), backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inverse = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    splits = np.cumsum(sizes)[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _make(out, tensors, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def take(x, index) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate gradient."""
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        grad = np.zeros(shape)
        np.add.at(grad, index, g)
        return (grad,)

    return _make(x.data[index], (x,), backward)


# ---------------------------------------------------------------- elementwise


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def sin(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make(np.sin(xd), (x,), lambda g: (g * np.cos(xd),))


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; zero gradient where the clamp is active."""
    x = as_tensor(x)
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return _make(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    # two-branch form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),))


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def activation(x, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigurationError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-shifted before exponentiation)."""
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (x,), backward)


def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply gain and bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if d < 1 or gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm over width {d} with gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    gd = gain.data
    out = xhat * gd + bias.data

    def backward(g):
        gx = g * gd
        dx = inv_std * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        dbias = g.reshape(-1, d).sum(axis=0)
        return dx, dgain, dbias

    return _make(out, (x, gain, bias), backward)


def dropout(x, rate: float, mode: str = "eval", rng=None) -> Tensor:
    """Inverted dropout: identity in eval mode, scaled survivors in train mode.

    ``rng`` is a ``numpy.random.Generator`` or an integer seed.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    x = as_tensor(x)
    if mode == "eval" or rate == 0.0:
        return x
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    scale = 1.0 / (1.0 - rate)
    mask = (rng.random(x.shape) >= rate) * scale
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------- verification


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` takes no arguments, reads ``params`` and returns a scalar tensor.
    The error for each coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    Parameters are perturbed in place and restored afterwards.
    """
    params = list(params)
    for p in params:
        p.requires_grad = True
    with GradTape() as tape:
        value = f()
    if not np.all(np.isfinite(value.data)):
        raise EvaluationError("f returned a non-finite value")
    analytic = tape.gradient(value, params)

    def evaluate() -> float:
        v = f().data
        if not np.all(np.isfinite(v)):
            raise EvaluationError("f returned a non-finite value under perturbation")
        return float(np.sum(v))

    worst = 0.0
    for p, grad in zip(params, analytic):
        if grad.shape != p.shape:
            raise DimensionError(f"gradient shape {grad.shape} != parameter shape {p.shape}")
        flat = p.data.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = evaluate()
            flat[i] = orig - step
            down = evaluate()
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            err = abs(gflat[i] - numeric) / builtins.max(1.0, abs(gflat[i]))
            worst = builtins.max(worst, err)
    return worst
