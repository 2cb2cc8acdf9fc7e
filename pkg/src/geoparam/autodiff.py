"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the handful of operations the generator/discriminator pyramids need are
provided: 2-D (transposed) convolution, pointwise nonlinearities and the
scalar reductions used by the adversarial losses.

Usage::

    with Tape() as tape:
        loss = mean(relu(conv2d(x, w, stride=2, pad=1)))
    tape.backward(loss)     # w.grad now holds d(loss)/dw
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LEAKY_SLOPE = 0.01

_active_tapes: list["Tape"] = []


class ShapeError(ValueError):
    pass


class Tensor:
    """An n-dimensional float64 array, optionally tracked for gradients."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if any(n < 1 for n in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._tape: Tape | None = None
        self._node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


class Parameter(Tensor):
    """Trainable tensor carrying its gradient buffer and Adam moments."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0

    @property
    def value(self) -> np.ndarray:
        return self.data


class Tape:
    """Records operations executed inside its context for a later backward pass."""

    def __init__(self):
        self.records: list[tuple[Tensor, Sequence[Tensor], Callable]] = []

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> None:
        out._tape = self
        out._node = len(self.records)
        out.requires_grad = True
        self.records.append((out, inputs, backward_fn))

    def backward(self, seed: Tensor) -> None:
        if not self.records:
            return
        if seed.data.size != 1:
            raise ShapeError("backward seed must be a scalar")
        if seed._tape is not self:
            raise ValueError("seed tensor was not produced on this tape")
        grads: dict[int, np.ndarray] = {seed._node: np.ones_like(seed.data)}
        for node in range(seed._node, -1, -1):
            g = grads.pop(node, None)
            if g is None:
                continue
            out, inputs, backward_fn = self.records[node]
            for inp, g_in in zip(inputs, backward_fn(g)):
                if g_in is None or not inp.requires_grad:
                    continue
                if inp._tape is self and inp._node is not None:
                    if inp._node in grads:
                        grads[inp._node] = grads[inp._node] + g_in
                    else:
                        grads[inp._node] = g_in
                else:
                    inp.grad += g_in


def backward(tape: Tape, seed: Tensor) -> None:
    tape.backward(seed)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _emit(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out._tape = None
    out._node = None
    if _active_tapes and any(t.requires_grad for t in inputs):
        _active_tapes[-1].record(out, inputs, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _emit(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def square(a: Tensor) -> Tensor:
    return _emit(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def log(a: Tensor) -> Tensor:
    return _emit(np.log(a.data), (a,), lambda g: (g / a.data,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is zero where the bound is active."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _emit(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    # np.maximum propagates NaN, so a poisoned network cannot hide behind a ReLU
    return _emit(np.maximum(x.data, 0.0), (x,), lambda g: (g * pos,))


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    pos = x.data > 0
    return _emit(np.where(pos, x.data, slope * x.data), (x,),
                 lambda g: (np.where(pos, g, slope * g),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit(y, (x,), lambda g: (g * y * (1.0 - y),))


# ---------------------------------------------------------------- reductions

def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _emit(np.asarray(x.data.sum()), (x,),
                 lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _emit(np.asarray(x.data.mean()), (x,),
                 lambda g: (np.full(x.shape, float(g) / n),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


# ---------------------------------------------------------------- convolution

def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv_transpose_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n - 1) * stride - 2 * pad + k


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (N, C, ho, wo, k, k) strided view, no copy
    v = sliding_window_view(xp, (k, k), axis=(2, 3))
    return v[:, :, : (ho - 1) * stride + 1: stride, : (wo - 1) * stride + 1: stride]


def _correlate(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Batched cross-correlation x (N,C,H,W) with w (F,C,k,k)."""
    k = w.shape[-1]
    ho = conv_output_size(x.shape[2], k, stride, pad)
    wo = conv_output_size(x.shape[3], k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _windows(xp, k, stride, ho, wo)
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, ho, wo, F)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _scatter(y: np.ndarray, w: np.ndarray, stride: int, pad: int, size: tuple[int, int]) -> np.ndarray:
    """Adjoint of ``_correlate`` with respect to its input.

    y is (N,F,ho,wo), w is (F,C,k,k); returns (N,C,*size).
    """
    n, _, ho, wo = y.shape
    c, k = w.shape[1], w.shape[-1]
    h, wd = size
    hp = max(h + 2 * pad, (ho - 1) * stride + k)
    wp = max(wd + 2 * pad, (wo - 1) * stride + k)
    out = np.zeros((n, c, hp, wp))
    # a single (C*k*k, F) @ (N, F, ho*wo) product gives every tap's
    # contribution; each tap is then scattered into the strided positions it reaches
    f = y.shape[1]
    taps = np.matmul(w.reshape(f, c * k * k).T, y.reshape(n, f, ho * wo)).reshape(n, c, k, k, ho, wo)
    for a in range(k):
        for b in range(k):
            out[:, :, a: a + (ho - 1) * stride + 1: stride, b: b + (wo - 1) * stride + 1: stride] += taps[:, :, a, b]
    return np.ascontiguousarray(out[:, :, pad: pad + h, pad: pad + wd])


def _filter_grad(x: np.ndarray, g: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """d/dw of sum(g * correlate(x, w)); returns (F,C,k,k)."""
    ho, wo = g.shape[2], g.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _windows(xp, k, stride, ho, wo)
    return np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))


def _batched(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.data.ndim == 3:
        return x.data[None], True
    if x.data.ndim == 4:
        return x.data, False
    raise ShapeError(f"expected (C,H,W) or (N,C,H,W), got {x.shape}")


def conv2d(x: Tensor, filters: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlate ``x`` (C,H,W or N,C,H,W) with ``filters`` (F,C,k,k)."""
    xb, single = _batched(x)
    f, c, k, k2 = filters.shape
    if k != k2:
        raise ShapeError("filters must be square")
    if xb.shape[1] != c:
        raise ShapeError(f"input has {xb.shape[1]} channels, filters expect {c}")
    if stride < 1 or pad < 0:
        raise ValueError("stride must be >= 1 and pad >= 0")
    h, w = xb.shape[2:]
    if k > h + 2 * pad or k > w + 2 * pad:
        raise ShapeError(f"kernel {k} larger than padded input {h}x{w} (pad {pad})")
    out = _correlate(xb, filters.data, stride, pad)

    def back(g):
        gb = g[None] if single else g
        gx = _scatter(gb, filters.data, stride, pad, (h, w))
        gw = _filter_grad(xb, gb, k, stride, pad)
        return (gx[0] if single else gx), gw

    return _emit(out[0] if single else out, (x, filters), back)


def conv2d_transpose(x: Tensor, filters: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution: ``x`` (C,H,W) with ``filters`` (C,F,k,k) -> (F,H',W').

    Defined as the adjoint of :func:`conv2d` under the same (k, stride, pad).
    """
    xb, single = _batched(x)
    c, f, k, k2 = filters.shape
    if k != k2:
        raise ShapeError("filters must be square")
    if xb.shape[1] != c:
        raise ShapeError(f"input has {xb.shape[1]} channels, filters expect {c}")
    if stride < 1 or pad < 0:
        raise ValueError("stride must be >= 1 and pad >= 0")
    h, w = xb.shape[2:]
    ho = conv_transpose_output_size(h, k, stride, pad)
    wo = conv_transpose_output_size(w, k, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"transposed convolution output {ho}x{wo} is empty")
    out = _scatter(xb, filters.data, stride, pad, (ho, wo))

    def back(g):
        gb = g[None] if single else g
        gx = _correlate(gb, filters.data, stride, pad)
        # filters act as a conv2d weight (C_in_of_tconv, F, k, k) applied to the output
        gw = _filter_grad(gb, xb, k, stride, pad)
        return (gx[0] if single else gx), gw

    return _emit(out[0] if single else out, (x, filters), back)


# ---------------------------------------------------------------- optimisation

def zero_grad(params: Sequence[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def adam_step(params: Sequence[Parameter], lr: float = 1e-4, beta1: float = 0.5,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam descent step on each parameter's accumulated grad."""
    for p in params:
        p.step += 1
        p.m *= beta1
        p.m += (1.0 - beta1) * p.grad
        p.v *= beta2
        p.v += (1.0 - beta2) * p.grad * p.grad
        m_hat = p.m / (1.0 - beta1 ** p.step)
        v_hat = p.v / (1.0 - beta2 ** p.step)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def clip_weights(params: Sequence[Parameter], c: float) -> None:
    if c <= 0:
        raise ValueError("clip bound must be positive")
    for p in params:
        np.clip(p.data, -c, c, out=p.data)
