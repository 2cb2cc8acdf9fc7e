"""Finite-difference gradient checks for every differentiable layer op."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Tensor


@dataclass
class CheckResult:
    name: str
    shape: tuple
    max_rel_error: float
    passed: bool


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def check_op(name: str, op: Callable[..., Tensor], inputs: list[np.ndarray], rng: np.random.Generator,
             h: float = 1e-6, tol: float = 1e-5) -> CheckResult:
    """Compare tape gradients of sum(op(*inputs) * probe) against central differences."""
    params = [Parameter(x.copy()) for x in inputs]
    out_shape = op(*[Tensor(p.data) for p in params]).shape
    probe = Tensor(rng.standard_normal(out_shape))

    def scalar() -> float:
        return float((op(*[Tensor(p.data) for p in params]).data * probe.data).sum())

    with Tape() as tape:
        loss = ad.sum(ad.mul(op(*params), probe))
    tape.backward(loss)
    err = 0.0
    for p in params:
        num = numeric_grad(scalar, p.data, h)
        err = max(err, relative_error(p.grad, num))
    return CheckResult(name, tuple(inputs[0].shape), err, err < tol)


def _away_from_kinks(x: np.ndarray, margin: float = 1e-3) -> np.ndarray:
    # keep piecewise-linear ops differentiable under the finite-difference step
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _conv_case(rng, transpose: bool):
    k = int(rng.integers(1, 5))
    stride = int(rng.integers(1, 4))
    pad = int(rng.integers(0, k))
    c, f = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    n = int(rng.integers(1, 3))
    h = int(rng.integers(max(1, k - 2 * pad), 7))
    w = int(rng.integers(max(1, k - 2 * pad), 7))
    if transpose:
        while (h - 1) * stride - 2 * pad + k < 1:
            h += 1
        while (w - 1) * stride - 2 * pad + k < 1:
            w += 1
        x = rng.standard_normal((n, c, h, w))
        filt = rng.standard_normal((c, f, k, k))
        return x, filt, stride, pad
    x = rng.standard_normal((n, c, h, w))
    filt = rng.standard_normal((f, c, k, k))
    return x, filt, stride, pad


def run_suite(n_cases: int = 20, seed: int = 0, tol: float = 1e-5) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for _ in range(n_cases):
        x, w, s, p = _conv_case(rng, transpose=False)
        results.append(check_op("conv2d", lambda a, b, s=s, p=p: ad.conv2d(a, b, s, p), [x, w], rng, tol=tol))
        x, w, s, p = _conv_case(rng, transpose=True)
        results.append(check_op("conv2d_transpose", lambda a, b, s=s, p=p: ad.conv2d_transpose(a, b, s, p),
                                [x, w], rng, tol=tol))
    unary = {
        "relu": ad.relu,
        "leaky_relu": ad.leaky_relu,
        "tanh": ad.tanh,
        "sigmoid": ad.sigmoid,
        "square": ad.square,
        "mean": ad.mean,
        "sum": ad.sum,
    }
    for name, fn in unary.items():
        for _ in range(n_cases):
            shape = tuple(int(v) for v in rng.integers(1, 5, size=int(rng.integers(1, 5))))
            x = rng.standard_normal(shape)
            if name in ("relu", "leaky_relu"):
                x = _away_from_kinks(x)
            results.append(check_op(name, fn, [x], rng, tol=tol))
    for _ in range(n_cases):
        shape = tuple(int(v) for v in rng.integers(1, 5, size=int(rng.integers(1, 4))))
        x = rng.uniform(0.1, 2.0, shape)
        results.append(check_op("log", ad.log, [x], rng, tol=tol))
        a, b = rng.standard_normal(shape), rng.standard_normal(shape)
        results.append(check_op("mul", ad.mul, [a, b], rng, tol=tol))
        results.append(check_op("add", ad.add, [a, b], rng, tol=tol))
    return results


def adjoint_error(rng: np.random.Generator, k: int, stride: int, pad: int, c: int = 2, f: int = 3,
                  h: int | None = None) -> float:
    """Relative gap in <conv(u,K), v> = <u, conv_T(v,K)> for a shape where the conv is exact."""
    if h is None:
        ho = int(rng.integers(1, 5))
        h = (ho - 1) * stride + k - 2 * pad
        while h < 1 or h + 2 * pad < k:
            ho += 1
            h = (ho - 1) * stride + k - 2 * pad
    u = rng.standard_normal((c, h, h))
    K = rng.standard_normal((f, c, k, k))
    y = ad.conv2d(Tensor(u), Tensor(K), stride, pad).data
    v = rng.standard_normal(y.shape)
    back = ad.conv2d_transpose(Tensor(v), Tensor(K), stride, pad).data
    lhs = float((y * v).sum())
    rhs = float((u * back).sum())
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300)
