"""Numeric kernels for inference, with an optional per-call FLOP counter.

Counting convention (shared with the analytic model in flops_accounting):
multiply-add = 2 FLOPs, bias add = 1 per output element, softmax = 5 per
element, GELU = 8 per element, layer-norm = 5 per element, residual /
positional adds and the attention scale = 1 per element.
"""

from collections import defaultdict
from contextlib import contextmanager, nullcontext
from typing import Iterator, Optional

import numpy as np
from scipy.special import erf

MATMUL_FMA_FLOPS = 2
SOFTMAX_FLOPS = 5
GELU_FLOPS = 8
LAYERNORM_FLOPS = 5
LAYERNORM_EPS = 1e-5

MATRIX = "matrix"
ELEMENTWISE = "elementwise"
TRANSCENDENTAL = "transcendental"
CATEGORIES = (MATRIX, ELEMENTWISE, TRANSCENDENTAL)


class FlopCounter:
    """Accumulates FLOPs per category and per named scope for one call"""

    def __init__(self):
        self.categories: dict[str, int] = dict.fromkeys(CATEGORIES, 0)
        self.by_scope: dict[str, int] = defaultdict(int)
        self._scope = "other"

    def add(self, category: str, n: int, scope: Optional[str] = None) -> None:
        if category not in self.categories:
            raise KeyError(f"unknown FLOP category: {category}")
        n = int(n)
        self.categories[category] += n
        self.by_scope[scope or self._scope] += n

    @contextmanager
    def scope(self, name: str) -> Iterator[None]:
        previous, self._scope = self._scope, name
        try:
            yield
        finally:
            self._scope = previous

    @property
    def total(self) -> int:
        return sum(self.categories.values())

    def breakdown(self) -> dict[str, int]:
        return {k: v for k, v in sorted(self.by_scope.items()) if v}


def scoped(counter: Optional[FlopCounter], name: str):
    """counter.scope(name), or a no-op when not counting"""
    return counter.scope(name) if counter is not None else nullcontext()


def matmul(a: np.ndarray, b: np.ndarray, counter: Optional[FlopCounter] = None) -> np.ndarray:
    """(..., m, n) @ (..., n, p)"""
    out = np.matmul(a, b)
    if counter is not None:
        n = a.shape[-1]
        counter.add(MATRIX, MATMUL_FMA_FLOPS * out.size * n)
    return out


def add_bias(y: np.ndarray, bias: Optional[np.ndarray], counter: Optional[FlopCounter] = None) -> np.ndarray:
    if bias is None:
        return y
    if counter is not None:
        counter.add(MATRIX, y.size)
    return y + bias


def add(x: np.ndarray, y: np.ndarray, counter: Optional[FlopCounter] = None) -> np.ndarray:
    if counter is not None:
        counter.add(ELEMENTWISE, int(np.prod(np.broadcast_shapes(x.shape, y.shape))))
    return x + y


def scale(x: np.ndarray, factor: float, counter: Optional[FlopCounter] = None) -> np.ndarray:
    if counter is not None:
        counter.add(ELEMENTWISE, x.size)
    return x * np.float32(factor)


def gelu(x: np.ndarray, counter: Optional[FlopCounter] = None) -> np.ndarray:
    """Exact (erf) GELU"""
    if counter is not None:
        counter.add(TRANSCENDENTAL, GELU_FLOPS * x.size)
    return (0.5 * x * (1.0 + erf(x / np.float32(np.sqrt(2.0))))).astype(np.float32)


def softmax(x: np.ndarray, counter: Optional[FlopCounter] = None) -> np.ndarray:
    """Max-subtracted softmax over the last axis"""
    if counter is not None:
        counter.add(TRANSCENDENTAL, SOFTMAX_FLOPS * x.size)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(
    x: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray,
    counter: Optional[FlopCounter] = None,
) -> np.ndarray:
    """Layer norm over the last axis"""
    if counter is not None:
        counter.add(TRANSCENDENTAL, LAYERNORM_FLOPS * x.size)
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    return ((x - mean) / np.sqrt(var + LAYERNORM_EPS) * weight + bias).astype(np.float32)


def conv1d_output_length(length: int, stride: int, kernel: int = 3, padding: int = 1) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def conv1d(
    x: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray,
    stride: int,
    counter: Optional[FlopCounter] = None,
) -> np.ndarray:
    """1-D convolution, kernel 3, padding 1, as an im2col matrix product.

    x: [c_in x L], weight: [c_out x c_in x 3] -> [c_out x L_out]
    """
    c_out, c_in, kernel = weight.shape
    length = x.shape[1]
    l_out = conv1d_output_length(length, stride, kernel)
    padded = np.pad(x, ((0, 0), (1, 1)))
    span = stride * (l_out - 1) + 1
    cols = np.stack([padded[:, k:k + span:stride] for k in range(kernel)], axis=1)
    cols = cols.reshape(c_in * kernel, l_out)
    y = matmul(weight.reshape(c_out, c_in * kernel), cols, counter)
    return add_bias(y, bias[:, None], counter)
