"""Dense float64 matrix kernel with deterministic reductions.

All numeric state in this package is carried by plain 2-D ``numpy.float64``
arrays. The one non-obvious piece is ``matmul``: it accumulates strictly in
ascending-k order so the result is bit-identical to a naive triple loop,
which keeps the trace-equality tests exact.

Random streams come from ``make_rng`` (PCG64). A given seed produces the
same stream on every platform numpy supports; Gaussian draws use numpy's
ziggurat sampler on top of that stream.
"""

from __future__ import annotations

import numpy as np


def as_matrix(x) -> np.ndarray:
    """Coerce input to a 2-D float64 array (1-D inputs become a row)."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    """Matrix product with sequential ascending-k accumulation.

    Each output element is the sum of a[i, k] * b[k, j] added one k at a
    time starting from 0.0, so the result matches a naive triple loop
    bit-for-bit.
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def frobenius_norm(m) -> float:
    m = as_matrix(m)
    return float(np.sqrt(np.sum(np.square(m))))


def max_abs(m) -> float:
    m = as_matrix(m)
    if m.size == 0:
        raise ValueError("max_abs of an empty matrix")
    return float(np.max(np.abs(m)))


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator; identical seeds give identical streams."""
    return np.random.Generator(np.random.PCG64(seed))
