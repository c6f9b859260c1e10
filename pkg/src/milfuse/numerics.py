"""Dense float64 helpers, stable nonlinearities, seeded RNG and a finite-difference checker.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64.

Randomness
----------
Every generator is ``numpy.random.Generator(PCG64(SeedSequence(key)))`` where
``key`` is the tuple ``(seed, *stream)``. PCG64 with SeedSequence seeding is
documented by numpy as a stable stream, so seeds are portable between machines
running the same numpy release.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import ContractError, NumericError, ShapeError

DTYPE = np.float64


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Deterministic PCG64 generator for ``seed`` and an optional sub-stream key."""
    if seed < 0:
        raise ContractError(f"seed must be non-negative, got {seed}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((int(seed), *map(int, stream)))))


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    m = np.asarray(x, dtype=DTYPE)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply matrices of shapes {a.shape} and {b.shape}")
    return a @ b


def softmax(v, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax along ``axis``."""
    v = np.asarray(v, dtype=DTYPE)
    if v.size == 0 or v.shape[axis] == 0:
        raise ContractError("softmax of an empty vector")
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def logsumexp(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=DTYPE)
    m = v.max(axis=axis, keepdims=True)
    out = m + np.log(np.exp(v - m).sum(axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def sigmoid(x) -> np.ndarray:
    # exp is only ever taken of a non-positive argument
    x = np.asarray(x, dtype=DTYPE)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def tanh(x) -> np.ndarray:
    return np.tanh(np.asarray(x, dtype=DTYPE))


def glorot_uniform(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``f`` receives a perturbed copy of ``x`` with the same shape; the caller's
    array is never modified.
    """
    if h <= 0:
        raise ContractError(f"step h must be positive, got {h}")
    x0 = np.array(x, dtype=DTYPE, copy=True)
    work = x0.copy()
    grad = np.zeros_like(x0)
    flat_w = work.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_w.size):
        orig = flat_w[i]
        flat_w[i] = orig + h
        fp = float(f(work))
        flat_w[i] = orig - h
        fm = float(f(work))
        flat_w[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value near entry {np.unravel_index(i, x0.shape)}")
        flat_g[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)`` over a whole tensor."""
    a = np.asarray(analytic, dtype=DTYPE)
    n = np.asarray(numeric, dtype=DTYPE)
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(n)), floor)
    return float(np.linalg.norm(a - n)) / scale
