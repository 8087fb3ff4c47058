"""Dense-vector primitives shared across the simulator.

Vectors are plain ``numpy.ndarray`` objects of dtype float64. All randomness
goes through :func:`make_rng`, which pins the bit generator to PCG64 so that a
seed yields the same stream on every platform numpy supports.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

RNG_ALGORITHM = "numpy.PCG64"
RNG_VERSION = 1


class NumericsError(ValueError):
    """Base class for invalid numerical inputs."""


class DimensionMismatch(NumericsError):
    pass


class ZeroVector(NumericsError):
    pass


class EmptyInput(NumericsError):
    pass


class NonPositiveTemperature(NumericsError):
    pass


class NonFiniteEvaluation(NumericsError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    """Return a generator seeded with ``seed`` (PCG64, stream version 1)."""
    if seed < 0:
        raise ValueError(f"seed must be nonnegative, got {seed}")
    return np.random.Generator(np.random.PCG64(int(seed)))


def derive_seed(*parts: int) -> int:
    """Mix integers into a 63-bit seed; used for per-(client, round) streams."""
    ss = np.random.SeedSequence([int(p) for p in parts])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def as_vec(x: Sequence[float] | np.ndarray) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DimensionMismatch(f"expected a nonempty 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise NonFiniteEvaluation("vector has non-finite entries")
    return v


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between ``a`` and ``b``, clamped to [-1, 1]."""
    a = as_vec(a)
    b = as_vec(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"dims differ: {a.size} vs {b.size}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def softmax_temperature(scores, tau: float) -> np.ndarray:
    """``exp(s/tau)`` normalised to sum to one, with max-subtraction."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise EmptyInput("softmax of an empty score list")
    if not tau > 0:
        raise NonPositiveTemperature(f"tau must be > 0, got {tau}")
    z = s / tau
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def log_softmax_rows(z: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax of a 2-D array."""
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def finite_diff_grad(
    f: Callable[[np.ndarray], float | np.ndarray], x, eps: float = 1e-6
) -> np.ndarray:
    """Central-difference gradient ``(f(x + eps e_k) - f(x - eps e_k)) / 2 eps``.

    ``x`` may have any shape. If ``f`` returns an array of shape ``S`` the
    result has shape ``x.shape + S`` (one gradient per output), which lets
    several losses share the same probes. ``eps`` must lie in [1e-7, 1e-3].
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    rows = []
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        fp = np.asarray(f(x), dtype=np.float64)
        flat[k] = orig - eps
        fm = np.asarray(f(x), dtype=np.float64)
        flat[k] = orig
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise NonFiniteEvaluation(f"f is not finite near coordinate {k}")
        rows.append((fp - fm) / (2.0 * eps))
    out = np.stack(rows) if rows else np.zeros((0,))
    return out.reshape(x.shape + out.shape[1:])
