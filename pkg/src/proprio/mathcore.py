"""Deterministic numeric utilities shared across the package.

Every stochastic site in the codebase draws from a labeled substream of a
single root seed (no ambient randomness), so that a run is fully determined
by its config. Substreams are built on numpy's counter-based Philox
generator: the label is hashed into the key, which makes distinct labels
statistically independent and the whole scheme order-insensitive.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["split_rng", "logsumexp", "softmax"]


def split_rng(seed: int, label: str) -> np.random.Generator:
    """Independent, reproducible generator for (seed, label).

    Same pair always yields the same stream; distinct labels yield
    independent streams even under the same seed.
    """
    digest = hashlib.sha256(f"{seed}:{label}".encode("utf-8")).digest()
    key = np.frombuffer(digest[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def logsumexp(v) -> float:
    """Overflow-safe log(sum(exp(v))) along the last axis."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("logsumexp of empty input")
    m = np.max(v, axis=-1, keepdims=True)
    out = m[..., 0] + np.log(np.sum(np.exp(v - m), axis=-1))
    return float(out) if out.ndim == 0 else out


def softmax(v, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax; rows sum to 1 within 1e-12."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("softmax of empty input")
    m = np.max(v, axis=axis, keepdims=True)
    e = np.exp(v - m)
    return e / np.sum(e, axis=axis, keepdims=True)
