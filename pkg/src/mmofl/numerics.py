"""Seeded random streams and small dense-vector helpers shared by the simulator."""
from __future__ import annotations

import hashlib
from typing import Callable

import numpy as np


class ZeroNormError(ValueError):
    """Raised when a zero vector is asked to be normalized."""


def _label_key(label) -> int:
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError("stream labels must be nonnegative")
        return int(label)
    digest = hashlib.blake2b(str(label).encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """Counter-based (Philox) generator addressed by a seed plus a label path.

    ``Rng(7).child("data", 3)`` always yields the same stream no matter how
    many draws were taken from the parent or any sibling.
    """

    def __init__(self, seed: int, path: tuple = ()):
        if seed < 0:
            raise ValueError("seed must be nonnegative")
        self.seed = int(seed)
        self.path = tuple(path)
        ss = np.random.SeedSequence(self.seed, spawn_key=tuple(_label_key(p) for p in self.path))
        self.gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *labels) -> "Rng":
        return Rng(self.seed, self.path + labels)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path!r})"


def gaussian(rng: Rng, mean: float, std: float, n: int) -> np.ndarray:
    if std < 0:
        raise ValueError(f"std must be >= 0, got {std}")
    if std == 0:
        return np.full(n, float(mean))
    return rng.gen.normal(mean, std, size=n)


def dirichlet(rng: Rng, alpha: float, k: int) -> np.ndarray:
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k == 1:
        return np.ones(1)
    # gamma draws underflow to all-zero for tiny alpha; fall back to a vertex
    g = rng.gen.standard_gamma(alpha, size=k)
    s = g.sum()
    if not s > 0 or not np.isfinite(s):
        out = np.zeros(k)
        out[rng.gen.integers(k)] = 1.0
        return out
    out = g / s
    return out / out.sum()


def softmax(v) -> np.ndarray:
    """Softmax over the last axis with max-shift stabilization."""
    v = np.asarray(v, dtype=float)
    if v.size == 0 or v.shape[-1] == 0:
        raise ValueError("softmax of an empty vector")
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.size == 0 or v.shape[-1] == 0:
        raise ValueError("log_softmax of an empty vector")
    s = v - v.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def l2_normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0 or not np.isfinite(n):
        raise ZeroNormError("cannot normalize a zero-norm vector")
    return v / n


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if not h > 0:
        raise ValueError("step h must be > 0")
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g
