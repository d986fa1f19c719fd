"""Deterministic numeric substrate shared by every other module.

All arithmetic is 64-bit. Probabilities are clamped to [EPS, 1-EPS] at every
output and before every log, so the log-loss is always finite.
"""

from __future__ import annotations

import numpy as np

# Clamp applied to every probability output and before every log.
EPS = 1e-7

__all__ = [
    "EPS",
    "dense_vec",
    "Rng",
    "stable_sigmoid",
    "softmax",
    "clamped_logloss",
    "logloss_vec",
]


def dense_vec(values) -> np.ndarray:
    """Build an immutable float64 vector, rejecting NaN/Inf entries."""
    v = np.array(values, dtype=np.float64)
    if v.ndim != 1:
        v = v.reshape(-1)
    if not np.all(np.isfinite(v)):
        raise ValueError("dense_vec: non-finite entries are not storable")
    v.flags.writeable = False
    return v


class Rng:
    """Counter-based deterministic PRNG (Philox) owned per run.

    The same seed and the same call sequence always produce the same stream.
    Independent subsystems take named child streams (``rng.child("pretrain")``)
    so the draw order is fixed by construction, not by call timing. An Rng is
    single-owner: never share one instance across concurrent tasks.
    """

    def __init__(self, seed: int):
        seed = int(seed)
        if seed < 0 or seed > 0xFFFFFFFFFFFFFFFF:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        self.seed = seed
        self._gen = np.random.Generator(np.random.Philox(key=seed))

    def child(self, name: str) -> "Rng":
        """Derive an independent stream from (seed, name). Deterministic."""
        import hashlib

        h = hashlib.sha256(f"{self.seed}:{name}".encode()).digest()
        return Rng(int.from_bytes(h[:8], "little"))

    def uniform(self, low: float, high: float, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def shuffle(self, x) -> None:
        self._gen.shuffle(x)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)


def stable_sigmoid(z):
    """1/(1+exp(-z)) without overflow, clamped to [EPS, 1-EPS].

    Accepts scalars or arrays; rejects non-finite input.
    """
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("stable_sigmoid: non-finite input")
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    out = np.clip(out, EPS, 1.0 - EPS)
    return float(out) if out.ndim == 0 else out


def softmax(logits) -> np.ndarray:
    """Stable softmax onto the open simplex; rows on the last axis."""
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0:
        raise ValueError("softmax: empty input")
    if not np.all(np.isfinite(x)):
        raise ValueError("softmax: non-finite input")
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def clamped_logloss(p: float, y: int) -> float:
    """-y*log(p) - (1-y)*log(1-p) with p clamped to [EPS, 1-EPS]."""
    if y not in (0, 1):
        raise ValueError(f"clamped_logloss: label must be 0 or 1, got {y!r}")
    p = min(max(float(p), EPS), 1.0 - EPS)
    if y == 1:
        return -np.log(p)
    return -np.log1p(-p)


def logloss_vec(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Vectorised clamped log-loss; y entries must be 0/1."""
    y = np.asarray(y, dtype=np.float64)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("logloss_vec: labels must be 0 or 1")
    p = np.clip(np.asarray(p, dtype=np.float64), EPS, 1.0 - EPS)
    return -y * np.log(p) - (1.0 - y) * np.log1p(-p)
