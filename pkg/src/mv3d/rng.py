"""Counter-based deterministic RNG (splitmix64 finalizer).

Every stochastic operation in the package takes an explicit stream so that
runs are bit-reproducible from a single 64-bit seed, independent of call
order elsewhere in the program. Streams are cheap value objects; deriving a
child stream never perturbs the parent.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)


def _splitmix(x: np.ndarray) -> np.ndarray:
    """Finalize raw 64-bit counters into well-mixed 64-bit words."""
    with np.errstate(over="ignore"):
        z = (x + _GOLDEN).astype(np.uint64)
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def _fnv1a(text: str) -> np.uint64:
    h = _FNV_OFFSET
    with np.errstate(over="ignore"):
        for byte in text.encode("utf-8"):
            h = (h ^ np.uint64(byte)) * _FNV_PRIME
    return h


class Stream:
    """A single deterministic random stream.

    The stream is a (seed, counter) pair; each draw consumes counter slots.
    ``child(tag)`` derives an independent stream keyed by a string tag using
    an order-insensitive hash, so the same tag always yields the same child.
    """

    def __init__(self, seed: int, _counter: int = 0):
        self.seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self._counter = np.uint64(_counter)

    def child(self, tag: str) -> "Stream":
        with np.errstate(over="ignore"):
            derived = _splitmix(np.asarray(self.seed ^ _fnv1a(tag)))[()]
        return Stream(int(derived))

    def _raw(self, n: int) -> np.ndarray:
        base = np.arange(n, dtype=np.uint64)
        with np.errstate(over="ignore"):
            counters = self.seed * _GOLDEN + self._counter + base
            self._counter += np.uint64(n)
        return _splitmix(counters)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """Uniform doubles in [low, high) with 53-bit resolution."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        out = low + (high - low) * u
        return out.reshape(shape) if shape else out[0]

    def normal(self, shape=(), std: float = 1.0) -> np.ndarray:
        """Standard Box-Muller normals scaled by ``std``."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        u1 = 1.0 - (self._raw(m) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        u2 = (self._raw(m) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])[:n]
        out = std * z
        return out.reshape(shape) if shape else out[0]

    def truncated_normal(self, shape, std: float = 0.02, bound_stds: float = 2.0) -> np.ndarray:
        """Normal(0, std) with samples beyond ``bound_stds`` sigma redrawn."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        out = self.normal(shape)
        for _ in range(64):
            bad = np.abs(out) > bound_stds
            if not bad.any():
                break
            out[bad] = self.normal(int(bad.sum()))
        return std * out.reshape(shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in [low, high); modulo reduction (bias negligible at 64 bit)."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        span = np.uint64(high - low)
        vals = (self._raw(n) % span).astype(np.int64) + low
        return vals.reshape(shape) if shape else int(vals[0])

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) via random-key argsort."""
        return np.argsort(self._raw(n), kind="stable")

    def choice(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), in random order."""
        if k > n:
            raise ValueError(f"cannot choose {k} of {n}")
        return self.permutation(n)[:k]
