"""Counter-based 64-bit random streams.

Every draw is a pure function of ``(key, counter)``, so realizations are
reproducible bit-for-bit and independent trials never share state.

Word ``k`` of a stream keyed by ``key`` is the SplitMix64 finalizer applied to
``key + (k + 1) * 0x9E3779B97F4A7C15`` (mod 2**64).  Uniforms take the top 53
bits of a word.  Gaussians use Box-Muller on consecutive word pairs
``(u1, u2)`` with ``u1`` mapped to (0, 1]; each pair yields ``r*cos`` then
``r*sin``.
"""

from __future__ import annotations

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _finalize(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def splitmix64(x: int) -> int:
    """One SplitMix64 step on a Python integer, returned as an unsigned 64-bit int."""
    z = np.uint64((int(x) + int(GOLDEN)) & _MASK64)
    return int(_finalize(np.asarray(z, dtype=np.uint64)))


def derive_seed(master_seed: int, *path: int) -> int:
    """Mix a master seed with integer labels (trial index, stream id, ...).

    ``h = splitmix64(master)``, then ``h = splitmix64(splitmix64(h) ^ label)``
    per label.  The extra step keeps the mix asymmetric, so ``(m, t)`` and
    ``(t, m)`` give different seeds.
    """
    h = splitmix64(int(master_seed) & _MASK64)
    for p in path:
        h = splitmix64(splitmix64(h) ^ (int(p) & _MASK64))
    return h


class CounterStream:
    """A keyed stream of 64-bit words; the only mutable part is the counter."""

    def __init__(self, key: int, counter: int = 0):
        self.key = int(key) & _MASK64
        self.counter = int(counter)

    def words(self, n: int) -> np.ndarray:
        k = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _finalize(np.uint64(self.key) + k * GOLDEN)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) with 53 random bits each."""
        return (self.words(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, n: int) -> np.ndarray:
        """``n`` standard normal draws by Box-Muller."""
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log(1.0 - u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.empty((pairs, 2))
        z[:, 0] = r * np.cos(theta)
        z[:, 1] = r * np.sin(theta)
        return z.reshape(-1)[:n]
