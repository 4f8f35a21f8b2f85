"""Counter-based Philox4x32-10 streams.

Each random draw is a pure function of ``(seed, stream, counter)``, so the
draws consumed by a walker depend only on its path index and step number and
never on how paths are split into batches or workers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

PHILOX_M0 = 0xD2511F53
PHILOX_M1 = 0xCD9E8D57
PHILOX_W0 = 0x9E3779B9
PHILOX_W1 = 0xBB67AE85
_MASK32 = 0xFFFFFFFF
_TWO53 = 2.0**-53


@numba.njit(cache=True, inline="always")
def _philox10(c0, c1, c2, c3, k0, k1):
    for _ in range(10):
        p0 = numba.uint64(PHILOX_M0) * numba.uint64(c0)
        p1 = numba.uint64(PHILOX_M1) * numba.uint64(c2)
        hi0 = numba.uint32(p0 >> numba.uint64(32))
        lo0 = numba.uint32(p0 & numba.uint64(_MASK32))
        hi1 = numba.uint32(p1 >> numba.uint64(32))
        lo1 = numba.uint32(p1 & numba.uint64(_MASK32))
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
        k0 = numba.uint32(k0 + numba.uint32(PHILOX_W0))
        k1 = numba.uint32(k1 + numba.uint32(PHILOX_W1))
    return c0, c1, c2, c3


@numba.njit(cache=True)
def _philox_many(counters, key):
    out = np.empty_like(counters)
    k0, k1 = key[0], key[1]
    for i in range(counters.shape[0]):
        c = counters[i]
        out[i, 0], out[i, 1], out[i, 2], out[i, 3] = _philox10(c[0], c[1], c[2], c[3], k0, k1)
    return out


def philox4x32(counters, key) -> np.ndarray:
    """Philox4x32-10 on an ``(n, 4)`` array of uint32 counters with a 2-word key."""
    c = np.ascontiguousarray(np.atleast_2d(counters), dtype=np.uint32)
    k = np.ascontiguousarray(key, dtype=np.uint32)
    return _philox_many(c, k)


def philox4x32_reference(counter, key) -> tuple[int, int, int, int]:
    """Plain-integer Philox4x32-10 used to cross-check the compiled version."""
    c = [int(x) & _MASK32 for x in counter]
    k0, k1 = (int(x) & _MASK32 for x in key)
    for _ in range(10):
        p0 = PHILOX_M0 * c[0]
        p1 = PHILOX_M1 * c[2]
        c = [(p1 >> 32) ^ c[1] ^ k0, p1 & _MASK32, (p0 >> 32) ^ c[3] ^ k1, p0 & _MASK32]
        k0 = (k0 + PHILOX_W0) & _MASK32
        k1 = (k1 + PHILOX_W1) & _MASK32
    return tuple(c)


def seed_key(seed: int) -> np.ndarray:
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be in [0, 2**64), got {seed}")
    return np.array([seed & _MASK32, seed >> 32], dtype=np.uint32)


@numba.njit(cache=True)
def _hold_and_choice(k0, k1, streams, steps, rate, hold, choice):
    for i in range(streams.shape[0]):
        s = numba.uint64(streams[i])
        t = numba.uint64(steps[i])
        w0, w1, w2, w3 = _philox10(
            numba.uint32(t & numba.uint64(_MASK32)),
            numba.uint32(t >> numba.uint64(32)),
            numba.uint32(s & numba.uint64(_MASK32)),
            numba.uint32(s >> numba.uint64(32)),
            k0,
            k1,
        )
        a = ((numba.uint64(w0) << numba.uint64(32)) | numba.uint64(w1)) >> numba.uint64(11)
        b = ((numba.uint64(w2) << numba.uint64(32)) | numba.uint64(w3)) >> numba.uint64(11)
        # a uniform in (0, 1) for the inverse-CDF exponential, one in [0, 1) for the choice
        u = (np.float64(a) + 0.5) * _TWO53
        hold[i] = -np.log(u) / rate
        choice[i] = np.float64(b) * _TWO53


def hold_and_choice(seed: int, streams, steps, rate: float) -> tuple[np.ndarray, np.ndarray]:
    """Exponential holding time and a uniform per ``(stream, step)`` pair."""
    streams = np.ascontiguousarray(streams, dtype=np.uint64)
    steps = np.ascontiguousarray(steps, dtype=np.uint64)
    key = seed_key(seed)
    hold = np.empty(len(streams))
    choice = np.empty(len(streams))
    _hold_and_choice(key[0], key[1], streams, steps, float(rate), hold, choice)
    return hold, choice


def uniforms(seed: int, streams, steps) -> np.ndarray:
    """Four 32-bit words per ``(stream, step)`` mapped to doubles in [0, 1)."""
    streams = np.asarray(streams, dtype=np.uint64)
    steps = np.asarray(steps, dtype=np.uint64)
    ctr = np.column_stack(
        [steps & _MASK32, steps >> np.uint64(32), streams & _MASK32, streams >> np.uint64(32)]
    ).astype(np.uint32)
    words = philox4x32(ctr, seed_key(seed)).astype(np.float64)
    return words * 2.0**-32


@dataclass
class RngStream:
    """A reproducible stream: draws are addressed by ``(seed, stream, counter)``."""

    seed: int
    stream: int = 0
    counter: int = 0

    def hold_and_choice(self, rate: float) -> tuple[float, float]:
        hold, choice = hold_and_choice(self.seed, [self.stream], [self.counter], rate)
        self.counter += 1
        return float(hold[0]), float(choice[0])

    def random(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1), consuming ``ceil(n / 4)`` counters."""
        blocks = -(-n // 4)
        steps = np.arange(self.counter, self.counter + blocks, dtype=np.uint64)
        self.counter += blocks
        return uniforms(self.seed, np.full(blocks, self.stream), steps).ravel()[:n]
