"""Counter-based Gaussian noise streams.

Deviates are a pure function of ``(seed, stream, index)``: nothing is stored
and nothing depends on the order in which streams are read.  This is what
lets particles for different parameter values share driving noise, and lets
a batch of trials be run in any order (or all at once) with identical
results.

The generator is Philox4x64-10 (Salmon et al., Random123).  Block ``b`` of
stream ``s`` under ``seed`` is ``philox(counter=(b, s, 0, 0), key=(seed, 0))``;
each block yields four 64-bit words, turned into four standard normals by
two Box-Muller transforms.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)
_MASK32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_S11 = np.uint64(11)

NORMALS_PER_BLOCK = 4


@numba.njit(cache=True, inline="always")
def _mulhi(a, b):
    a_lo = a & _MASK32
    a_hi = a >> _S32
    b_lo = b & _MASK32
    b_hi = b >> _S32
    lo_lo = a_lo * b_lo
    hi_lo = a_hi * b_lo
    lo_hi = a_lo * b_hi
    hi_hi = a_hi * b_hi
    cross = (lo_lo >> _S32) + (hi_lo & _MASK32) + lo_hi
    return hi_hi + (hi_lo >> _S32) + (cross >> _S32)


@numba.njit(cache=True)
def _philox_block(c0, c1, c2, c3, k0, k1):
    for rnd in range(10):
        if rnd > 0:
            k0 = k0 + _W0
            k1 = k1 + _W1
        hi0 = _mulhi(_M0, c0)
        lo0 = _M0 * c0
        hi1 = _mulhi(_M1, c2)
        lo1 = _M1 * c2
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return c0, c1, c2, c3


@numba.njit(cache=True)
def _philox_raw(counters, key0, key1):
    n = counters.shape[0]
    out = np.empty((n, 4), dtype=np.uint64)
    for i in range(n):
        r = _philox_block(counters[i, 0], counters[i, 1], counters[i, 2],
                          counters[i, 3], key0, key1)
        out[i, 0] = r[0]
        out[i, 1] = r[1]
        out[i, 2] = r[2]
        out[i, 3] = r[3]
    return out


@numba.njit(cache=True)
def _fill_normals(seed, streams, start, count, out):
    two_pi = 2.0 * np.pi
    k0 = np.uint64(seed)
    k1 = np.uint64(0)
    zero = np.uint64(0)
    for s in range(streams.shape[0]):
        stream = np.uint64(streams[s])
        j = 0
        while j < count:
            idx = start + j
            block = idx // 4
            lane = idx - 4 * block
            r = _philox_block(np.uint64(block), stream, zero, zero, k0, k1)
            # 53 random bits, offset from zero so log() stays finite
            u0 = ((r[0] >> _S11) + 0.5) * (1.0 / 9007199254740992.0)
            u1 = ((r[1] >> _S11) + 0.5) * (1.0 / 9007199254740992.0)
            u2 = ((r[2] >> _S11) + 0.5) * (1.0 / 9007199254740992.0)
            u3 = ((r[3] >> _S11) + 0.5) * (1.0 / 9007199254740992.0)
            rad_a = np.sqrt(-2.0 * np.log(u0))
            rad_b = np.sqrt(-2.0 * np.log(u2))
            z0 = rad_a * np.cos(two_pi * u1)
            z1 = rad_a * np.sin(two_pi * u1)
            z2 = rad_b * np.cos(two_pi * u3)
            z3 = rad_b * np.sin(two_pi * u3)
            while lane < 4 and j < count:
                if lane == 0:
                    out[s, j] = z0
                elif lane == 1:
                    out[s, j] = z1
                elif lane == 2:
                    out[s, j] = z2
                else:
                    out[s, j] = z3
                lane += 1
                j += 1


def philox4x64(counters, key) -> np.ndarray:
    """Raw Philox4x64-10 output for an ``(n, 4)`` array of counters."""
    counters = np.ascontiguousarray(np.atleast_2d(counters), dtype=np.uint64)
    if counters.shape[1] != 4:
        raise ValueError("counters must have shape (n, 4)")
    k0, k1 = (np.uint64(int(k) & 0xFFFFFFFFFFFFFFFF) for k in key)
    return _philox_raw(counters, k0, k1)


def standard_normals(seed: int, streams, start: int, count: int) -> np.ndarray:
    """Deviates ``start .. start+count-1`` of every stream, shape ``(len(streams), count)``."""
    if start < 0 or count < 0:
        raise ValueError("start and count must be non-negative")
    streams = np.ascontiguousarray(np.atleast_1d(streams), dtype=np.uint64)
    out = np.empty((streams.shape[0], count), dtype=np.float64)
    _fill_normals(np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF), streams,
                  int(start), int(count), out)
    return out


def normal_vectors(seed: int, streams, index: int, dim: int) -> np.ndarray:
    """The ``index``-th standard-normal ``dim``-vector of each stream."""
    return standard_normals(seed, streams, index * dim, dim)


@dataclass
class NoiseStream:
    """A cursor over one stream; reads advance ``position``.

    Random access never needs the cursor: ``vector(i)`` is always the same
    deviate regardless of what was read before.
    """

    seed: int
    stream: int
    dim: int = 1
    position: int = 0

    def vector(self, index: int) -> np.ndarray:
        return normal_vectors(self.seed, [self.stream], index, self.dim)[0]

    def next(self) -> np.ndarray:
        v = self.vector(self.position)
        self.position += 1
        return v

    def block(self, n: int) -> np.ndarray:
        """Next ``n`` vectors as an ``(n, dim)`` array."""
        flat = standard_normals(self.seed, [self.stream],
                                self.position * self.dim, n * self.dim)[0]
        self.position += n
        return flat.reshape(n, self.dim)


# Stream-id layout for experiments.  A trial owns 2**40 stream ids; inside a
# trial each role (truth, control filter, estimation filter) owns 2**32.
TRIAL_SHIFT = 40
ROLE_SHIFT = 32
ROLE_TRUTH = 0
ROLE_OBSERVATION = 1
ROLE_CONTROL_FILTER = 2
ROLE_ESTIMATION_FILTER = 3


def stream_id(trial: int, role: int, index: int = 0) -> int:
    if not (0 <= role < 256 and 0 <= index < 2**ROLE_SHIFT and trial >= 0):
        raise ValueError(f"stream id out of range: trial={trial} role={role} index={index}")
    return (int(trial) << TRIAL_SHIFT) | (int(role) << ROLE_SHIFT) | int(index)


def stream_ids(trial: int, role: int, n: int) -> np.ndarray:
    base = stream_id(trial, role, 0)
    return np.uint64(base) + np.arange(n, dtype=np.uint64)
