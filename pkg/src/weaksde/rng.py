"""Reproducible per-trajectory random streams.

Every trajectory owns an MT19937 engine seeded from ``(master_seed,
trajectory_index)`` through one SplitMix64 round, so a trajectory's Brownian
path depends only on its index and never on scheduling or batch layout.

Uniforms follow ``genrand_res53`` (two 32-bit words per double). Normals use
the cosine branch of Box-Muller with ``u1 = 1 - res53`` in ``(0, 1]`` and
``u2 = res53`` in ``[0, 1)``; each normal consumes exactly two doubles.

The engine loops are compiled with numba; bit-for-bit they match numpy's
legacy ``RandomState(seed).random_sample``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

__all__ = [
    "derive_seed",
    "box_muller",
    "RngStream",
    "StreamBatch",
    "BrownianIncrements",
    "derive_stream",
    "next_uniform",
    "next_standard_normal",
    "brownian_path",
]

_N = 624
_M = 397
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_LOW32 = np.uint64(0xFFFFFFFF)


def derive_seed(master_seed: int, trajectory_index) -> np.ndarray:
    """32-bit MT seed(s): low word of ``splitmix64(seed ^ (index * golden))``.

    Accepts a scalar index or an array of indices; arithmetic wraps mod 2**64.
    """
    if not 0 <= int(master_seed) < 2**32:
        raise ValueError("master_seed must be a 32-bit unsigned integer")
    idx = np.asarray(trajectory_index, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(master_seed) ^ (idx * _GOLDEN)
        z = z + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        z = z ^ (z >> np.uint64(31))
    return (z & _LOW32).astype(np.int64)


# -- compiled MT19937 kernels -------------------------------------------------
# State words are held in int64 so that every intermediate stays integral
# under numba's type unification (uint64 mixed with int64 promotes to float).

@numba.njit(cache=True)
def _init_genrand(seed, mt):
    mt[0] = seed & 0xFFFFFFFF
    for i in range(1, _N):
        prev = mt[i - 1]
        mt[i] = (1812433253 * (prev ^ (prev >> 30)) + i) & 0xFFFFFFFF


@numba.njit(cache=True)
def _twist(mt):
    for i in range(_N - _M):
        y = (mt[i] & 0x80000000) | (mt[i + 1] & 0x7FFFFFFF)
        mt[i] = mt[i + _M] ^ (y >> 1) ^ ((y & 1) * 0x9908B0DF)
    for i in range(_N - _M, _N - 1):
        y = (mt[i] & 0x80000000) | (mt[i + 1] & 0x7FFFFFFF)
        mt[i] = mt[i + _M - _N] ^ (y >> 1) ^ ((y & 1) * 0x9908B0DF)
    y = (mt[_N - 1] & 0x80000000) | (mt[0] & 0x7FFFFFFF)
    mt[_N - 1] = mt[_M - 1] ^ (y >> 1) ^ ((y & 1) * 0x9908B0DF)


@numba.njit(cache=True, inline="always")
def _genrand_int32(mt, pos):
    if pos >= _N:
        _twist(mt)
        pos = 0
    y = mt[pos]
    y ^= y >> 11
    y ^= (y << 7) & 0x9D2C5680
    y ^= (y << 15) & 0xEFC60000
    y ^= y >> 18
    return y, pos + 1


@numba.njit(cache=True, inline="always")
def _res53(mt, pos):
    a, pos = _genrand_int32(mt, pos)
    b, pos = _genrand_int32(mt, pos)
    return ((a >> 5) * 67108864.0 + (b >> 6)) / 9007199254740992.0, pos


@numba.njit(cache=True)
def box_muller(a, b):
    """Cosine-branch Box-Muller from two ``res53`` doubles ``a, b`` in [0, 1)."""
    return math.sqrt(-2.0 * math.log(1.0 - a)) * math.cos(2.0 * math.pi * b)


@numba.njit(cache=True)
def _seed_all(seeds, states, pos):
    for k in range(seeds.shape[0]):
        _init_genrand(seeds[k], states[k])
        pos[k] = _N


@numba.njit(cache=True)
def _fill_uniforms(states, pos, out):
    for k in range(out.shape[0]):
        mt = states[k]
        p = pos[k]
        for j in range(out.shape[1]):
            out[k, j], p = _res53(mt, p)
        pos[k] = p


@numba.njit(cache=True)
def _fill_normals(states, pos, out):
    for k in range(out.shape[0]):
        mt = states[k]
        p = pos[k]
        for j in range(out.shape[1]):
            a, p = _res53(mt, p)
            b, p = _res53(mt, p)
            out[k, j] = box_muller(a, b)
        pos[k] = p


class StreamBatch:
    """A block of independent streams for consecutive trajectory indices.

    Row ``k`` is the stream of trajectory ``indices[k]``; drawing from the
    batch advances every stream by the same amount.
    """

    def __init__(self, master_seed: int, indices) -> None:
        self.master_seed = int(master_seed)
        self.indices = np.atleast_1d(np.asarray(indices, dtype=np.uint64))
        self.seeds = derive_seed(self.master_seed, self.indices)
        self._states = np.empty((self.indices.size, _N), dtype=np.int64)
        self._pos = np.empty(self.indices.size, dtype=np.int64)
        _seed_all(self.seeds, self._states, self._pos)

    @classmethod
    def from_range(cls, master_seed: int, start: int, count: int) -> "StreamBatch":
        start = int(start)
        idx = np.arange(count, dtype=np.uint64) + np.uint64(start)
        return cls(master_seed, idx)

    def __len__(self) -> int:
        return self.indices.size

    def uniforms(self, count: int) -> np.ndarray:
        out = np.empty((len(self), count))
        _fill_uniforms(self._states, self._pos, out)
        return out

    def standard_normals(self, count: int) -> np.ndarray:
        out = np.empty((len(self), count))
        _fill_normals(self._states, self._pos, out)
        return out


class RngStream(StreamBatch):
    """The stream of a single trajectory."""

    def __init__(self, master_seed: int, trajectory_index: int) -> None:
        super().__init__(master_seed, [int(trajectory_index)])

    @property
    def trajectory_index(self) -> int:
        return int(self.indices[0])


def derive_stream(master_seed: int, trajectory_index: int) -> RngStream:
    return RngStream(master_seed, trajectory_index)


def next_uniform(stream: RngStream) -> float:
    return float(stream.uniforms(1)[0, 0])


def next_standard_normal(stream: RngStream) -> float:
    return float(stream.standard_normals(1)[0, 0])


@dataclass(frozen=True)
class BrownianIncrements:
    dim_noise: int
    step_size: float
    values: np.ndarray  # (n_steps, dim_noise), entries ~ N(0, step_size)

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]


def brownian_path(stream: StreamBatch, n_steps: int, dim_noise: int, step_size: float) -> BrownianIncrements:
    """Draw ``n_steps`` increments, step-major then component, as ``z * sqrt(h)``.

    With a multi-stream batch the values have a leading batch axis.
    """
    if n_steps < 1 or dim_noise < 1:
        raise ValueError("n_steps and dim_noise must be positive")
    if step_size <= 0:
        raise ValueError("step_size must be positive")
    z = stream.standard_normals(n_steps * dim_noise)
    values = z.reshape(len(stream), n_steps, dim_noise) * math.sqrt(step_size)
    if isinstance(stream, RngStream):
        values = values[0]
    return BrownianIncrements(dim_noise, float(step_size), values)
