"""Portable counter-based pseudo-random numbers.

Every stochastic component in this package draws from the SplitMix64
generator below rather than from numpy's bit generators, so seeded runs
produce identical results regardless of platform, OS, or numpy version.

A ``Stream`` is determined entirely by a 64-bit seed plus an optional tuple
of subkeys (ints or strings); drawing advances a local counter, and the
value at counter ``i`` is ``mix(base + (i + 1) * GOLDEN)`` where ``mix`` is
the SplitMix64 finalizer.  Uniforms use the top 53 bits of the output word;
normals use Box-Muller.  Sub-streams are derived with ``spawn`` and are
statistically independent of the parent.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

_INV_2_53 = 1.0 / float(1 << 53)


def _mix_int(z: int) -> int:
    """SplitMix64 finalizer on a plain Python int (mod 2**64)."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


def _key_to_int(key: int | str) -> int:
    """Map a subkey to a 64-bit integer; strings are folded bytewise."""
    if isinstance(key, str):
        h = 0x5851F42D4C957F2D
        for chunk_start in range(0, len(key.encode("utf-8")), 8):
            word = int.from_bytes(key.encode("utf-8")[chunk_start : chunk_start + 8], "little")
            h = _mix_int(h ^ word)
        return h
    return key & _MASK


def derive_seed(seed: int, *keys: int | str) -> int:
    """Derive a 64-bit sub-seed from a seed and a tuple of subkeys."""
    s = _mix_int(seed & _MASK)
    for k in keys:
        s = _mix_int(s ^ _mix_int((_key_to_int(k) + _GOLDEN) & _MASK))
    return s


def _mix_array(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return z ^ (z >> np.uint64(31))


class Stream:
    """Sequential draw interface over the counter-based generator."""

    def __init__(self, seed: int, *keys: int | str):
        self._base = derive_seed(seed, *keys)
        self._pos = 0

    def spawn(self, *keys: int | str) -> "Stream":
        return Stream(self._base, "spawn", *keys)

    def raw(self, count: int) -> np.ndarray:
        """Next ``count`` raw uint64 words."""
        idx = np.arange(self._pos + 1, self._pos + count + 1, dtype=np.uint64)
        self._pos += count
        with np.errstate(over="ignore"):
            counters = np.uint64(self._base) + idx * np.uint64(_GOLDEN)
        return _mix_array(counters)

    def uniform(self, size: int | tuple[int, ...] | None = None) -> np.ndarray | float:
        """Uniform float64 in [0, 1) with 53-bit resolution."""
        shape = _as_shape(size)
        n = int(np.prod(shape)) if shape else 1
        out = (self.raw(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return _shape_out(out, size, shape)

    def normal(self, size: int | tuple[int, ...] | None = None) -> np.ndarray | float:
        """Standard normals via Box-Muller (portable, exact given the stream)."""
        shape = _as_shape(size)
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        raw1 = self.raw(m)
        raw2 = self.raw(m)
        # u1 in (0, 1] so log never sees zero.
        u1 = ((raw1 >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
        u2 = (raw2 >> np.uint64(11)).astype(np.float64) * _INV_2_53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return _shape_out(out, size, shape)

    def integers(self, high: int, size: int | tuple[int, ...] | None = None) -> np.ndarray | int:
        """Integers in [0, high).

        Computed as floor(u * high); the bias is bounded by high / 2**53 and
        is negligible for the ranges used here.
        """
        if high <= 0:
            raise ValueError("high must be positive")
        shape = _as_shape(size)
        n = int(np.prod(shape)) if shape else 1
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        out = np.minimum((u * high).astype(np.int64), high - 1)
        if size is None:
            return int(out[0])
        return out.reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n, dtype=np.int64)
        if n <= 1:
            return perm
        u = (self.raw(n - 1) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        for i in range(n - 1, 0, -1):
            j = min(int(u[n - 1 - i] * (i + 1)), i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def _as_shape(size: int | tuple[int, ...] | None) -> tuple[int, ...]:
    if size is None:
        return (1,)
    if isinstance(size, int):
        return (size,)
    return tuple(size)


def _shape_out(flat: np.ndarray, size, shape: tuple[int, ...]):
    if size is None:
        return float(flat[0])
    return flat.reshape(shape)
