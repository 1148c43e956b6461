"""Deterministic random numbers for weight synthesis.

The generator is xorshift64* (Vigna's 64-bit shift-register generator with a
multiplicative output scramble). Seeds pass through one splitmix64 step so
that nearby seeds give uncorrelated streams, and the all-zero state (which
xorshift cannot leave) is remapped to a fixed constant. Gaussian variates
come from the Box-Muller transform applied to pairs of uniforms.

Everything here is integer arithmetic plus IEEE float64 ops, so a given seed
reproduces the same stream bit-for-bit on every run.
"""

from __future__ import annotations

import numpy as np
from numpy.typing import NDArray

_MASK = (1 << 64) - 1
_STAR = 2685821657736338717
_GAMMA = 0x9E3779B97F4A7C15
_ZERO_STATE_FALLBACK = 0x4D595DF4D0F33173


def _splitmix64(x: int) -> int:
    x = (x + _GAMMA) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


class Prng:
    """xorshift64* stream with Box-Muller Gaussian output."""

    def __init__(self, seed: int):
        state = _splitmix64(seed & _MASK)
        self._state = state if state != 0 else _ZERO_STATE_FALLBACK

    def u64(self) -> int:
        """Next raw 64-bit output."""
        s = self._state
        s ^= (s >> 12)
        s ^= (s << 25) & _MASK
        s ^= (s >> 27)
        self._state = s
        return (s * _STAR) & _MASK

    def uniform(self) -> float:
        """Uniform draw in the open interval (0, 1).

        Uses the top 53 bits offset by half an ulp, so log() is always safe.
        """
        return ((self.u64() >> 11) + 0.5) * (2.0 ** -53)

    def uniforms(self, n: int) -> NDArray[np.float64]:
        """n uniform draws in (0, 1) as an array."""
        s = self._state
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            s ^= (s >> 12)
            s ^= (s << 25) & _MASK
            s ^= (s >> 27)
            out[i] = (((s * _STAR) & _MASK) >> 11) + 0.5
        self._state = s
        return out * (2.0 ** -53)

    def normals(self, n: int) -> NDArray[np.float64]:
        """n standard Gaussian draws via Box-Muller.

        Draws ceil(n/2) uniform pairs; the spare half of an odd request is
        discarded so consecutive calls stay aligned with the uniform stream.
        """
        m = (n + 1) // 2
        u1 = self.uniforms(m)
        u2 = self.uniforms(m)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * np.pi) * u2
        z = np.empty(2 * m, dtype=np.float64)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n]

    def gaussian_matrix(self, rows: int, cols: int) -> NDArray[np.float64]:
        """rows x cols matrix of standard Gaussians, row-major fill order."""
        return self.normals(rows * cols).reshape(rows, cols)


def _substream_states(seed: int, streams: int) -> NDArray[np.uint64]:
    x = np.uint64(seed & _MASK) + np.arange(streams, dtype=np.uint64)
    x = x + np.uint64(_GAMMA)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    x = x ^ (x >> np.uint64(31))
    x[x == np.uint64(0)] = np.uint64(_ZERO_STATE_FALLBACK)
    return x


def _uniform_block(states: NDArray[np.uint64], draws: int) -> NDArray[np.float64]:
    out = np.empty((states.shape[0], draws), dtype=np.float64)
    star = np.uint64(_STAR)
    for j in range(draws):
        states ^= states >> np.uint64(12)
        states ^= states << np.uint64(25)
        states ^= states >> np.uint64(27)
        out[:, j] = ((states * star) >> np.uint64(11)).astype(np.float64)
    return (out + 0.5) * (2.0 ** -53)


def substream_normals(seed: int, streams: int, draws: int) -> NDArray[np.float64]:
    """Gaussian block where row i reproduces ``Prng(seed + i).normals(draws)``.

    All streams advance in lockstep as one uint64 vector, so a Monte-Carlo
    sample block costs numpy time instead of Python-loop time, and each
    sample still owns an independent seeded substream. Row equivalence with
    the scalar generator is pinned by tests.
    """
    if streams < 1 or draws < 1:
        raise ValueError("streams and draws must be >= 1")
    states = _substream_states(seed, streams)
    m = (draws + 1) // 2
    u1 = _uniform_block(states, m)
    u2 = _uniform_block(states, m)
    r = np.sqrt(-2.0 * np.log(u1))
    theta = (2.0 * np.pi) * u2
    z = np.empty((streams, 2 * m), dtype=np.float64)
    z[:, 0::2] = r * np.cos(theta)
    z[:, 1::2] = r * np.sin(theta)
    return z[:, :draws]
