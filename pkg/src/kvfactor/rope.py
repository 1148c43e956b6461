"""Rotary position embeddings.

Vectors are rotated pairwise: entries (2i, 2i+1) form a plane rotated by
angle pos * base**(-2i/d). The inner product of two rotated vectors then
depends on their positions only through the difference, which is the whole
point of the scheme and is what the shift-invariance tests pin down.
"""

from __future__ import annotations

import numpy as np
from numpy.typing import NDArray

from .errors import ContractViolationError


def pair_frequencies(dim: int, base: float) -> NDArray[np.float64]:
    """Angular frequency for each of the dim/2 rotation planes."""
    if dim <= 0 or dim % 2:
        raise ContractViolationError(f"rope dimension must be even and positive, got {dim}")
    if base <= 0.0:
        raise ContractViolationError(f"rope base must be positive, got {base}")
    return base ** (-np.arange(dim // 2) * 2.0 / dim)


def rope_rotate(vec, pos: int, base: float) -> NDArray[np.float64]:
    """Rotate a single head-dimension vector to position pos."""
    v = np.asarray(vec, dtype=np.float64)
    if v.ndim != 1:
        raise ContractViolationError("rope_rotate expects a 1-D vector")
    if pos < 0:
        raise ContractViolationError(f"position must be nonnegative, got {pos}")
    theta = pos * pair_frequencies(v.shape[0], base)
    cos = np.cos(theta)
    sin = np.sin(theta)
    out = np.empty_like(v)
    even = v[0::2]
    odd = v[1::2]
    out[0::2] = even * cos - odd * sin
    out[1::2] = even * sin + odd * cos
    return out


def rotate_heads(x: NDArray[np.float64], positions: NDArray, base: float) -> NDArray[np.float64]:
    """Rotate a stack of per-position head blocks.

    x has shape (n, heads, d); positions has shape (n,). Returns the rotated
    copy without touching the input.
    """
    n, heads, d = x.shape
    theta = np.asarray(positions, dtype=np.float64)[:, None] * pair_frequencies(d, base)[None, :]
    cos = np.cos(theta)[:, None, :]
    sin = np.sin(theta)[:, None, :]
    out = np.empty_like(x)
    even = x[:, :, 0::2]
    odd = x[:, :, 1::2]
    out[:, :, 0::2] = even * cos - odd * sin
    out[:, :, 1::2] = even * sin + odd * cos
    return out
