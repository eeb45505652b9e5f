"""Dense float32 kernels used by the toy decoder.

Everything here is a pure function over numpy arrays; nothing knows about
caches or tokens.
"""
from __future__ import annotations

import numpy as np

__all__ = ["matmul", "masked_softmax_rows", "rmsnorm", "rope_apply", "argmax_row"]


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """float32 matrix product. Raises ValueError on dimension mismatch."""
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-d operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def masked_softmax_rows(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise softmax where only mask==True cells participate.

    Masked cells come out exactly 0. Uses max-subtraction for stability.
    A row with every cell masked is rejected.
    """
    scores = np.asarray(scores, dtype=np.float32)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != scores.shape:
        raise ValueError("mask shape must equal scores shape")
    if not mask.any(axis=-1).all():
        raise ValueError("softmax row with every cell masked")
    shifted = np.where(mask, scores, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    expd = np.where(mask, np.exp(shifted), 0.0).astype(np.float32)
    return expd / expd.sum(axis=-1, keepdims=True)


def rmsnorm(x: np.ndarray, gain: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """RMS-normalize the last axis of x and scale by gain."""
    x = np.asarray(x, dtype=np.float32)
    gain = np.asarray(gain, dtype=np.float32)
    if x.shape[-1] != gain.shape[-1] or gain.ndim != 1:
        raise ValueError("gain must be a vector matching the last axis of x")
    if eps <= 0:
        raise ValueError("eps must be positive")
    ms = np.mean(np.square(x), axis=-1, keepdims=True)
    return (x * gain / np.sqrt(ms + np.float32(eps))).astype(np.float32)


def rope_apply(x: np.ndarray, position: int, base: float = 10000.0) -> np.ndarray:
    """Rotary positional encoding: rotate pair (x[2i], x[2i+1]) by
    position * base**(-2i/len(x))."""
    x = np.asarray(x, dtype=np.float32)
    d = x.shape[-1]
    if d % 2 != 0:
        raise ValueError("rope_apply requires an even-length vector")
    idx = np.arange(d // 2, dtype=np.float64)
    angles = position * base ** (-2.0 * idx / d)
    cos = np.cos(angles).astype(np.float32)
    sin = np.sin(angles).astype(np.float32)
    x0 = x[..., 0::2]
    x1 = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def argmax_row(row: np.ndarray) -> int:
    """Index of the maximum entry; ties go to the lowest index."""
    row = np.asarray(row)
    if row.size == 0:
        raise ValueError("argmax of an empty row")
    return int(np.argmax(row))
