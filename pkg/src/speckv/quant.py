"""Group quantization and bit-packed storage for the fast-tier cache copy.

Two schemes live here:
  * B >= 2: uniform affine quantization with zero-point = group min and
    scale = (max - min) / (2**B - 1), round-half-to-even, clamped.
  * B == 1: midpoint quantization. zero-point = (3*min + max)/4 and
    scale = (max - min)/2, so the two reconstruction levels are the
    midpoints of the lower and upper half-ranges. Codes are assigned by
    a threshold at (min + max)/2 (the boundary maps up), not by rounding.

Scale/zero pairs are serialized at 16-bit precision in snapshots; in-memory
arithmetic keeps full precision so the reconstruction levels are exact.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "QuantParams",
    "PackedGroup",
    "quant_params",
    "quantize_group",
    "dequantize_group",
    "pack_codes",
    "unpack_codes",
    "quantize_per_channel",
    "quantize_per_token",
]

_SUPPORTED_BITS = (1, 2, 4)


def _check_bits(bits: int) -> None:
    if bits not in _SUPPORTED_BITS:
        raise ValueError(f"unsupported bit width {bits!r}; expected one of {_SUPPORTED_BITS}")


@dataclass(frozen=True)
class QuantParams:
    """Per-group zero-point and scale."""

    zero: float
    scale: float
    bits: int

    def __post_init__(self) -> None:
        _check_bits(self.bits)
        if self.scale < 0:
            raise ValueError("scale must be non-negative")

    @property
    def degenerate(self) -> bool:
        """True for a constant group (max == min); every code is 0."""
        return self.scale == 0.0


def quant_params(group: np.ndarray, bits: int) -> QuantParams:
    """Compute zero-point and scale for one group of values."""
    _check_bits(bits)
    group = np.asarray(group, dtype=np.float64)
    if group.size == 0:
        raise ValueError("cannot quantize an empty group")
    lo = float(group.min())
    hi = float(group.max())
    if bits == 1:
        zero = (3.0 * lo + hi) / 4.0
        scale = (hi - lo) / 2.0
    else:
        zero = lo
        scale = (hi - lo) / float((1 << bits) - 1)
    return QuantParams(zero=zero, scale=scale, bits=bits)


def quantize_group(group: np.ndarray, params: QuantParams) -> np.ndarray:
    """Map a group of reals to integer codes in [0, 2**B - 1]."""
    group = np.asarray(group, dtype=np.float64)
    if params.degenerate:
        return np.zeros(group.shape, dtype=np.uint8)
    if params.bits == 1:
        # threshold at the midpoint between the two levels == (min + max)/2
        threshold = params.zero + params.scale / 2.0
        return (group >= threshold).astype(np.uint8)
    top = (1 << params.bits) - 1
    codes = np.rint((group - params.zero) / params.scale)
    return np.clip(codes, 0, top).astype(np.uint8)


def dequantize_group(codes: np.ndarray, params: QuantParams) -> np.ndarray:
    """Reconstruct code * scale + zero as float32."""
    codes = np.asarray(codes)
    return (codes.astype(np.float64) * params.scale + params.zero).astype(np.float32)


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """Pack codes least-significant-bits-first: code i occupies bit range
    [i*B, (i+1)*B) of the byte stream."""
    _check_bits(bits)
    codes = np.asarray(codes, dtype=np.uint8)
    if codes.size and int(codes.max()) >= (1 << bits):
        raise ValueError(f"code out of range for {bits}-bit packing")
    per_byte = 8 // bits
    n_bytes = (codes.size + per_byte - 1) // per_byte
    padded = np.zeros(n_bytes * per_byte, dtype=np.uint16)
    padded[: codes.size] = codes
    shifts = np.arange(per_byte, dtype=np.uint16) * bits
    packed = (padded.reshape(-1, per_byte) << shifts).sum(axis=1)
    return packed.astype(np.uint8).tobytes()


def unpack_codes(data: bytes, count: int, bits: int) -> np.ndarray:
    """Inverse of pack_codes. Rejects a truncated byte stream."""
    _check_bits(bits)
    needed = (count * bits + 7) // 8
    if len(data) < needed:
        raise ValueError(f"truncated byte stream: need {needed} bytes, got {len(data)}")
    per_byte = 8 // bits
    raw = np.frombuffer(bytes(data[:needed]), dtype=np.uint8)
    shifts = np.arange(per_byte, dtype=np.uint8) * bits
    mask = (1 << bits) - 1
    codes = ((raw[:, None] >> shifts) & mask).reshape(-1)
    return codes[:count].astype(np.uint8)


@dataclass(frozen=True)
class PackedGroup:
    """One quantized group: packed codes plus its scale/zero pair."""

    codes: bytes
    params: QuantParams
    count: int

    def __post_init__(self) -> None:
        expected = (self.count * self.params.bits + 7) // 8
        if len(self.codes) != expected:
            raise ValueError(f"packed group needs {expected} bytes, got {len(self.codes)}")

    @classmethod
    def from_values(cls, values: np.ndarray, bits: int) -> "PackedGroup":
        values = np.asarray(values, dtype=np.float32)
        params = quant_params(values, bits)
        codes = quantize_group(values, params)
        return cls(codes=pack_codes(codes, bits), params=params, count=int(values.size))

    def dequantize(self) -> np.ndarray:
        codes = unpack_codes(self.codes, self.count, self.params.bits)
        return dequantize_group(codes, self.params)

    def snapshot(self) -> dict:
        """Normative serialized form: hex codes plus fp16 scale/zero."""
        zero16 = np.float16(self.params.zero)
        scale16 = np.float16(self.params.scale)
        return {
            "codes": self.codes.hex(),
            "count": self.count,
            "bits": self.params.bits,
            "zero_fp16": zero16.tobytes().hex(),
            "scale_fp16": scale16.tobytes().hex(),
        }


def quantize_per_channel(block: np.ndarray, bits: int) -> list[PackedGroup]:
    """Key layout: one group per channel, spanning all tokens of the block.

    block has shape (tokens, channels); returns one PackedGroup per channel.
    """
    block = np.asarray(block, dtype=np.float32)
    return [PackedGroup.from_values(block[:, c], bits) for c in range(block.shape[1])]


def dequantize_per_channel(groups: list[PackedGroup]) -> np.ndarray:
    cols = [g.dequantize() for g in groups]
    return np.stack(cols, axis=1)


def quantize_per_token(block: np.ndarray, bits: int, group_size: int) -> list[list[PackedGroup]]:
    """Value layout: per token, groups of up to group_size consecutive channels."""
    block = np.asarray(block, dtype=np.float32)
    if group_size <= 0:
        raise ValueError("group_size must be positive")
    out: list[list[PackedGroup]] = []
    for row in block:
        chunks = [row[i : i + group_size] for i in range(0, row.size, group_size)]
        out.append([PackedGroup.from_values(chunk, bits) for chunk in chunks])
    return out


def dequantize_per_token(rows: list[list[PackedGroup]]) -> np.ndarray:
    return np.stack([np.concatenate([g.dequantize() for g in row]) for row in rows])


def round_trip_error_bound(params: QuantParams, lo: float, hi: float) -> float:
    """Worst-case per-element reconstruction error for a group with the
    given min/max: scale/2 for B >= 2, (max - min)/4 for B == 1."""
    if params.bits == 1:
        return (hi - lo) / 4.0
    return params.scale / 2.0
