"""Two-tier KV cache.

The slow tier keeps every verified token's key/value rows at full precision
(append-only, one entry per position). The fast tier keeps a quantized copy
of older positions, a full-precision residual window of the most recent
tokens, and up to k pinned full-precision overrides fetched from the slow
tier.

Residual policy: the residual holds at most r + g - 1 tokens; when an append
brings it to r + g, the oldest g tokens are group-quantized (keys
per-channel, values per-token) and move to the packed store.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from decimal import Decimal, ROUND_HALF_UP

import numpy as np

from . import quant

__all__ = ["CacheBudget", "TwoTierCache", "memory_ratio"]

FULL_PRECISION_BITS = 16
_VALID_BITS = (1, 2, 4, FULL_PRECISION_BITS)


@dataclass(frozen=True)
class CacheBudget:
    """Knobs that determine the resident cache footprint."""

    bits: int = 2
    group_size: int = 32
    residual: int = 64
    prefetch_k: int = 64
    context_length: int = 4096

    def __post_init__(self) -> None:
        if self.bits not in _VALID_BITS:
            raise ValueError(f"bits must be one of {_VALID_BITS}")
        for name in ("group_size", "residual", "prefetch_k", "context_length"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def ratio(self) -> float:
        return memory_ratio(
            self.bits,
            self.group_size,
            self.context_length,
            self.residual + self.prefetch_k,
        )


def memory_ratio(bits: int, group_size: float, context_length: int, resident_extra: int) -> float:
    """Resident KV footprint relative to an uncompressed 16-bit cache:
    bits/16 for the codes, 2/g for the per-group scale/zero pair, and
    (r + k)/L for the full-precision residual window plus pinned slots.
    Rounded to 2 decimals (half up) for table display.
    """
    raw = bits / 16.0 + (0.0 if math.isinf(group_size) else 2.0 / group_size)
    raw += resident_extra / context_length
    return float(Decimal(repr(raw)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


@dataclass
class _PackedBlock:
    """group_size consecutive token positions, quantized per kv head.

    For a 16-bit fast tier the block keeps verbatim float32 copies instead
    of codes.
    """

    start: int
    count: int
    bits: int
    # per head: list of key PackedGroups (one per channel) or a raw array
    keys: list = field(default_factory=list)
    # per head: per-token channel groups or a raw array
    values: list = field(default_factory=list)

    def keys_for(self, head: int) -> np.ndarray:
        if self.bits == FULL_PRECISION_BITS:
            return self.keys[head].copy()
        return quant.dequantize_per_channel(self.keys[head])

    def values_for(self, head: int) -> np.ndarray:
        if self.bits == FULL_PRECISION_BITS:
            return self.values[head].copy()
        return quant.dequantize_per_token(self.values[head])

    def snapshot(self) -> dict:
        if self.bits == FULL_PRECISION_BITS:
            heads = [
                {
                    "keys_fp16": np.asarray(k, dtype=np.float16).tobytes().hex(),
                    "values_fp16": np.asarray(v, dtype=np.float16).tobytes().hex(),
                }
                for k, v in zip(self.keys, self.values)
            ]
        else:
            heads = [
                {
                    "key_groups": [g.snapshot() for g in self.keys[h]],
                    "value_rows": [[g.snapshot() for g in row] for row in self.values[h]],
                }
                for h in range(len(self.keys))
            ]
        return {"start": self.start, "count": self.count, "bits": self.bits, "heads": heads}


class TwoTierCache:
    """Per-layer slow tier (full precision) + fast tier (packed, residual,
    pinned). Single writer; the slow tier is append-only."""

    def __init__(self, layers: int, kv_heads: int, head_dim: int, budget: CacheBudget):
        if layers <= 0 or kv_heads <= 0 or head_dim <= 0:
            raise ValueError("layers, kv_heads and head_dim must be positive")
        self.layers = layers
        self.kv_heads = kv_heads
        self.head_dim = head_dim
        self.budget = budget
        self._slow_k: list[list[np.ndarray]] = [[] for _ in range(layers)]
        self._slow_v: list[list[np.ndarray]] = [[] for _ in range(layers)]
        self._packed: list[list[_PackedBlock]] = [[] for _ in range(layers)]
        self._residual_k: list[list[np.ndarray]] = [[] for _ in range(layers)]
        self._residual_v: list[list[np.ndarray]] = [[] for _ in range(layers)]
        self._pinned: list[dict[int, tuple[np.ndarray, np.ndarray]]] = [{} for _ in range(layers)]
        self._frontier = [0] * layers

    # -- bookkeeping -------------------------------------------------------

    def length(self, layer: int) -> int:
        return len(self._slow_k[layer])

    def quantized_frontier(self, layer: int) -> int:
        return self._frontier[layer]

    def packed_positions(self, layer: int) -> range:
        return range(self._frontier[layer])

    def residual_positions(self, layer: int) -> range:
        return range(self._frontier[layer], self.length(layer))

    def pinned_positions(self, layer: int) -> tuple[int, ...]:
        return tuple(sorted(self._pinned[layer]))

    def row_bytes(self, positions: int) -> int:
        # 16-bit storage accounting: 2 bytes/element, key + value rows.
        return positions * 2 * self.head_dim * 2 * self.kv_heads

    def _check_rows(self, k_rows: np.ndarray, v_rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        k_rows = np.array(k_rows, dtype=np.float32, copy=True)
        v_rows = np.array(v_rows, dtype=np.float32, copy=True)
        want = (self.kv_heads, self.head_dim)
        if k_rows.shape != want or v_rows.shape != want:
            raise ValueError(f"rows must have shape {want}")
        return k_rows, v_rows

    # -- writes ------------------------------------------------------------

    def append_verified(self, layer: int, k_rows: np.ndarray, v_rows: np.ndarray) -> None:
        """Persist one verified token's KV: slow tier + fast-tier residual."""
        k_rows, v_rows = self._check_rows(k_rows, v_rows)
        self._slow_k[layer].append(k_rows)
        self._slow_v[layer].append(v_rows)
        self._residual_k[layer].append(k_rows.copy())
        self._residual_v[layer].append(v_rows.copy())
        budget = self.budget
        while len(self._residual_k[layer]) >= budget.residual + budget.group_size:
            self.migrate_residual(layer)

    def migrate_residual(self, layer: int) -> None:
        """Quantize the oldest group_size residual tokens into the packed store."""
        g = self.budget.group_size
        if len(self._residual_k[layer]) < g:
            raise ValueError("not enough residual tokens to migrate")
        k_block = np.stack(self._residual_k[layer][:g])  # (g, kv_heads, d)
        v_block = np.stack(self._residual_v[layer][:g])
        del self._residual_k[layer][:g]
        del self._residual_v[layer][:g]
        bits = self.budget.bits
        block = _PackedBlock(start=self._frontier[layer], count=g, bits=bits)
        for h in range(self.kv_heads):
            if bits == FULL_PRECISION_BITS:
                block.keys.append(k_block[:, h, :].copy())
                block.values.append(v_block[:, h, :].copy())
            else:
                block.keys.append(quant.quantize_per_channel(k_block[:, h, :], bits))
                block.values.append(quant.quantize_per_token(v_block[:, h, :], bits, g))
        self._packed[layer].append(block)
        self._frontier[layer] += g

    def pin(self, layer: int, positions, k_rows: np.ndarray | None = None,
            v_rows: np.ndarray | None = None) -> None:
        """Replace the pinned set wholesale with full-precision overrides.

        positions must be packed (quantized) positions; rows default to a
        slow-tier fetch when not supplied.
        """
        positions = [int(p) for p in positions]
        if len(positions) > self.budget.prefetch_k:
            raise ValueError("pinned set larger than the prefetch budget")
        frontier = self._frontier[layer]
        for p in positions:
            if p < 0 or p >= self.length(layer):
                raise ValueError(f"position {p} does not exist")
            if p >= frontier:
                raise ValueError(f"position {p} is inside the residual window")
        if k_rows is None or v_rows is None:
            k_rows, v_rows, _ = self.slow_fetch(layer, positions)
        k_rows = np.asarray(k_rows, dtype=np.float32)
        v_rows = np.asarray(v_rows, dtype=np.float32)
        if k_rows.shape != (len(positions), self.kv_heads, self.head_dim):
            raise ValueError("pin rows shape mismatch")
        self._pinned[layer] = {
            p: (k_rows[i].copy(), v_rows[i].copy()) for i, p in enumerate(positions)
        }

    # -- reads -------------------------------------------------------------

    def materialize(self, layer: int, head: int) -> tuple[np.ndarray, np.ndarray]:
        """Effective fast-tier keys/values for one kv head over every
        position: dequantized packed rows, overridden at pinned positions,
        followed by the residual verbatim."""
        d = self.head_dim
        key_parts = [blk.keys_for(head) for blk in self._packed[layer]]
        val_parts = [blk.values_for(head) for blk in self._packed[layer]]
        if key_parts:
            keys = np.concatenate(key_parts, axis=0)
            values = np.concatenate(val_parts, axis=0)
        else:
            keys = np.zeros((0, d), dtype=np.float32)
            values = np.zeros((0, d), dtype=np.float32)
        for pos, (k_row, v_row) in self._pinned[layer].items():
            keys[pos] = k_row[head]
            values[pos] = v_row[head]
        if self._residual_k[layer]:
            res_k = np.stack([r[head] for r in self._residual_k[layer]])
            res_v = np.stack([r[head] for r in self._residual_v[layer]])
            keys = np.concatenate([keys, res_k], axis=0)
            values = np.concatenate([values, res_v], axis=0)
        return keys, values

    def slow_fetch(self, layer: int, positions) -> tuple[np.ndarray, np.ndarray, int]:
        """Exact full-precision rows for the given positions plus the byte
        count the transfer would move (16-bit storage accounting)."""
        positions = [int(p) for p in positions]
        n = self.length(layer)
        for p in positions:
            if p < 0 or p >= n:
                raise ValueError(f"position {p} not present in the slow tier")
        if positions:
            k_rows = np.stack([self._slow_k[layer][p] for p in positions])
            v_rows = np.stack([self._slow_v[layer][p] for p in positions])
        else:
            k_rows = np.zeros((0, self.kv_heads, self.head_dim), dtype=np.float32)
            v_rows = np.zeros((0, self.kv_heads, self.head_dim), dtype=np.float32)
        return k_rows, v_rows, self.row_bytes(len(positions))

    def slow_rows(self, layer: int, head: int) -> tuple[np.ndarray, np.ndarray]:
        """Full slow-tier matrices for one head (test/oracle convenience)."""
        if not self._slow_k[layer]:
            d = self.head_dim
            return np.zeros((0, d), dtype=np.float32), np.zeros((0, d), dtype=np.float32)
        keys = np.stack([r[head] for r in self._slow_k[layer]])
        values = np.stack([r[head] for r in self._slow_v[layer]])
        return keys, values

    def snapshot(self) -> dict:
        """Fast-tier dump in the normative packed layout (fp16 params)."""
        return {
            "layers": [
                {
                    "layer": layer,
                    "quantized_frontier": self._frontier[layer],
                    "blocks": [blk.snapshot() for blk in self._packed[layer]],
                }
                for layer in range(self.layers)
            ]
        }
