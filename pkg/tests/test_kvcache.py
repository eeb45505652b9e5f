import math

import numpy as np
import pytest

from speckv import quant
from speckv.kvcache import CacheBudget, TwoTierCache, memory_ratio


def small_cache(bits=2, group_size=32, residual=64, prefetch_k=8, layers=1,
                kv_heads=2, head_dim=4):
    budget = CacheBudget(bits=bits, group_size=group_size, residual=residual,
                         prefetch_k=prefetch_k, context_length=4096)
    return TwoTierCache(layers=layers, kv_heads=kv_heads, head_dim=head_dim,
                        budget=budget)


def fill(cache, layer, n, rng):
    rows = []
    for _ in range(n):
        k = rng.standard_normal((cache.kv_heads, cache.head_dim)).astype(np.float32)
        v = rng.standard_normal((cache.kv_heads, cache.head_dim)).astype(np.float32)
        cache.append_verified(layer, k, v)
        rows.append((k, v))
    return rows


class TestMemoryRatio:
    def test_reference_points(self):
        assert memory_ratio(2, 32, 4096, 128) == 0.22
        assert memory_ratio(2, 64, 32768, 128) == 0.16
        assert memory_ratio(1, 32, 8192, 128) == 0.14

    def test_half_up_not_bankers(self):
        # 2/16 + 2/32 = 0.1875 must display as 0.19
        assert memory_ratio(2, 32, 10**12, 0) == 0.19

    def test_full_precision_no_groups(self):
        assert memory_ratio(16, math.inf, 10**12, 0) == 1.00


class TestCacheBudget:
    def test_rejects_bad_bits(self):
        with pytest.raises(ValueError):
            CacheBudget(bits=3)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            CacheBudget(residual=0)

    def test_ratio_matches_function(self):
        b = CacheBudget(bits=2, group_size=32, residual=64, prefetch_k=64,
                        context_length=4096)
        assert b.ratio() == memory_ratio(2, 32, 4096, 128)


class TestTierBookkeeping:
    def test_residual_migrates_in_groups(self, rng):
        cache = small_cache(group_size=32, residual=64)
        fill(cache, 0, 96, rng)
        # 96 appends: one migration fires at the 96th (residual hits 64+32)
        assert cache.length(0) == 96
        assert cache.quantized_frontier(0) == 32
        assert list(cache.residual_positions(0)) == list(range(32, 96))
        assert list(cache.packed_positions(0)) == list(range(32))

    def test_tiers_always_cover_slow_length(self, rng):
        cache = small_cache(group_size=4, residual=6)
        for n in range(1, 40):
            fill(cache, 0, 1, rng)
            packed = set(cache.packed_positions(0))
            resid = set(cache.residual_positions(0))
            assert packed | resid == set(range(cache.length(0)))
            assert not packed & resid
            assert len(cache._residual_k[0]) < cache.budget.residual + cache.budget.group_size

    def test_migrate_requires_full_group(self):
        cache = small_cache(group_size=8)
        with pytest.raises(ValueError):
            cache.migrate_residual(0)

    def test_row_bytes_example(self):
        # 64 positions, head_dim 128, 1 kv head: 64 * 2 * 128 * 2 = 32768
        cache = TwoTierCache(layers=1, kv_heads=1, head_dim=128,
                             budget=CacheBudget())
        assert cache.row_bytes(64) == 32768
        assert cache.row_bytes(0) == 0


class TestPin:
    def test_pin_respects_budget(self, rng):
        cache = small_cache(group_size=4, residual=4, prefetch_k=2)
        fill(cache, 0, 16, rng)
        with pytest.raises(ValueError):
            cache.pin(0, [0, 1, 2])

    def test_pin_rejects_residual_positions(self, rng):
        cache = small_cache(group_size=4, residual=4, prefetch_k=4)
        fill(cache, 0, 16, rng)
        frontier = cache.quantized_frontier(0)
        with pytest.raises(ValueError):
            cache.pin(0, [frontier])

    def test_pin_replaces_wholesale(self, rng):
        cache = small_cache(group_size=4, residual=4, prefetch_k=4)
        fill(cache, 0, 16, rng)
        cache.pin(0, [0, 1])
        cache.pin(0, [2])
        assert cache.pinned_positions(0) == (2,)

    def test_pin_empty_clears(self, rng):
        cache = small_cache(group_size=4, residual=4, prefetch_k=4)
        fill(cache, 0, 16, rng)
        cache.pin(0, [0])
        cache.pin(0, [])
        assert cache.pinned_positions(0) == ()

    def test_pinned_rows_bitwise_exact(self, rng):
        cache = small_cache(group_size=4, residual=4, prefetch_k=4)
        rows = fill(cache, 0, 16, rng)
        cache.pin(0, [1, 5])
        for head in range(cache.kv_heads):
            keys, values = cache.materialize(0, head)
            for pos in (1, 5):
                assert np.array_equal(keys[pos], rows[pos][0][head])
                assert np.array_equal(values[pos], rows[pos][1][head])


class TestMaterialize:
    def brute_force(self, cache, rows, layer, head):
        """Re-derive the fast tier straight from the appended rows."""
        g = cache.budget.group_size
        frontier = cache.quantized_frontier(layer)
        keys = np.zeros((len(rows), cache.head_dim), dtype=np.float32)
        values = np.zeros_like(keys)
        for start in range(0, frontier, g):
            k_block = np.stack([rows[p][0][head] for p in range(start, start + g)])
            v_block = np.stack([rows[p][1][head] for p in range(start, start + g)])
            if cache.budget.bits == 16:
                keys[start:start + g] = k_block
                values[start:start + g] = v_block
            else:
                keys[start:start + g] = quant.dequantize_per_channel(
                    quant.quantize_per_channel(k_block, cache.budget.bits))
                values[start:start + g] = quant.dequantize_per_token(
                    quant.quantize_per_token(v_block, cache.budget.bits, g))
        for p in cache.pinned_positions(layer):
            keys[p] = rows[p][0][head]
            values[p] = rows[p][1][head]
        for p in range(frontier, len(rows)):
            keys[p] = rows[p][0][head]
            values[p] = rows[p][1][head]
        return keys, values

    @pytest.mark.parametrize("bits", [1, 2, 4, 16])
    def test_matches_brute_force(self, bits, rng):
        cache = small_cache(bits=bits, group_size=4, residual=3, prefetch_k=4)
        rows = fill(cache, 0, 19, rng)
        cache.pin(0, [2, 9])
        for head in range(cache.kv_heads):
            keys, values = cache.materialize(0, head)
            exp_k, exp_v = self.brute_force(cache, rows, 0, head)
            assert np.array_equal(keys, exp_k)
            assert np.array_equal(values, exp_v)

    def test_residual_is_verbatim(self, rng):
        cache = small_cache(bits=1, group_size=4, residual=4)
        rows = fill(cache, 0, 10, rng)
        keys, values = cache.materialize(0, 0)
        for p in cache.residual_positions(0):
            assert np.array_equal(keys[p], rows[p][0][0])
            assert np.array_equal(values[p], rows[p][1][0])


class TestSlowTier:
    def test_fetch_bitwise_exact(self, rng):
        cache = small_cache(group_size=4, residual=4)
        rows = fill(cache, 0, 12, rng)
        k, v, nbytes = cache.slow_fetch(0, [3, 0, 7])
        for i, p in enumerate([3, 0, 7]):
            assert np.array_equal(k[i], rows[p][0])
            assert np.array_equal(v[i], rows[p][1])
        assert nbytes == cache.row_bytes(3)

    def test_fetch_empty(self, rng):
        cache = small_cache()
        fill(cache, 0, 2, rng)
        k, v, nbytes = cache.slow_fetch(0, [])
        assert k.shape == (0, cache.kv_heads, cache.head_dim)
        assert nbytes == 0

    def test_fetch_out_of_range(self, rng):
        cache = small_cache()
        fill(cache, 0, 2, rng)
        with pytest.raises(ValueError):
            cache.slow_fetch(0, [2])

    def test_slow_rows_match_appends(self, rng):
        cache = small_cache(group_size=4, residual=4)
        rows = fill(cache, 0, 9, rng)
        keys, values = cache.slow_rows(0, 1)
        assert np.array_equal(keys, np.stack([r[0][1] for r in rows]))
        assert np.array_equal(values, np.stack([r[1][1] for r in rows]))


class TestSnapshot:
    def test_snapshot_shape(self, rng):
        cache = small_cache(bits=2, group_size=4, residual=4)
        fill(cache, 0, 12, rng)
        snap = cache.snapshot()
        layer = snap["layers"][0]
        assert layer["quantized_frontier"] == cache.quantized_frontier(0)
        assert len(layer["blocks"]) == cache.quantized_frontier(0) // 4
        blk = layer["blocks"][0]
        assert blk["bits"] == 2
        head = blk["heads"][0]
        assert len(head["key_groups"]) == cache.head_dim
        assert all("zero_fp16" in g for g in head["key_groups"])

    def test_full_precision_snapshot(self, rng):
        cache = small_cache(bits=16, group_size=4, residual=4)
        fill(cache, 0, 8, rng)
        blk = cache.snapshot()["layers"][0]["blocks"][0]
        assert "keys_fp16" in blk["heads"][0]
