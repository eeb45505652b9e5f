import numpy as np
import pytest

from speckv.kvcache import CacheBudget, TwoTierCache
from speckv.transfer import (ChannelModel, PrefetchTicket, ProtocolError,
                             SimulatedChannel, ThreadedChannel, step_latency,
                             transfer_time)


def make_cache(rng, n=16):
    cache = TwoTierCache(layers=1, kv_heads=2, head_dim=4,
                         budget=CacheBudget(bits=2, group_size=4, residual=4,
                                            prefetch_k=8))
    for _ in range(n):
        cache.append_verified(0,
                              rng.standard_normal((2, 4)).astype(np.float32),
                              rng.standard_normal((2, 4)).astype(np.float32))
    return cache


class TestTransferTime:
    def test_contiguous(self):
        model = ChannelModel(bandwidth=1e6, scatter_penalty=5.0)
        assert transfer_time(1000, model, contiguous=True) == pytest.approx(1e-3)

    def test_scatter_is_alpha_times_slower(self):
        model = ChannelModel(bandwidth=1e6, scatter_penalty=5.0)
        assert transfer_time(1000, model, contiguous=False) == pytest.approx(5e-3)
        ratio = (transfer_time(1000, model, False)
                 / transfer_time(1000, model, True))
        assert ratio == pytest.approx(5.0)

    def test_fixed_overhead_added(self):
        model = ChannelModel(bandwidth=1e6, scatter_penalty=2.0,
                             fixed_overhead=0.5)
        assert transfer_time(0, model, True) == 0.5
        assert transfer_time(1e6, model, False) == pytest.approx(2.5)

    def test_negative_bytes_rejected(self):
        with pytest.raises(ValueError):
            transfer_time(-1, ChannelModel(), True)

    def test_model_validation(self):
        with pytest.raises(ValueError):
            ChannelModel(bandwidth=0)
        with pytest.raises(ValueError):
            ChannelModel(scatter_penalty=0.5)
        with pytest.raises(ValueError):
            ChannelModel(fixed_overhead=-1)


class TestStepLatency:
    def test_overlapped_is_max(self):
        assert step_latency(3.0, 2.0, overlapped=True) == 3.0
        assert step_latency(2.0, 3.0, overlapped=True) == 3.0

    def test_serialized_is_sum(self):
        assert step_latency(3.0, 2.0, overlapped=False) == 5.0

    def test_overlap_never_worse(self, rng):
        for _ in range(1000):
            c, t = rng.uniform(0, 10, 2)
            assert step_latency(c, t, True) <= step_latency(c, t, False)
            if c > 0 and t > 0:
                assert step_latency(c, t, True) < step_latency(c, t, False)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            step_latency(-1, 0, True)


class TestSimulatedChannel:
    def test_issue_then_await(self, rng):
        cache = make_cache(rng)
        chan = SimulatedChannel(cache, ChannelModel())
        chan.schedule_prefetch(PrefetchTicket(0, 0, (1, 3), cache.row_bytes(2)))
        positions, k, v = chan.await_layer(1, 0)
        assert positions == (1, 3)
        exp_k, exp_v, _ = cache.slow_fetch(0, [1, 3])
        assert np.array_equal(k, exp_k)
        assert np.array_equal(v, exp_v)

    def test_await_without_ticket_is_protocol_error(self, rng):
        chan = SimulatedChannel(make_cache(rng), ChannelModel())
        with pytest.raises(ProtocolError):
            chan.await_layer(1, 0)

    def test_double_await_is_protocol_error(self, rng):
        cache = make_cache(rng)
        chan = SimulatedChannel(cache, ChannelModel())
        chan.schedule_prefetch(PrefetchTicket(0, 0, (), 0))
        chan.await_layer(1, 0)
        with pytest.raises(ProtocolError):
            chan.await_layer(1, 0)

    def test_duplicate_ticket_is_protocol_error(self, rng):
        cache = make_cache(rng)
        chan = SimulatedChannel(cache, ChannelModel())
        chan.schedule_prefetch(PrefetchTicket(0, 0, (), 0))
        with pytest.raises(ProtocolError):
            chan.schedule_prefetch(PrefetchTicket(0, 0, (1,), 10))

    def test_clock_schedule_hand_computed(self, rng):
        cache = make_cache(rng)
        model = ChannelModel(bandwidth=1e3, scatter_penalty=2.0)
        chan = SimulatedChannel(cache, model)
        # step 0: 1000 scattered bytes -> 2.0 s transfer; compute 0.5 s
        chan.schedule_prefetch(PrefetchTicket(0, 0, (0,), 1000))
        assert chan.step_transfer_seconds(0) == pytest.approx(2.0)
        assert chan.end_step(0, compute_s=0.5) == pytest.approx(2.0)
        # step 1: 100 bytes -> 0.2 s transfer; compute 0.5 s dominates
        chan.await_layer(1, 0)
        chan.schedule_prefetch(PrefetchTicket(1, 0, (1,), 100))
        assert chan.end_step(1, compute_s=0.5) == pytest.approx(0.5)
        assert chan.clock == pytest.approx(2.5)

    def test_zero_byte_ticket_is_free(self, rng):
        chan = SimulatedChannel(make_cache(rng),
                                ChannelModel(fixed_overhead=1.0))
        chan.schedule_prefetch(PrefetchTicket(0, 0, (), 0))
        assert chan.step_transfer_seconds(0) == 0.0

    def test_advance(self, rng):
        chan = SimulatedChannel(make_cache(rng), ChannelModel())
        chan.advance(1.5)
        assert chan.clock == 1.5


class TestThreadedChannel:
    def test_matches_simulated(self, rng):
        cache = make_cache(rng)
        sim = SimulatedChannel(cache, ChannelModel(bandwidth=1e3))
        thr = ThreadedChannel(cache, ChannelModel(bandwidth=1e3))
        try:
            for chan in (sim, thr):
                chan.schedule_prefetch(PrefetchTicket(0, 0, (2, 5), 64))
            sp, sk, sv = sim.await_layer(1, 0)
            tp, tk, tv = thr.await_layer(1, 0)
            assert sp == tp
            assert np.array_equal(sk, tk)
            assert np.array_equal(sv, tv)
            assert sim.step_transfer_seconds(0) == thr.step_transfer_seconds(0)
        finally:
            thr.close()

    def test_protocol_errors(self, rng):
        chan = ThreadedChannel(make_cache(rng), ChannelModel())
        try:
            with pytest.raises(ProtocolError):
                chan.await_layer(1, 0)
            chan.schedule_prefetch(PrefetchTicket(0, 0, (), 0))
            with pytest.raises(ProtocolError):
                chan.schedule_prefetch(PrefetchTicket(0, 0, (), 0))
        finally:
            chan.close()
