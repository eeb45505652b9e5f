"""Slow<->fast tier transfer channel.

Models a CPU-to-GPU style link with a bandwidth, a multiplicative penalty
for scattered (non-contiguous) reads, and an optional fixed per-transfer
overhead. Prefetch tickets issued while step t computes must be awaited at
step t+1 for the same layer.

Two modes:
  * SimulatedChannel - single-threaded, rows fetched eagerly at issue time,
    a logical clock charges max(compute, transfer) per step.
  * ThreadedChannel - one background worker actually runs the fetches;
    await_layer blocks until the fetch completes. The logical clock
    bookkeeping is identical so reports stay deterministic.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

__all__ = [
    "ProtocolError",
    "ChannelModel",
    "PrefetchTicket",
    "transfer_time",
    "step_latency",
    "SimulatedChannel",
    "ThreadedChannel",
]


class ProtocolError(RuntimeError):
    """Raised when the issue/await ticket contract is violated."""


@dataclass(frozen=True)
class ChannelModel:
    bandwidth: float = 16e9  # bytes / second
    scatter_penalty: float = 5.0
    fixed_overhead: float = 0.0

    def __post_init__(self) -> None:
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if self.scatter_penalty < 1:
            raise ValueError("scatter_penalty must be >= 1")
        if self.fixed_overhead < 0:
            raise ValueError("fixed_overhead must be >= 0")


@dataclass(frozen=True)
class PrefetchTicket:
    step: int
    layer: int
    positions: tuple[int, ...]
    num_bytes: int  # bytes actually charged (newly pinned positions only)


def transfer_time(num_bytes: float, model: ChannelModel, contiguous: bool) -> float:
    """Seconds to move num_bytes across the channel."""
    if num_bytes < 0:
        raise ValueError("num_bytes must be >= 0")
    factor = 1.0 if contiguous else model.scatter_penalty
    return model.fixed_overhead + num_bytes / model.bandwidth * factor


def step_latency(compute_s: float, transfer_s: float, overlapped: bool) -> float:
    """Per-step latency: max(compute, transfer) when the fetch overlaps
    compute, compute + transfer when it is serialized."""
    if compute_s < 0 or transfer_s < 0:
        raise ValueError("latencies must be >= 0")
    return max(compute_s, transfer_s) if overlapped else compute_s + transfer_s


class SimulatedChannel:
    """Deterministic single-threaded channel with a logical clock."""

    def __init__(self, cache, model: ChannelModel):
        self.cache = cache
        self.model = model
        self.clock = 0.0
        self._pending: dict[tuple[int, int], tuple] = {}
        self._step_seconds: dict[int, float] = {}

    def schedule_prefetch(self, ticket: PrefetchTicket) -> None:
        key = (ticket.step, ticket.layer)
        if key in self._pending:
            raise ProtocolError(f"duplicate ticket for step {ticket.step} layer {ticket.layer}")
        k_rows, v_rows, _ = self.cache.slow_fetch(ticket.layer, ticket.positions)
        self._pending[key] = (ticket.positions, k_rows, v_rows)
        self._step_seconds[ticket.step] = self._step_seconds.get(ticket.step, 0.0) + (
            transfer_time(ticket.num_bytes, self.model, contiguous=False)
            if ticket.num_bytes > 0
            else 0.0
        )

    def await_layer(self, step: int, layer: int):
        key = (step - 1, layer)
        if key not in self._pending:
            raise ProtocolError(f"no ticket was issued at step {step - 1} for layer {layer}")
        return self._pending.pop(key)

    def step_transfer_seconds(self, step: int) -> float:
        return self._step_seconds.get(step, 0.0)

    def end_step(self, step: int, compute_s: float) -> float:
        """Advance the logical clock by the overlapped latency of one step."""
        overlapped = step_latency(compute_s, self.step_transfer_seconds(step), overlapped=True)
        self.clock += overlapped
        return overlapped

    def advance(self, seconds: float) -> None:
        self.clock += seconds

    def close(self) -> None:
        pass


class ThreadedChannel(SimulatedChannel):
    """Background-worker variant: fetches run on a single worker thread and
    await_layer blocks on completion. Clock accounting stays logical."""

    def __init__(self, cache, model: ChannelModel):
        super().__init__(cache, model)
        self._executor = ThreadPoolExecutor(max_workers=1)

    def schedule_prefetch(self, ticket: PrefetchTicket) -> None:
        key = (ticket.step, ticket.layer)
        if key in self._pending:
            raise ProtocolError(f"duplicate ticket for step {ticket.step} layer {ticket.layer}")
        future = self._executor.submit(self.cache.slow_fetch, ticket.layer, ticket.positions)
        self._pending[key] = (ticket.positions, future)
        self._step_seconds[ticket.step] = self._step_seconds.get(ticket.step, 0.0) + (
            transfer_time(ticket.num_bytes, self.model, contiguous=False)
            if ticket.num_bytes > 0
            else 0.0
        )

    def await_layer(self, step: int, layer: int):
        key = (step - 1, layer)
        if key not in self._pending:
            raise ProtocolError(f"no ticket was issued at step {step - 1} for layer {layer}")
        positions, future = self._pending.pop(key)
        k_rows, v_rows, _ = future.result()
        return positions, k_rows, v_rows

    def close(self) -> None:
        self._executor.shutdown(wait=True)
