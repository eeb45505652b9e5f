"""Toy transformer decoder plus the two-tier speculative decoding loop.

Three phases:
  * prefill  - full-precision causal attention over the prompt; every
    prompt KV goes to the slow tier and seeds the fast tier.
  * predecode - one bootstrap pass over the first output token against the
    fast-tier copy; records the first top-k prefetch set and issues the
    first tickets. Its KV is persisted by the first decode step.
  * decode_step - decodes two rows at once: the verified token (row 0,
    position p) and the speculative token (row 1, position p+1) against
    the fast tier with the awaited top-k rows pinned at full precision.
    Row 0's logits are the output; row 1's attention scores pick the next
    prefetch set. Only row 0's KV is persisted.

Token selection is greedy argmax everywhere, so runs are deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics
from .kvcache import CacheBudget, TwoTierCache
from .model import DecoderConfig, LayerWeights, Weights
from .transfer import (ChannelModel, PrefetchTicket, ProtocolError,
                       SimulatedChannel, ThreadedChannel, step_latency)

__all__ = ["FullCacheDecoder", "SpeculativeDecoder", "StepMetrics",
           "GenerateResult", "select_topk", "generate"]


# -- shared forward pieces ---------------------------------------------------

def _silu(x: np.ndarray) -> np.ndarray:
    return (x / (1.0 + np.exp(-x))).astype(np.float32)


def _qkv(cfg: DecoderConfig, lw: LayerWeights, x: np.ndarray, positions):
    xn = numerics.rmsnorm(x, lw.attn_norm)
    n = x.shape[0]
    q = numerics.matmul(xn, lw.wq).reshape(n, cfg.q_heads, cfg.head_dim)
    k = numerics.matmul(xn, lw.wk).reshape(n, cfg.kv_heads, cfg.head_dim)
    v = numerics.matmul(xn, lw.wv).reshape(n, cfg.kv_heads, cfg.head_dim)
    for i, pos in enumerate(positions):
        q[i] = numerics.rope_apply(q[i], pos, cfg.rope_base)
        k[i] = numerics.rope_apply(k[i], pos, cfg.rope_base)
    return q, k, v


def _attend(cfg: DecoderConfig, q: np.ndarray, keys_by_head, values_by_head,
            mask: np.ndarray):
    """Grouped-query attention. Returns the concatenated head outputs and
    the per-query-head probability rows."""
    scale = np.float32(cfg.head_dim ** -0.5)
    outs, probs = [], []
    for hq in range(cfg.q_heads):
        hk = hq // cfg.group
        scores = numerics.matmul(q[:, hq, :], keys_by_head[hk].T) * scale
        a = numerics.masked_softmax_rows(scores, mask)
        outs.append(numerics.matmul(a, values_by_head[hk]))
        probs.append(a)
    return np.concatenate(outs, axis=1), probs


def _ffn(lw: LayerWeights, x: np.ndarray) -> np.ndarray:
    xn = numerics.rmsnorm(x, lw.ffn_norm)
    return x + numerics.matmul(_silu(numerics.matmul(xn, lw.w1)), lw.w2)


def _logits(weights: Weights, x: np.ndarray) -> np.ndarray:
    return numerics.matmul(numerics.rmsnorm(x, weights.final_norm), weights.head)


def select_topk(scores: np.ndarray, k: int, eligible) -> tuple[int, ...]:
    """The k highest-scoring eligible positions; ties go to the lower
    position; fewer than k eligible returns all of them (sorted)."""
    eligible = np.asarray(sorted(int(p) for p in eligible), dtype=np.int64)
    if k <= 0 or eligible.size == 0:
        return ()
    sub = np.asarray(scores, dtype=np.float64)[eligible]
    order = np.argsort(-sub, kind="stable")  # stable: equal scores keep position order
    picked = eligible[order[: min(k, eligible.size)]]
    return tuple(sorted(int(p) for p in picked))


# -- baseline full-cache decoder --------------------------------------------

class FullCacheDecoder:
    """Greedy decoder over an uncompressed in-memory KV cache. Doubles as
    the oracle for exact-fallback tests and as the trace source for the
    hit-rate study."""

    def __init__(self, config: DecoderConfig, weights: Weights):
        self.config = config
        self.weights = weights
        self._k: list[list[np.ndarray]] = [[] for _ in range(config.layers)]
        self._v: list[list[np.ndarray]] = [[] for _ in range(config.layers)]
        self._pos = 0

    def prefill(self, prompt) -> int:
        cfg = self.config
        prompt = [int(t) for t in prompt]
        if not prompt:
            raise ValueError("prompt must be nonempty")
        if len(prompt) > cfg.max_len:
            raise ValueError("prompt longer than the configured max length")
        x = self.weights.embedding[prompt].copy()
        n = len(prompt)
        mask = np.tril(np.ones((n, n), dtype=bool))
        for layer, lw in enumerate(self.weights.layers):
            q, k, v = _qkv(cfg, lw, x, range(n))
            for i in range(n):
                self._k[layer].append(k[i].copy())
                self._v[layer].append(v[i].copy())
            keys = [k[:, h, :] for h in range(cfg.kv_heads)]
            vals = [v[:, h, :] for h in range(cfg.kv_heads)]
            out, _ = _attend(cfg, q, keys, vals, mask)
            x = _ffn(lw, x + numerics.matmul(out, lw.wo))
        self._pos = n
        return numerics.argmax_row(_logits(self.weights, x[-1:])[0])

    def step(self, token: int, record: bool = False):
        cfg = self.config
        p = self._pos
        x = self.weights.embedding[[int(token)]].copy()
        rows = [] if record else None
        for layer, lw in enumerate(self.weights.layers):
            q, k, v = _qkv(cfg, lw, x, [p])
            self._k[layer].append(k[0].copy())
            self._v[layer].append(v[0].copy())
            keys = [np.stack([r[h] for r in self._k[layer]]) for h in range(cfg.kv_heads)]
            vals = [np.stack([r[h] for r in self._v[layer]]) for h in range(cfg.kv_heads)]
            mask = np.ones((1, p + 1), dtype=bool)
            out, probs = _attend(cfg, q, keys, vals, mask)
            if record:
                rows.append([a[0].copy() for a in probs])
            x = _ffn(lw, x + numerics.matmul(out, lw.wo))
        self._pos = p + 1
        logits = _logits(self.weights, x)[0]
        return numerics.argmax_row(logits), logits, rows

    def generate(self, prompt, steps: int, record_trace: bool = False):
        """Returns (tokens, per-step logits, trace rows). tokens[0] is the
        prefill output; trace rows are indexed [layer][q_head][step]."""
        t = self.prefill(prompt)
        tokens = [t]
        logits_list = []
        trace = [[[] for _ in range(self.config.q_heads)]
                 for _ in range(self.config.layers)] if record_trace else None
        for _ in range(steps):
            t, logits, rows = self.step(t, record=record_trace)
            tokens.append(t)
            logits_list.append(logits)
            if record_trace:
                for layer, per_head in enumerate(rows):
                    for h, row in enumerate(per_head):
                        trace[layer][h].append(row)
        return tokens, logits_list, trace


# -- speculative two-tier decoder --------------------------------------------

@dataclass
class StepMetrics:
    step: int
    token: int
    speculative_hit: bool
    pinned_mass: float
    bytes_fetched: int
    new_pins: int
    tokens_emitted: int = 1


@dataclass
class GenerateResult:
    tokens: list[int]
    logits: list[np.ndarray]
    metrics: list[StepMetrics]
    latency_rows: list[dict]
    prefill_seconds: float
    total_seconds: float
    decoder: "SpeculativeDecoder" = None  # kept for cache inspection


class SpeculativeDecoder:
    """Single-threaded decode state machine over a TwoTierCache; all
    concurrency lives in the transfer channel."""

    def __init__(self, config: DecoderConfig, weights: Weights, budget: CacheBudget,
                 channel_model: ChannelModel | None = None, mode: str = "sim",
                 compute_time_per_step: float = 0.0, prefill_time: float = 0.0):
        if mode not in ("sim", "thread"):
            raise ValueError("mode must be 'sim' or 'thread'")
        self.config = config
        self.weights = weights
        self.budget = budget
        self.cache = TwoTierCache(config.layers, config.kv_heads, config.head_dim, budget)
        cm = channel_model or ChannelModel()
        self.channel = (ThreadedChannel(self.cache, cm) if mode == "thread"
                        else SimulatedChannel(self.cache, cm))
        self.compute_time_per_step = compute_time_per_step
        self.prefill_time = prefill_time
        self._phase = "init"
        self._step = 0
        self._pos = 0
        self._verified = None
        self._speculative = None
        self._prev_pins = [()] * config.layers
        self.predecode_bytes = 0
        self.predecode_new_pins = 0
        self.last_logits: np.ndarray | None = None
        self.debug_scores: list | None = None

    def close(self) -> None:
        self.channel.close()

    # -- phases -------------------------------------------------------------

    def prefill(self, prompt) -> int:
        if self._phase != "init":
            raise ProtocolError("prefill may only run once")
        cfg = self.config
        prompt = [int(t) for t in prompt]
        if not prompt:
            raise ValueError("prompt must be nonempty")
        if len(prompt) > cfg.max_len:
            raise ValueError("prompt longer than the configured max length")
        x = self.weights.embedding[prompt].copy()
        n = len(prompt)
        mask = np.tril(np.ones((n, n), dtype=bool))
        for layer, lw in enumerate(self.weights.layers):
            q, k, v = _qkv(cfg, lw, x, range(n))
            for i in range(n):
                self.cache.append_verified(layer, k[i], v[i])
            keys = [k[:, h, :] for h in range(cfg.kv_heads)]
            vals = [v[:, h, :] for h in range(cfg.kv_heads)]
            out, _ = _attend(cfg, q, keys, vals, mask)
            x = _ffn(lw, x + numerics.matmul(out, lw.wo))
        self._pos = n
        self._verified = numerics.argmax_row(_logits(self.weights, x[-1:])[0])
        self._phase = "prefilled"
        return self._verified

    def predecode(self) -> int:
        """Bootstrap pass: speculative token, first top-k set, first tickets."""
        if self._phase != "prefilled":
            raise ProtocolError("predecode requires a completed prefill")
        cfg = self.config
        p = self._pos
        x = self.weights.embedding[[self._verified]].copy()
        for layer, lw in enumerate(self.weights.layers):
            q, k, v = _qkv(cfg, lw, x, [p])
            keys, vals = [], []
            for h in range(cfg.kv_heads):
                mk, mv = self.cache.materialize(layer, h)
                keys.append(np.concatenate([mk, k[:, h, :]], axis=0))
                vals.append(np.concatenate([mv, v[:, h, :]], axis=0))
            n_cached = keys[0].shape[0] - 1
            mask = np.ones((1, n_cached + 1), dtype=bool)
            out, probs = _attend(cfg, q, keys, vals, mask)
            agg = np.sum([a[0, :n_cached] for a in probs], axis=0)
            self._issue_ticket(layer, agg, is_predecode=True)
            x = _ffn(lw, x + numerics.matmul(out, lw.wo))
        self._speculative = numerics.argmax_row(_logits(self.weights, x)[0])
        self._phase = "decoding"
        self._step = 1
        return self._speculative

    def _issue_ticket(self, layer: int, packed_scores: np.ndarray,
                      is_predecode: bool = False) -> tuple[int, int]:
        eligible = self.cache.packed_positions(layer)
        picked = select_topk(packed_scores, self.budget.prefetch_k, eligible)
        prev = set(self._prev_pins[layer])
        new = [pos for pos in picked if pos not in prev]
        nbytes = self.cache.row_bytes(len(new))
        step = 0 if is_predecode else self._step
        self.channel.schedule_prefetch(
            PrefetchTicket(step=step, layer=layer, positions=picked, num_bytes=nbytes))
        self._prev_pins[layer] = picked
        if is_predecode:
            self.predecode_bytes += nbytes
            self.predecode_new_pins += len(new)
        return nbytes, len(new)

    def decode_step(self) -> tuple[int, StepMetrics]:
        """One dual-token step: emit the verified token, refresh speculation."""
        if self._phase != "decoding":
            raise ProtocolError("decode_step requires predecode first")
        cfg = self.config
        p = self._pos
        x = self.weights.embedding[[self._verified, self._speculative]].copy()
        positions = (p, p + 1)
        pin_mass: list[float] = []
        bytes_fetched = 0
        new_pins = 0
        if self.debug_scores is not None:
            self.debug_scores = []
        for layer, lw in enumerate(self.weights.layers):
            ticket_positions, k_pin, v_pin = self.channel.await_layer(self._step, layer)
            self.cache.pin(layer, ticket_positions, k_pin, v_pin)
            q, k, v = _qkv(cfg, lw, x, positions)
            keys, vals = [], []
            for h in range(cfg.kv_heads):
                mk, mv = self.cache.materialize(layer, h)
                keys.append(np.concatenate([mk, k[:, h, :]], axis=0))
                vals.append(np.concatenate([mv, v[:, h, :]], axis=0))
            n_cached = keys[0].shape[0] - 2
            mask = np.ones((2, n_cached + 2), dtype=bool)
            mask[0, n_cached + 1] = False  # verified row never sees the speculative column
            out, probs = _attend(cfg, q, keys, vals, mask)
            if self.debug_scores is not None:
                self.debug_scores.append([a.copy() for a in probs])
            pinned = list(self.cache.pinned_positions(layer))
            for a in probs:
                pin_mass.append(float(a[0, pinned].sum()) if pinned else 0.0)
            agg = np.sum([a[1, :n_cached] for a in probs], axis=0)
            nbytes, npins = self._issue_ticket(layer, agg)
            bytes_fetched += nbytes
            new_pins += npins
            self.cache.append_verified(layer, k[0], v[0])
            x = _ffn(lw, x + numerics.matmul(out, lw.wo))
        logits = _logits(self.weights, x)
        verified_next = numerics.argmax_row(logits[0])
        speculative_next = numerics.argmax_row(logits[1])
        metrics = StepMetrics(
            step=self._step,
            token=verified_next,
            speculative_hit=bool(verified_next == self._speculative),
            pinned_mass=float(np.mean(pin_mass)),
            bytes_fetched=bytes_fetched,
            new_pins=new_pins,
        )
        self.last_logits = logits
        self._verified = verified_next
        self._speculative = speculative_next
        self._pos = p + 1
        self._step += 1
        return verified_next, metrics


def generate(config: DecoderConfig, weights: Weights, prompt, steps: int,
             budget: CacheBudget, channel_model: ChannelModel | None = None,
             mode: str = "sim", compute_time_per_step: float = 0.0,
             prefill_time: float = 0.0) -> GenerateResult:
    """prefill -> predecode -> steps x decode_step, with per-step metrics
    and latency report rows."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    dec = SpeculativeDecoder(config, weights, budget, channel_model, mode,
                             compute_time_per_step, prefill_time)
    try:
        tokens = [dec.prefill(prompt)]
        dec.predecode()
        latency_rows = []
        compute_s = compute_time_per_step
        pre_transfer = dec.channel.step_transfer_seconds(0)
        pre_overlap = dec.channel.end_step(0, compute_s)
        latency_rows.append({
            "step": 0, "compute_s": compute_s, "transfer_s": pre_transfer,
            "overlapped_s": pre_overlap,
            "serialized_s": step_latency(compute_s, pre_transfer, overlapped=False),
            "bytes": dec.predecode_bytes, "new_pins": dec.predecode_new_pins,
        })
        logits_list = []
        metrics_list = []
        for _ in range(steps):
            step_idx = dec._step
            token, metrics = dec.decode_step()
            tokens.append(token)
            logits_list.append(dec.last_logits[0])
            metrics_list.append(metrics)
            transfer_s = dec.channel.step_transfer_seconds(step_idx)
            overlapped = dec.channel.end_step(step_idx, compute_s)
            latency_rows.append({
                "step": step_idx, "compute_s": compute_s, "transfer_s": transfer_s,
                "overlapped_s": overlapped,
                "serialized_s": step_latency(compute_s, transfer_s, overlapped=False),
                "bytes": metrics.bytes_fetched, "new_pins": metrics.new_pins,
            })
        total = prefill_time + dec.channel.clock
        return GenerateResult(tokens=tokens, logits=logits_list, metrics=metrics_list,
                              latency_rows=latency_rows, prefill_seconds=prefill_time,
                              total_seconds=total, decoder=dec)
    finally:
        dec.close()
