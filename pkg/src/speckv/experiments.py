"""Experiment harness: builds the report dicts served by the API/CLI.

Every report has the shape {experiment, config, rows, summary} with
snake_case keys and a stable field order, so identical invocations produce
byte-identical serialized output.
"""
from __future__ import annotations

import numpy as np

from . import engine, hitrate, model
from .kvcache import CacheBudget, memory_ratio
from .transfer import ChannelModel, step_latency, transfer_time

__all__ = ["run_decode", "hitrate_experiment", "latency_experiment",
           "ratio_table", "make_prompt"]

# (model, context length, bits, group size) rows of the ratio table.
RATIO_CONFIGS = [
    ("llama-2-7b", 4096, 2, 32),
    ("llama-2-7b", 4096, 2, 64),
    ("llama-2-13b", 4096, 2, 32),
    ("llama-2-13b", 4096, 2, 64),
    ("mistral-7b", 32768, 2, 32),
    ("mistral-7b", 32768, 2, 64),
    ("mistral-7b", 32768, 1, 32),
    ("mistral-7b", 32768, 1, 64),
    ("llama-3-8b", 8192, 2, 32),
    ("llama-3-8b", 8192, 2, 64),
    ("llama-3-8b", 8192, 1, 32),
    ("llama-3-8b", 8192, 1, 64),
]
RESIDENT_EXTRA = 128  # residual 64 + prefetched 64


def make_prompt(vocab: int, length: int, seed: int) -> list[int]:
    """Deterministic pseudo-random prompt."""
    rng = np.random.default_rng(seed)
    return [int(t) for t in rng.integers(0, vocab, size=length)]


def _round(x: float, digits: int = 9) -> float:
    return float(round(float(x), digits))


def run_decode(weights_path: str, prompt: list[int] | None, prompt_len: int,
               steps: int, bits: int, group_size: int, k: int, residual: int,
               bandwidth: float, alpha: float, overhead: float,
               compute_s: float, mode: str, seed: int,
               max_len: int = 4096) -> dict:
    config, weights = model.load_weights(weights_path)
    config = model.with_runtime(config, max_len=max_len)
    if prompt is None:
        prompt = make_prompt(config.vocab, prompt_len, seed)
    budget = CacheBudget(bits=bits, group_size=group_size, residual=residual,
                         prefetch_k=k, context_length=max_len)
    channel = ChannelModel(bandwidth=bandwidth, scatter_penalty=alpha,
                           fixed_overhead=overhead)
    result = engine.generate(config, weights, prompt, steps, budget, channel,
                             mode=mode, compute_time_per_step=compute_s)
    latency_by_step = {row["step"]: row for row in result.latency_rows}
    rows = []
    for m in result.metrics:
        lat = latency_by_step[m.step]
        rows.append({
            "step": m.step,
            "token": m.token,
            "speculative_hit": m.speculative_hit,
            "pinned_mass": _round(m.pinned_mass),
            "bytes_fetched": m.bytes_fetched,
            "new_pins": m.new_pins,
            "compute_s": _round(lat["compute_s"]),
            "transfer_s": _round(lat["transfer_s"]),
            "overlapped_s": _round(lat["overlapped_s"]),
            "serialized_s": _round(lat["serialized_s"]),
        })
    hits = sum(1 for m in result.metrics if m.speculative_hit)
    summary = {
        "tokens": result.tokens,
        "speculative_hit_rate": _round(hits / len(result.metrics)),
        "mean_pinned_mass": _round(float(np.mean([m.pinned_mass for m in result.metrics]))),
        "bytes_fetched_total": int(sum(m.bytes_fetched for m in result.metrics)),
        "overlapped_total_s": _round(sum(r["overlapped_s"] for r in result.latency_rows)),
        "serialized_total_s": _round(sum(r["serialized_s"] for r in result.latency_rows)),
        "memory_ratio": memory_ratio(bits, group_size, max_len, residual + k),
    }
    return {
        "experiment": "decode",
        "config": {
            "weights_path": weights_path, "prompt_len": len(prompt), "steps": steps,
            "bits": bits, "group_size": group_size, "k": k, "residual": residual,
            "bandwidth": bandwidth, "alpha": alpha, "overhead": overhead,
            "compute_s": compute_s, "mode": mode, "seed": seed,
        },
        "rows": rows,
        "summary": summary,
    }


def hitrate_experiment(weights_path: str, prompt: list[int] | None, prompt_len: int,
                       steps: int, k_sweep: list[int], seed: int,
                       max_len: int = 4096) -> dict:
    """Full-cache decode with attention tracing, then both hit-rate curves
    over the k sweep. Rates are reported per query and as means."""
    config, weights = model.load_weights(weights_path)
    config = model.with_runtime(config, max_len=max_len)
    if prompt is None:
        prompt = make_prompt(config.vocab, prompt_len, seed)
    dec = engine.FullCacheDecoder(config, weights)
    _, _, rows = dec.generate(prompt, steps, record_trace=True)
    trace = hitrate.AttentionTrace(rows=rows)
    trace.validate()
    report_rows = []
    summary_topk, summary_evict = [], []
    for k in k_sweep:
        topk_per_seq = [hitrate.topk_hitrate(seq, k) for seq in trace.sequences()]
        evict_per_seq = [hitrate.eviction_hitrate(seq, k) for seq in trace.sequences()]
        topk_by_query = np.mean(np.stack(topk_per_seq), axis=0)
        evict_by_query = np.mean(np.stack(evict_per_seq), axis=0)
        for q in range(len(topk_by_query)):
            report_rows.append({
                "k": int(k),
                "query_step": q,
                "topk_rate": _round(topk_by_query[q]),
                "eviction_rate": _round(evict_by_query[q]),
            })
        summary_topk.append(_round(float(np.mean(topk_by_query))))
        summary_evict.append(_round(float(np.mean(evict_by_query))))
    return {
        "experiment": "hitrate",
        "config": {"weights_path": weights_path, "prompt_len": len(prompt),
                   "steps": steps, "k_sweep": [int(k) for k in k_sweep], "seed": seed},
        "rows": report_rows,
        "summary": {"k_sweep": [int(k) for k in k_sweep],
                    "topk_mean": summary_topk,
                    "eviction_mean": summary_evict},
    }


def latency_experiment(steps: int, context_length: int, layers: int, kv_heads: int,
                       head_dim: int, k: int, bandwidth: float, alpha: float,
                       overhead: float, compute_s: float,
                       byte_schedule: list[int] | None = None) -> dict:
    """Overlapped vs serialized per-step latency for top-k prefetch, against
    a full-cache fetch baseline, plus the scatter-penalty comparison."""
    channel = ChannelModel(bandwidth=bandwidth, scatter_penalty=alpha,
                           fixed_overhead=overhead)
    row_bytes = 2 * head_dim * 2 * kv_heads * layers  # 16-bit key+value rows
    full_bytes = context_length * row_bytes
    topk_bytes = min(k, context_length) * row_bytes
    rows = []
    overlapped_total = serialized_total = full_serial_total = 0.0
    for s in range(1, steps + 1):
        nbytes = byte_schedule[s - 1] if byte_schedule is not None else topk_bytes
        t = transfer_time(nbytes, channel, contiguous=False)
        t_full = transfer_time(full_bytes, channel, contiguous=False)
        overlapped = step_latency(compute_s, t, overlapped=True)
        serialized = step_latency(compute_s, t, overlapped=False)
        overlapped_total += overlapped
        serialized_total += serialized
        full_serial_total += step_latency(compute_s, t_full, overlapped=False)
        rows.append({
            "step": s,
            "compute_s": _round(compute_s),
            "transfer_s": _round(t),
            "overlapped_s": _round(overlapped),
            "serialized_s": _round(serialized),
            "bytes": int(nbytes),
            "new_pins": int(min(k, context_length)),
        })
    contiguous_s = transfer_time(topk_bytes, channel, contiguous=True)
    scatter_s = transfer_time(topk_bytes, channel, contiguous=False)
    return {
        "experiment": "latency",
        "config": {"steps": steps, "context_length": context_length, "layers": layers,
                   "kv_heads": kv_heads, "head_dim": head_dim, "k": k,
                   "bandwidth": bandwidth, "alpha": alpha, "overhead": overhead,
                   "compute_s": compute_s},
        "rows": rows,
        "summary": {
            "topk_bytes_per_step": int(topk_bytes),
            "full_bytes_per_step": int(full_bytes),
            "overlapped_total_s": _round(overlapped_total),
            "serialized_total_s": _round(serialized_total),
            "full_fetch_serialized_total_s": _round(full_serial_total),
            "contiguous_s": _round(contiguous_s, 12),
            "scatter_s": _round(scatter_s, 12),
        },
    }


def ratio_table() -> dict:
    rows = [
        {
            "model": name,
            "context_length": length,
            "bits": bits,
            "group_size": g,
            "resident_extra": RESIDENT_EXTRA,
            "ratio": memory_ratio(bits, g, length, RESIDENT_EXTRA),
        }
        for name, length, bits, g in RATIO_CONFIGS
    ]
    return {
        "experiment": "ratio_table",
        "config": {"resident_extra": RESIDENT_EXTRA},
        "rows": rows,
        "summary": {"ratios": [r["ratio"] for r in rows]},
    }
