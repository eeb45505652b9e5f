"""Hit-rate study: query-dependent top-k retention vs greedy eviction.

A trace is, per layer/head, the sequence of full-attention probability rows
produced by a full-cache decoder (row t covers every position visible to
query t). The hit rate of a retained set is the fraction of the full row's
probability mass it captures.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["AttentionTrace", "topk_hitrate", "eviction_hitrate"]


@dataclass
class AttentionTrace:
    """rows[layer][head][query_step] -> 1-d probability row."""

    rows: list

    def sequences(self):
        for per_layer in self.rows:
            for per_head in per_layer:
                yield per_head

    def validate(self, tol: float = 1e-6) -> None:
        for seq in self.sequences():
            for row in seq:
                if abs(float(np.sum(row)) - 1.0) > tol:
                    raise ValueError("attention trace row does not sum to 1")


def topk_hitrate(rows, k: int) -> np.ndarray:
    """Per query: probability mass of the k largest entries of its row."""
    if k < 0:
        raise ValueError("k must be >= 0")
    rates = []
    for row in rows:
        row = np.asarray(row, dtype=np.float64)
        take = min(k, row.size)
        rates.append(float(np.sort(row)[::-1][:take].sum()))
    return np.asarray(rates)


def eviction_hitrate(rows, k: int) -> np.ndarray:
    """Greedy budget-k eviction driven by cumulative attention scores.

    The retained set plus every not-yet-seen position (the whole first row,
    then one new position per query) forms the candidate set; scores are
    renormalized over the candidates (the evictor cannot see evicted
    positions), cumulative scores are updated, and the lowest-cumulative
    candidates are dropped until the budget holds. The reported rate for
    query t is the full-row mass of the set retained after that query.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    retained: list[int] = []
    cumulative: dict[int, float] = {}
    seen = 0
    rates = []
    for row in rows:
        row = np.asarray(row, dtype=np.float64)
        cand = retained + list(range(seen, row.size))
        seen = max(seen, row.size)
        mass = float(sum(row[i] for i in cand))
        if mass > 0:
            for i in cand:
                cumulative[i] = cumulative.get(i, 0.0) + float(row[i]) / mass
        while len(cand) > k:
            victim = min(cand, key=lambda i: (cumulative.get(i, 0.0), i))
            cand = [i for i in cand if i != victim]
            cumulative.pop(victim, None)
        retained = cand
        rates.append(float(sum(row[i] for i in retained)))
    return np.asarray(rates)
