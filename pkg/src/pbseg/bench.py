"""Wall-clock latency of one attention layer forward pass."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .attention import PBCAParams, StandardAttentionParams, pbca_forward, standard_masked_cross_attention
from .flops import random_layer_inputs
from .tensor import no_grad


@dataclass
class LatencyRow:
    S: int
    L: int
    d: int
    mechanism: str
    median_ms: float
    p10: float
    p90: float


def time_forward(mechanism: str, S: int, L: int, d: int, heads: int, repeats: int = 20, warmup: int = 3, seed: int = 0) -> LatencyRow:
    rng = np.random.default_rng(seed)
    R, O, N = random_layer_inputs(rng, S, L, d)
    if mechanism == "pbca":
        params = PBCAParams(rng, d, heads)
        run = lambda: pbca_forward(O, R, N, params)  # noqa: E731
    else:
        params = StandardAttentionParams(rng, d, heads)
        run = lambda: standard_masked_cross_attention(O, R, N, params)  # noqa: E731
    times = []
    with no_grad():
        for i in range(warmup + repeats):
            t0 = time.perf_counter()
            run()
            if i >= warmup:
                times.append((time.perf_counter() - t0) * 1e3)
    p10, med, p90 = np.percentile(times, [10, 50, 90])
    return LatencyRow(S, L, d, mechanism, float(med), float(p10), float(p90))


def latency_grid(grid, heads: int, repeats: int, warmup: int, seed: int = 0) -> list[LatencyRow]:
    rows = []
    for S, L, d in grid:
        for mech in ("pbca", "standard"):
            rows.append(time_forward(mech, S, L, d, heads, repeats, warmup, seed))
    return rows
