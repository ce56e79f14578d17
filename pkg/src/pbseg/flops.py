"""Analytic FLOP model of one cross-attention layer, per stage.

Conventions: a multiply-accumulate is 2 FLOPs (``2*m*n*k`` per matmul);
elementwise arithmetic, activations, normalizations, mask additions and
argmax scans cost 1 FLOP per element per pass; reshapes and row gathers
are free. Both mechanisms share the ``L x S`` mask across heads and use
bias-free projections.
"""

from __future__ import annotations

import numpy as np

from .attention import PBCAParams, StandardAttentionParams, pbca_forward, standard_masked_cross_attention
from .tensor import Tensor, count_flops, no_grad

STAGES = ("projection", "affinity", "selection", "interaction", "output")
CONVENTION = (
    "2 FLOPs per multiply-accumulate; 1 FLOP per element per pass for elementwise ops, "
    "activations, normalizations, mask additions and argmax; reshapes and gathers free"
)


def pbca_flops(S: int, L: int, d: int, heads: int, D: int | None = None) -> dict[str, dict[str, int]]:
    D = D or d
    dh = d // heads
    return {
        "projection": {"key_proj": 2 * S * D * d, "query_proj": 2 * L * D * d},
        "affinity": {"affinity_matmul": 2 * S * L * d},
        "selection": {"mask_add": heads * S * L, "argmax": heads * S * L},
        "interaction": {
            "query_prototype_product": L * d,
            "w1_matmul": 2 * L * d * dh,
            "l2_normalize": L * d,
            "beta_scale": L * d,
            "prototype_residual": L * d,
        },
        "output": {"w2_matmul": 2 * L * d * D, "residual": L * D},
    }


def standard_flops(S: int, L: int, d: int, heads: int, D: int | None = None) -> dict[str, dict[str, int]]:
    D = D or d
    return {
        "projection": {"key_proj": 2 * S * D * d, "query_proj": 2 * L * D * d, "value_proj": 2 * S * D * d},
        "affinity": {"score_matmul": 2 * L * S * d, "scale": heads * L * S},
        "selection": {"mask_add": heads * L * S, "softmax": heads * L * S},
        "interaction": {"weighted_sum_matmul": 2 * L * S * d},
        "output": {"out_proj_matmul": 2 * L * d * D, "residual": L * D},
    }


def stage_totals(breakdown: dict[str, dict[str, int]]) -> dict[str, int]:
    return {stage: sum(ops.values()) for stage, ops in breakdown.items()}


def total(breakdown: dict[str, dict[str, int]]) -> int:
    return sum(stage_totals(breakdown).values())


def flop_ratio(S: int, L: int, d: int, heads: int) -> float:
    return total(pbca_flops(S, L, d, heads)) / total(standard_flops(S, L, d, heads))


def random_layer_inputs(rng: np.random.Generator, S: int, L: int, d: int, open_fraction: float = 0.5):
    """Random ``d x 1 x S`` features, ``L x d`` queries and an ``L x S`` mask."""
    R = Tensor(rng.normal(size=(d, 1, S)))
    O = Tensor(rng.normal(size=(L, d)))
    N = np.where(rng.uniform(size=(L, S)) < open_fraction, 0.0, -np.inf)
    return R, O, N


def instrumented_flops(mechanism: str, S: int, L: int, d: int, heads: int, seed: int = 0) -> dict[str, int]:
    """Run one forward pass under the op-level counter and return stage totals."""
    rng = np.random.default_rng(seed)
    R, O, N = random_layer_inputs(rng, S, L, d)
    with no_grad(), count_flops() as counts:
        if mechanism == "pbca":
            pbca_forward(O, R, N, PBCAParams(rng, d, heads))
        elif mechanism == "standard":
            standard_masked_cross_attention(O, R, N, StandardAttentionParams(rng, d, heads))
        else:
            raise ValueError(f"unknown mechanism {mechanism!r}")
    return {stage: int(counts.get(stage, 0)) for stage in STAGES}


def flop_report(grid: list[tuple[int, int, int]], heads: int) -> dict:
    points = []
    for S, L, d in grid:
        pb, st = pbca_flops(S, L, d, heads), standard_flops(S, L, d, heads)
        points.append(
            {
                "S": S,
                "L": L,
                "d": d,
                "heads": heads,
                "pbca": {"stages": pb, "stage_totals": stage_totals(pb), "total": total(pb)},
                "standard": {"stages": st, "stage_totals": stage_totals(st), "total": total(st)},
                "ratio": total(pb) / total(st),
            }
        )
    return {"convention": CONVENTION, "points": points}
