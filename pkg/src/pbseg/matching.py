"""Minimum-cost injective assignment via shortest augmenting paths."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MatchResult:
    assignment: np.ndarray  # assignment[g] = query index matched to ground truth g
    cost: float


def hungarian(cost: np.ndarray) -> MatchResult:
    """Assign every row of an ``n x m`` cost matrix (``n <= m``) to a distinct column.

    Row/column potentials are maintained so that each augmentation is a
    Dijkstra-like scan over the columns; overall ``O(n^2 m)``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n > m:
        raise ValueError(f"cannot match {n} targets to {m} predictions")
    if n == 0:
        return MatchResult(np.zeros(0, dtype=np.int64), 0.0)
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")

    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # owner[j] = row (1-based) using column j; 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            used_idx = np.flatnonzero(used)
            u[owner[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1

    assignment = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if owner[j]:
            assignment[owner[j] - 1] = j - 1
    total = float(cost[np.arange(n), assignment].sum())
    return MatchResult(assignment, total)
