"""Soft-IoU similarity and minimum-cost bipartite assignment.

Predicted mask sequences have no inherent order, so training pairs each
prediction step with a ground-truth instance through a minimum-cost
assignment on (1 - sIoU) costs.  The class-masked variant restricts pairs
to equal class categories by decomposing into independent per-class
subproblems; infeasible pairs are excluded structurally, never via
sentinel costs.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class InfeasibleMatchingError(Exception):
    """No class-respecting matching of the required size exists."""


@dataclass(frozen=True)
class Assignment:
    """A partial injection of cost-matrix rows into columns."""

    pairs: tuple[tuple[int, int], ...]
    total_cost: float
    unmatched_rows: tuple[int, ...] = field(default=())
    unmatched_cols: tuple[int, ...] = field(default=())

    def row_to_col(self) -> dict[int, int]:
        return dict(self.pairs)


def siou(p: np.ndarray, y: np.ndarray) -> float:
    """Soft intersection-over-union between a soft mask and a binary mask.

    sum(p*y) / (sum(p) + sum(y) - sum(p*y)); in [0, 1], equal to classic IoU
    when p is binary.
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {y.shape}")
    if p.min() < -1e-12 or p.max() > 1 + 1e-12:
        raise ValueError("soft mask values must lie in [0, 1]")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("ground-truth mask must be binary")
    inter = float((p * y).sum())
    denom = float(p.sum()) + float(y.sum()) - inter
    if denom == 0.0:
        raise ValueError("sIoU undefined for two empty masks")
    return inter / denom


def siou_cost_matrix(pred_masks: np.ndarray, gt_masks: np.ndarray) -> np.ndarray:
    """(1 - sIoU) cost matrix, rows = predictions, cols = ground truth."""
    p = np.asarray(pred_masks, dtype=np.float64).reshape(len(pred_masks), -1)
    y = np.asarray(gt_masks, dtype=np.float64).reshape(len(gt_masks), -1)
    inter = p @ y.T
    union = p.sum(axis=1)[:, None] + y.sum(axis=1)[None, :] - inter
    if (union <= 0).any():
        raise ValueError("sIoU undefined for two empty masks")
    return 1.0 - inter / union


def hungarian(costs: np.ndarray) -> Assignment:
    """Minimum-total-cost maximum matching of a rectangular cost matrix.

    Shortest-augmenting-path formulation with potentials, O(n^2 m).  All
    min(rows, cols) pairs are matched.
    """
    c = np.asarray(costs, dtype=np.float64)
    if c.ndim != 2 or c.size == 0:
        raise ValueError("cost matrix must be 2-D and non-empty")
    if not np.isfinite(c).all():
        raise ValueError("cost matrix entries must be finite")

    transposed = c.shape[0] > c.shape[1]
    if transposed:
        c = c.T
    n, m = c.shape

    # potentials u (rows), v (cols); p[j] = 1-based row matched to col j
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [np.inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = np.inf
            j1 = -1
            row = c[i0 - 1]
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1

    pairs = []
    for j in range(1, m + 1):
        if p[j] != 0:
            pairs.append((j - 1, p[j] - 1) if transposed else (p[j] - 1, j - 1))
    pairs.sort()
    total = float(sum(costs[r][c_] for r, c_ in pairs))
    n_rows, n_cols = np.asarray(costs).shape
    matched_r = {r for r, _ in pairs}
    matched_c = {c_ for _, c_ in pairs}
    return Assignment(
        pairs=tuple(pairs),
        total_cost=total,
        unmatched_rows=tuple(r for r in range(n_rows) if r not in matched_r),
        unmatched_cols=tuple(c_ for c_ in range(n_cols) if c_ not in matched_c),
    )


def masked_hungarian(
    costs: np.ndarray,
    row_classes: Sequence[int],
    col_classes: Sequence[int],
) -> Assignment:
    """Minimum-cost assignment restricted to equal-class pairs.

    Decomposes into one plain Hungarian problem per class; each class
    matches min(rows, cols) pairs of that class.  A class with prediction
    rows but no ground-truth columns is infeasible.
    """
    c = np.asarray(costs, dtype=np.float64)
    row_classes = list(row_classes)
    col_classes = list(col_classes)
    if c.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    if len(row_classes) != c.shape[0] or len(col_classes) != c.shape[1]:
        raise ValueError("class lists must cover all rows and columns")

    col_idx_by_class: dict[int, list[int]] = {}
    for j, cls in enumerate(col_classes):
        col_idx_by_class.setdefault(cls, []).append(j)
    row_idx_by_class: dict[int, list[int]] = {}
    for i, cls in enumerate(row_classes):
        row_idx_by_class.setdefault(cls, []).append(i)

    pairs: list[tuple[int, int]] = []
    for cls, rows in sorted(row_idx_by_class.items()):
        cols = col_idx_by_class.get(cls, [])
        if not cols:
            raise InfeasibleMatchingError(
                f"class {cls} has {len(rows)} prediction rows but no ground-truth columns"
            )
        sub = hungarian(c[np.ix_(rows, cols)])
        pairs.extend((rows[r], cols[j]) for r, j in sub.pairs)

    pairs.sort()
    total = float(sum(c[r, j] for r, j in pairs))
    matched_r = {r for r, _ in pairs}
    matched_c = {j for _, j in pairs}
    return Assignment(
        pairs=tuple(pairs),
        total_cost=total,
        unmatched_rows=tuple(r for r in range(c.shape[0]) if r not in matched_r),
        unmatched_cols=tuple(j for j in range(c.shape[1]) if j not in matched_c),
    )


def brute_force_assignment(
    costs: np.ndarray,
    row_classes: Sequence[int] | None = None,
    col_classes: Sequence[int] | None = None,
) -> Assignment:
    """Exhaustive-minimum oracle over (class-respecting) matchings.

    Maximizes matching cardinality first, then minimizes total cost; ties
    broken by lexicographically smallest pair list.  Only for small
    problems: min(rows, cols) <= 8.
    """
    c = np.asarray(costs, dtype=np.float64)
    if c.ndim != 2 or c.size == 0:
        raise ValueError("cost matrix must be 2-D and non-empty")
    n, m = c.shape
    if min(n, m) > 8:
        raise ValueError("brute force restricted to min(rows, cols) <= 8")
    if (row_classes is None) != (col_classes is None):
        raise ValueError("give classes for both sides or neither")

    if row_classes is None and n <= m:
        # vectorized full-injection search; itertools order is lexicographic,
        # so the first argmin is also the lexicographically smallest pair list
        perms = np.array(list(itertools.permutations(range(m), n)), dtype=np.intp)
        totals = c[np.arange(n)[None, :], perms].sum(axis=1)
        best = int(np.flatnonzero(totals == totals.min())[0])
        pairs = tuple((i, int(perms[best, i])) for i in range(n))
        matched_c = {j for _, j in pairs}
        return Assignment(
            pairs=pairs,
            total_cost=float(totals[best]),
            unmatched_rows=(),
            unmatched_cols=tuple(j for j in range(m) if j not in matched_c),
        )

    def feasible(r: int, j: int) -> bool:
        if row_classes is None:
            return True
        return row_classes[r] == col_classes[j]

    best_pairs: tuple[tuple[int, int], ...] | None = None
    best_cost = np.inf
    for k in range(min(n, m), -1, -1):
        for rows in itertools.combinations(range(n), k):
            for cols in itertools.permutations(range(m), k):
                if all(feasible(r, j) for r, j in zip(rows, cols)):
                    pairs = tuple(sorted(zip(rows, cols)))
                    cost = float(sum(c[r, j] for r, j in pairs))
                    if cost < best_cost or (
                        cost == best_cost and (best_pairs is None or pairs < best_pairs)
                    ):
                        best_cost = cost
                        best_pairs = pairs
        if best_pairs is not None:
            if k == 0 and row_classes is not None:
                raise InfeasibleMatchingError("no class-respecting pair exists")
            matched_r = {r for r, _ in best_pairs}
            matched_c = {j for _, j in best_pairs}
            return Assignment(
                pairs=best_pairs,
                total_cost=best_cost,
                unmatched_rows=tuple(r for r in range(n) if r not in matched_r),
                unmatched_cols=tuple(j for j in range(m) if j not in matched_c),
            )
    raise AssertionError("unreachable: k = 0 always admits the empty matching")
