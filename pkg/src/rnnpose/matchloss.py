"""Hungarian-matched heatmap loss and the learned stopping loss."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

STOP_THRESHOLD = 0.5


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]  # (gt index, prediction index)
    unmatched_gt: list[int] = field(default_factory=list)
    total: float = 0.0

    def gt_for_prediction(self) -> dict[int, int]:
        return {t: s for s, t in self.pairs}


def _solve_square(cost: np.ndarray) -> np.ndarray:
    """Min-cost perfect matching on a square matrix; returns column of each row.

    Shortest augmenting path with row/column potentials, O(n^3).
    """
    n = cost.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=int)  # owner[col] = row (1-based), 0 = free
    way = np.zeros(n + 1, dtype=int)
    for row in range(1, n + 1):
        owner[0] = row
        col0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[col0] = True
            r0 = owner[col0]
            delta = inf
            col1 = 0
            for col in range(1, n + 1):
                if used[col]:
                    continue
                cur = cost[r0 - 1, col - 1] - u[r0] - v[col]
                if cur < minv[col]:
                    minv[col] = cur
                    way[col] = col0
                if minv[col] < delta:
                    delta = minv[col]
                    col1 = col
            for col in range(n + 1):
                if used[col]:
                    u[owner[col]] += delta
                    v[col] -= delta
                else:
                    minv[col] -= delta
            col0 = col1
            if owner[col0] == 0:
                break
        while col0:
            col1 = way[col0]
            owner[col0] = owner[col1]
            col0 = col1
    result = np.full(n, -1, dtype=int)
    for col in range(1, n + 1):
        if owner[col]:
            result[owner[col] - 1] = col - 1
    return result


def hungarian(cost) -> Assignment:
    """Minimum-cost injective matching of size ``min(rows, cols)``.

    Rectangular inputs are padded to square with a constant larger than any
    real entry.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be a matrix, got shape {cost.shape}")
    rows, cols = cost.shape
    if rows == 0 or cols == 0:
        return Assignment([], list(range(rows)), 0.0)
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    size = max(rows, cols)
    pad = 1.0 + np.abs(cost).max() * size
    square = np.full((size, size), pad)
    square[:rows, :cols] = cost
    col_of = _solve_square(square)
    pairs = [(r, int(col_of[r])) for r in range(rows) if col_of[r] < cols]
    matched = {r for r, _ in pairs}
    total = float(sum(cost[r, c] for r, c in pairs))
    return Assignment(pairs, [r for r in range(rows) if r not in matched], total)


def _maps(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def cost_matrix(gt: Sequence, pred: Sequence) -> np.ndarray:
    """``C[k, k'] = sum_j ||H_k,j - Hhat_k',j||^2`` over all pixels."""
    g = [_maps(h) for h in gt]
    p = [_maps(h) for h in pred]
    shapes = {a.shape for a in g} | {a.shape for a in p}
    if len(shapes) > 1:
        raise dc.ContractError(f"cost_matrix: heatmap shapes differ {sorted(shapes)}")
    out = np.zeros((len(g), len(p)))
    for k, gk in enumerate(g):
        for t, pt in enumerate(p):
            d = gk - pt
            out[k, t] = float(np.sum(d * d))
    return out


def joints_loss(gt: Sequence, pred: Sequence[Tensor], assignment: Assignment, reduction: str = "mean") -> Tensor:
    """Squared error over matched pairs only.

    ``reduction="mean"`` averages over pixels of each map and sums over maps
    and pairs; ``"sum"`` sums over pixels too.
    """
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    total: Tensor | None = None
    for s, t in assignment.pairs:
        target = _maps(gt[s])
        diff = dc.as_tensor(pred[t]) - target
        term = dc.sum(dc.square(diff))
        if reduction == "mean":
            term = term * (1.0 / (target.shape[-1] * target.shape[-2]))
        total = term if total is None else total + term
    return total if total is not None else Tensor(np.array(0.0))


def stop_targets(n: int, n_hat: int) -> np.ndarray:
    """``n`` ones then zeros; ``max(n_hat, n) + 1`` entries in total."""
    if n < 0 or n_hat < 0:
        raise ValueError("counts must be non-negative")
    zeros = 1 if n_hat <= n else (n_hat - n) + 1
    return np.concatenate([np.ones(n), np.zeros(zeros)])


def binary_cross_entropy(p_hat: Tensor, target: float) -> Tensor:
    """``-[t log p + (1 - t) log(1 - p)]`` for a scalar probability tensor."""
    p_hat = dc.as_tensor(p_hat)
    if not np.all((p_hat.data > 0) & (p_hat.data < 1)):
        raise dc.ContractError(f"stop confidence outside (0, 1): {p_hat.data}")
    if target == 1.0:
        return -dc.log(p_hat)
    if target == 0.0:
        return -dc.log(1.0 - p_hat)
    return -(target * dc.log(p_hat) + (1.0 - target) * dc.log(1.0 - p_hat))


def stop_loss(p: Sequence[float], p_hat: Sequence) -> Tensor:
    """Cross-entropy between stop targets and predicted confidences.

    Sums over the first ``min(len(p), len(p_hat))`` entries.
    """
    total: Tensor | None = None
    for target, conf in zip(p, p_hat):
        term = binary_cross_entropy(dc.as_tensor(conf), float(target))
        total = term if total is None else total + term
    return total if total is not None else Tensor(np.array(0.0))


def total_loss(joints, stop) -> Tensor:
    return dc.as_tensor(joints) + dc.as_tensor(stop)


def count_leading(confidences: Sequence[float], threshold: float = STOP_THRESHOLD) -> int:
    """n-hat: number of leading steps whose stop confidence is >= threshold."""
    n = 0
    for c in confidences:
        if c < threshold:
            break
        n += 1
    return n


@dataclass
class LossBreakdown:
    total: Tensor
    joints: Tensor
    stop: Tensor
    n_hat: int
    assignment: Assignment
    targets: np.ndarray


def assemble_loss(gt_maps: Sequence[np.ndarray], heatmaps: Sequence[Tensor], stops: Sequence[Tensor],
                  reduction: str = "mean", fixed: tuple[int, Assignment] | None = None) -> LossBreakdown:
    """Full training objective for one unrolled scene.

    Only the first n-hat predictions enter the matching; the stop loss covers
    every step the unroll produced, up to the target length.  ``fixed``
    supplies a precomputed ``(n_hat, assignment)``, holding the discrete
    part of the objective constant (used by gradient checks).
    """
    if fixed is None:
        n_hat = count_leading([s.item() for s in stops])
        cost = cost_matrix(gt_maps, heatmaps[:n_hat])
        assignment = hungarian(cost) if n_hat and len(gt_maps) else Assignment([], list(range(len(gt_maps))))
    else:
        n_hat, assignment = fixed
    lj = joints_loss(gt_maps, heatmaps, assignment, reduction)
    p = stop_targets(len(gt_maps), n_hat)
    ls = stop_loss(p, stops)
    return LossBreakdown(total_loss(lj, ls), lj, ls, n_hat, assignment, p)
