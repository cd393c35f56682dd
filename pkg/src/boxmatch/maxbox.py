"""Maximal box search over labeled points.

Given "positive" points to keep and "negative" points to exclude, find a
closed axis-aligned box containing as many positives as possible while
containing at most ``budget`` negatives. Boxes are closed on every face, so a
negative point sitting exactly on a boundary counts as inside and must either
be excluded by strict shrinkage or consume budget.

:func:`maximal_box` is an exact branch-and-bound solver. A node is the set of
positive points still admissible under accumulated half-space constraints;
its bound is the admissible count (trivially valid, tight at leaves) and its
tentative box is the componentwise bounding box of the admissible positives.
Branching targets the contained negative with the largest minimum normalized
margin to the box faces, producing two children per dimension that shrink
strictly past that negative, plus one child that spends a unit of budget to
keep it inside. Nodes are explored best bound first with creation-order tie
breaks, so results are deterministic.

:func:`brute_force_max_box` enumerates every candidate box with bounds at
positive coordinates and exists to cross-check the solver in tests.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass

import numpy as np


class MaxBoxInfeasibleError(RuntimeError):
    """No box with bounds at positive coordinates satisfies the budget."""


@dataclass(frozen=True)
class Box:
    """Closed hyperrectangle: lower[k] <= x[k] <= upper[k] for every k."""

    lower: np.ndarray
    upper: np.ndarray
    dimension_names: tuple[str, ...]

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=float)
        upper = np.asarray(self.upper, dtype=float)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        if lower.shape != upper.shape or lower.ndim != 1:
            raise ValueError("box bounds must be 1-D vectors of equal length")
        if len(self.dimension_names) != lower.shape[0]:
            raise ValueError("dimension names do not match bound vectors")
        if np.any(lower > upper):
            raise ValueError("box has lower bound above upper bound")

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        if x.shape != self.lower.shape:
            raise ValueError("point dimension does not match box")
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))

    def contains_mask(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if points.shape[1] != self.lower.shape[0]:
            raise ValueError("point dimension does not match box")
        return np.all((points >= self.lower) & (points <= self.upper), axis=1)


def box_contains(box: Box, x) -> bool:
    return box.contains(x)


@dataclass(frozen=True)
class BoxResult:
    box: Box
    cardinality: int
    negatives_inside: int
    nodes_explored: int
    proven_optimal: bool


def _as_points(points, name: str) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.size == 0:
        return arr.reshape(0, 0)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-D array of points")
    return arr


def _finalize(
    pos: np.ndarray,
    neg: np.ndarray,
    lower: np.ndarray,
    upper: np.ndarray,
    names: tuple[str, ...],
    nodes: int,
    proven: bool,
) -> BoxResult:
    box = Box(lower=lower, upper=upper, dimension_names=names)
    cardinality = int(box.contains_mask(pos).sum())
    negatives_inside = int(box.contains_mask(neg).sum()) if len(neg) else 0
    return BoxResult(
        box=box,
        cardinality=cardinality,
        negatives_inside=negatives_inside,
        nodes_explored=nodes,
        proven_optimal=proven,
    )


def maximal_box(
    positives,
    negatives,
    budget: int = 0,
    dimension_names=None,
    max_nodes: int | None = None,
) -> BoxResult:
    """Exact solver for the maximal box with at most ``budget`` negatives inside.

    Returns a box whose bounds lie on positive-point coordinates. With an
    empty negative set the answer is the bounding box of all positives.
    ``max_nodes`` caps the search; if it triggers, the best box found so far
    is returned with ``proven_optimal=False``.
    """
    pos = _as_points(positives, "positives")
    if pos.shape[0] == 0:
        raise ValueError("at least one positive point is required")
    if budget < 0:
        raise ValueError("budget must be nonnegative")
    p = pos.shape[1]
    neg = _as_points(negatives, "negatives")
    if neg.shape[0] == 0:
        neg = neg.reshape(0, p)
    if neg.shape[1] != p:
        raise ValueError("positives and negatives have different dimensions")
    if dimension_names is None:
        names = tuple(f"dim{k + 1}" for k in range(p))
    else:
        names = tuple(dimension_names)
        if len(names) != p:
            raise ValueError("dimension_names length does not match points")

    root_mask = np.ones(pos.shape[0], dtype=bool)
    heap: list[tuple[int, int]] = []
    payload: dict[int, tuple[np.ndarray, tuple[int, ...]]] = {}
    seen: set[tuple[bytes, tuple[int, ...]]] = set()
    counter = itertools.count()

    def push(mask: np.ndarray, paid: tuple[int, ...]):
        bound = int(mask.sum())
        if bound == 0:
            return
        key = (mask.tobytes(), paid)
        if key in seen:
            return
        seen.add(key)
        idx = next(counter)
        payload[idx] = (mask, paid)
        heapq.heappush(heap, (-bound, idx))

    push(root_mask, ())

    best_card = 0
    best_bounds: tuple[np.ndarray, np.ndarray] | None = None
    best_key: tuple | None = None
    nodes = 0
    proven = True

    while heap:
        neg_bound, idx = heapq.heappop(heap)
        bound = -neg_bound
        if bound <= best_card:
            break  # best-first ordering: nothing left can improve
        if max_nodes is not None and nodes >= max_nodes:
            proven = False
            break
        mask, paid = payload.pop(idx)
        nodes += 1

        admissible = pos[mask]
        lower = admissible.min(axis=0)
        upper = admissible.max(axis=0)
        if len(neg):
            inside = np.flatnonzero(np.all((neg >= lower) & (neg <= upper), axis=1))
        else:
            inside = np.empty(0, dtype=int)
        paid_set = set(paid)
        unpaid = [int(i) for i in inside if int(i) not in paid_set]
        budget_left = budget - len(paid)

        if len(unpaid) <= budget_left:
            key = tuple(lower) + tuple(upper)
            if bound > best_card or (bound == best_card and (best_key is None or key < best_key)):
                best_card = bound
                best_bounds = (lower.copy(), upper.copy())
                best_key = key
            continue

        widths = upper - lower
        best_margin = -1.0
        target = unpaid[0]
        for i in unpaid:
            q = neg[i]
            margin = np.inf
            for k in range(p):
                if widths[k] == 0.0:
                    margin = 0.0
                    break
                m = min(q[k] - lower[k], upper[k] - q[k]) / widths[k]
                margin = min(margin, m)
            if margin > best_margin:
                best_margin = margin
                target = i
        q = neg[target]

        for k in range(p):
            below = mask & (pos[:, k] < q[k])
            if below.any():
                push(below, paid)
            above = mask & (pos[:, k] > q[k])
            if above.any():
                push(above, paid)
        if budget_left > 0:
            push(mask, tuple(sorted(paid + (target,))))

    if best_bounds is None:
        if not proven:
            raise RuntimeError(
                f"node budget {max_nodes} exhausted before any feasible box was found"
            )
        raise MaxBoxInfeasibleError(
            "every candidate box exceeds the negative budget; no feasible box exists"
        )
    return _finalize(pos, neg, best_bounds[0], best_bounds[1], names, nodes, proven)


def _prefix_counts(points: np.ndarray, axes: list[np.ndarray]) -> np.ndarray:
    """Inclusive prefix-count cube over the merged coordinate grid."""
    shape = tuple(len(a) + 1 for a in axes)
    cube = np.zeros(shape, dtype=np.int64)
    if len(points):
        idx = tuple(
            np.searchsorted(axes[k], points[:, k]) + 1 for k in range(len(axes))
        )
        np.add.at(cube, idx, 1)
    for k in range(len(axes)):
        cube = np.cumsum(cube, axis=k)
    return cube


def _box_counts(cube: np.ndarray, lo_idx, hi_idx) -> np.ndarray:
    """Counts inside closed boxes given per-dimension grid index arrays."""
    p = cube.ndim
    if p == 1:
        return cube[hi_idx + 1] - cube[lo_idx]
    if p == 2:
        a, b = lo_idx
        c, d = hi_idx
        return (
            cube[np.ix_(c + 1, d + 1)]
            - cube[np.ix_(a, d + 1)]
            - cube[np.ix_(c + 1, b)]
            + cube[np.ix_(a, b)]
        )
    raise ValueError("direct counting supports 1 or 2 dimensions")


def brute_force_max_box(
    positives,
    negatives,
    budget: int = 0,
    dimension_names=None,
    limit: int = 60,
) -> BoxResult:
    """Exhaustive oracle over all boxes with bounds at positive coordinates.

    Intended for tests; refuses more than ``limit`` positives or more than 3
    dimensions. Near the limit in 3 dimensions the enumeration is large, so
    keep 3-D instances small.
    """
    pos = _as_points(positives, "positives")
    if pos.shape[0] == 0:
        raise ValueError("at least one positive point is required")
    if budget < 0:
        raise ValueError("budget must be nonnegative")
    p = pos.shape[1]
    if p > 3:
        raise ValueError("oracle supports at most 3 dimensions")
    if pos.shape[0] > limit:
        raise ValueError(f"oracle limit exceeded: {pos.shape[0]} positives > {limit}")
    neg = _as_points(negatives, "negatives")
    if neg.shape[0] == 0:
        neg = neg.reshape(0, p)
    if dimension_names is None:
        names = tuple(f"dim{k + 1}" for k in range(p))
    else:
        names = tuple(dimension_names)

    values = [np.unique(pos[:, k]) for k in range(p)]
    all_points = np.vstack([pos, neg]) if len(neg) else pos
    axes = [np.unique(all_points[:, k]) for k in range(p)]
    pos_cube = _prefix_counts(pos, axes)
    neg_cube = _prefix_counts(neg, axes)

    # candidate closed intervals per dimension, as grid indices of (lo, hi)
    pairs = []
    for k in range(p):
        grid_pos = np.searchsorted(axes[k], values[k])
        lo, hi = [], []
        for a in range(len(values[k])):
            for b in range(a, len(values[k])):
                lo.append(grid_pos[a])
                hi.append(grid_pos[b])
        pairs.append((np.asarray(lo), np.asarray(hi)))

    best_card = -1
    best = None
    evaluated = 0

    def consider(card: int, n_in: int, lo_idx: tuple[int, ...], hi_idx: tuple[int, ...]):
        nonlocal best_card, best
        if n_in > budget or card == 0:
            return
        if card > best_card:
            best_card = card
            best = (lo_idx, hi_idx)

    if p == 1:
        lo, hi = pairs[0]
        pc = _box_counts(pos_cube, lo, hi)
        nc = _box_counts(neg_cube, lo, hi)
        evaluated = len(lo)
        for i in range(len(lo)):
            consider(int(pc[i]), int(nc[i]), (int(lo[i]),), (int(hi[i]),))
    elif p == 2:
        (lo1, hi1), (lo2, hi2) = pairs
        pc = _box_counts(pos_cube, (lo1, lo2), (hi1, hi2))
        nc = _box_counts(neg_cube, (lo1, lo2), (hi1, hi2))
        evaluated = pc.size
        feasible = nc <= budget
        if feasible.any():
            masked = np.where(feasible, pc, -1)
            flat = int(np.argmax(masked))
            i, j = np.unravel_index(flat, masked.shape)
            if masked[i, j] > 0:
                consider(int(pc[i, j]), int(nc[i, j]), (int(lo1[i]), int(lo2[j])), (int(hi1[i]), int(hi2[j])))
    else:
        (lo1, hi1), (lo2, hi2), (lo3, hi3) = pairs
        for i in range(len(lo1)):
            a, c = lo1[i], hi1[i]
            pos_slab = pos_cube[c + 1] - pos_cube[a]
            neg_slab = neg_cube[c + 1] - neg_cube[a]
            pc = _box_counts(pos_slab, (lo2, lo3), (hi2, hi3))
            nc = _box_counts(neg_slab, (lo2, lo3), (hi2, hi3))
            evaluated += pc.size
            feasible = nc <= budget
            if not feasible.any():
                continue
            masked = np.where(feasible, pc, -1)
            flat = int(np.argmax(masked))
            j, k = np.unravel_index(flat, masked.shape)
            if masked[j, k] > 0:
                consider(
                    int(pc[j, k]),
                    int(nc[j, k]),
                    (int(a), int(lo2[j]), int(lo3[k])),
                    (int(c), int(hi2[j]), int(hi3[k])),
                )

    if best is None:
        raise MaxBoxInfeasibleError(
            "every candidate box exceeds the negative budget; no feasible box exists"
        )
    lo_idx, hi_idx = best
    lower = np.array([axes[k][lo_idx[k]] for k in range(p)], dtype=float)
    upper = np.array([axes[k][hi_idx[k]] for k in range(p)], dtype=float)
    return _finalize(pos, neg, lower, upper, names, evaluated, True)
