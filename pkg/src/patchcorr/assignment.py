"""Maximization linear assignment over rectangular matrices with holes.

Infeasible entries are excluded from the problem outright rather than
encoded as large negative scores, so score magnitudes never threaten
overflow.  The solver delegates the optimum to a sparse assignment routine
and then canonicalizes the pair list to the lexicographically smallest one
among the optima; all totals are compared through correctly rounded sums
(``math.fsum``) so ties are exact.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import (
    maximum_bipartite_matching,
    min_weight_full_bipartite_matching,
)

from .errors import InfeasibleRow, ShapeMismatch, TooLarge

_BRUTE_MAX_ROWS = 8
_BRUTE_MAX_INJECTIONS = 2_000_000


@dataclass(frozen=True)
class ScoreMatrix:
    """Rectangular score matrix; ``feasible`` marks usable entries."""

    values: np.ndarray            # (n_rows, n_cols) float64
    feasible: np.ndarray = field(default=None)  # bool, same shape

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        feasible = self.feasible
        if feasible is None:
            feasible = np.ones(values.shape, dtype=bool)
        feasible = np.asarray(feasible, dtype=bool)
        if values.ndim != 2 or feasible.shape != values.shape:
            raise ShapeMismatch("values and feasibility mask shapes differ")
        if values.shape[1] < values.shape[0]:
            raise ShapeMismatch(
                f"need n_cols >= n_rows, got {values.shape[0]}x{values.shape[1]}"
            )
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "feasible", feasible)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class Assignment:
    pairs: tuple[tuple[int, int], ...]
    total: float


def _check_rows_feasible(m: ScoreMatrix) -> None:
    counts = m.feasible.sum(axis=1)
    if np.any(counts == 0):
        raise InfeasibleRow(int(np.argmin(counts)))


def _pairs_total(values: np.ndarray, pairs) -> float:
    return math.fsum(float(values[r, c]) for r, c in pairs)


def _solve_rows_cols(values, feasible, rows, cols):
    """Optimal row->col matching on a submatrix; returns (pairs, fsum total).

    ``rows``/``cols`` are index arrays into the full matrix.  Raises
    InfeasibleRow when no complete matching on the rows exists.
    """
    sub_f = feasible[np.ix_(rows, cols)]
    counts = sub_f.sum(axis=1)
    if np.any(counts == 0):
        raise InfeasibleRow(int(rows[int(np.argmin(counts))]))
    if len(rows) == 0:
        return [], 0.0
    if len(rows) == 1:
        sub_v = values[rows[0], cols]
        masked = np.where(sub_f[0], sub_v, -np.inf)
        j = int(np.argmax(masked))
        return [(int(rows[0]), int(cols[j]))], float(sub_v[j])
    # shift keeps every stored entry strictly negative so sparse storage
    # cannot silently drop score-zero edges
    sub_v = values[np.ix_(rows, cols)]
    shift = max(float(sub_v[sub_f].max()), 0.0) + 1.0
    data = np.where(sub_f, sub_v - shift, 0.0)
    graph = csr_matrix(data)
    try:
        r_idx, c_idx = min_weight_full_bipartite_matching(graph, maximize=True)
    except ValueError:
        raise InfeasibleRow(_find_unmatched_row(sub_f)) from None
    pairs = [(int(rows[r]), int(cols[c])) for r, c in zip(r_idx, c_idx)]
    pairs.sort()
    return pairs, _pairs_total(values, pairs)


def _find_unmatched_row(feasible_sub: np.ndarray) -> int:
    match = maximum_bipartite_matching(csr_matrix(feasible_sub), perm_type="column")
    unmatched = np.flatnonzero(match == -1)
    return int(unmatched[0]) if unmatched.size else 0


def solve_assignment(m: ScoreMatrix) -> Assignment:
    """Maximum-total one-to-one assignment covering every row.

    Among equal-total optima the lexicographically smallest pair list is
    returned, found by greedily forcing the smallest feasible column per
    row and re-solving the remainder whenever the forced value still meets
    the optimal total.
    """
    _check_rows_feasible(m)
    values, feasible = m.values, m.feasible
    n_rows, n_cols = m.n_rows, m.n_cols
    all_rows = np.arange(n_rows)
    all_cols = np.arange(n_cols)

    base_pairs, base_total = _solve_rows_cols(values, feasible, all_rows, all_cols)
    current = dict(base_pairs)

    # per-row top-2 feasible values for a cheap candidate upper bound
    masked = np.where(feasible, values, -np.inf)
    order = np.argsort(masked, axis=1)
    best1 = masked[all_rows, order[:, -1]]
    best1_col = order[:, -1]
    best2 = masked[all_rows, order[:, -2]] if n_cols >= 2 else np.full(n_rows, -np.inf)

    fixed: list[tuple[int, int]] = []
    fixed_scores: list[float] = []
    used = np.zeros(n_cols, dtype=bool)

    for i in range(n_rows):
        j_hat = current[i]
        rows_left = np.arange(i + 1, n_rows)
        chosen = j_hat
        candidates = np.flatnonzero(feasible[i] & ~used)
        candidates = candidates[candidates < j_hat]
        if candidates.size:
            # upper bound ignores column conflicts among later rows except
            # the forced column itself; a loose bound only costs sub-solves
            top_sum = float(best1[rows_left].sum()) if rows_left.size else 0.0
            adjust = np.zeros(n_cols)
            if rows_left.size:
                np.add.at(adjust, best1_col[rows_left],
                          best1[rows_left] - best2[rows_left])
            ub = values[i, candidates] + top_sum - adjust[candidates]
            remaining_target = base_total - math.fsum(fixed_scores)
            candidates = candidates[ub >= remaining_target - 1e-9]
        for j in candidates:
            cols_left = np.flatnonzero(~used)
            cols_left = cols_left[cols_left != j]
            try:
                sub_pairs, _ = _solve_rows_cols(values, feasible, rows_left, cols_left)
            except InfeasibleRow:
                continue
            cand_total = math.fsum(
                fixed_scores
                + [float(values[i, j])]
                + [float(values[r, c]) for r, c in sub_pairs]
            )
            if cand_total == base_total:
                chosen = int(j)
                current.update(dict(sub_pairs))
                break
        fixed.append((i, int(chosen)))
        fixed_scores.append(float(values[i, chosen]))
        used[chosen] = True

    return Assignment(pairs=tuple(fixed), total=math.fsum(fixed_scores))


@lru_cache(maxsize=32)
def _injection_table(n_cols: int, n_rows: int) -> np.ndarray:
    """All row->column injections in lexicographic order, as an array."""
    count = math.perm(n_cols, n_rows)
    if count > _BRUTE_MAX_INJECTIONS:
        raise TooLarge(f"{count} injections exceed the brute-force cap")
    return np.array(
        list(itertools.permutations(range(n_cols), n_rows)), dtype=np.int64
    )


def brute_force_assignment(m: ScoreMatrix) -> Assignment:
    """Exhaustive oracle; identical tie-break contract as the solver."""
    if m.n_rows > _BRUTE_MAX_ROWS:
        raise TooLarge(f"brute force limited to {_BRUTE_MAX_ROWS} rows")
    _check_rows_feasible(m)
    table = _injection_table(m.n_cols, m.n_rows)
    rows = np.arange(m.n_rows)
    ok = m.feasible[rows[None, :], table].all(axis=1)
    if not np.any(ok):
        raise InfeasibleRow(_find_unmatched_row(m.feasible))
    scores = np.where(ok, m.values[rows[None, :], table].sum(axis=1), -np.inf)
    near = np.flatnonzero(scores >= scores.max() - 1e-6)
    # exact totals only for the near-optimal bucket, first (lexicographically
    # smallest) exact maximum wins
    best_idx, best_total = -1, -math.inf
    for idx in near:
        if not ok[idx]:
            continue
        t = _pairs_total(m.values, zip(rows, table[idx]))
        if t > best_total:
            best_total, best_idx = t, int(idx)
    pairs = tuple((int(r), int(c)) for r, c in zip(rows, table[best_idx]))
    return Assignment(pairs=pairs, total=best_total)
