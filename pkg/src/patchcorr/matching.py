"""Image-pair scoring through a correspondence structure.

The correlation of a probe/gallery patch pair multiplies the learned
matching probability into the metric similarity (in log space) and drops
pairs whose probability does not clear the confidence threshold.  An image
pair's score is the best one-to-one patch assignment total; probe patches
with no feasible partner contribute a fixed floor penalty so scores stay
comparable across gallery images.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .assignment import Assignment, ScoreMatrix, solve_assignment
from .errors import GridMismatch, NoCorrectMatch
from .grid import PatchGrid
from .metric import MetricBank
from .structure import CorrespondenceStructure

SCORE_FLOOR = 1e-300
LOG_FLOOR = math.log(SCORE_FLOOR)

StructureSource = Union[
    CorrespondenceStructure, Callable[["ImagePatches", "ImagePatches"], CorrespondenceStructure]
]


@dataclass(frozen=True)
class ImagePatches:
    image_id: str
    camera_id: str
    person_id: str
    grid: PatchGrid
    feats: np.ndarray = field(repr=False)  # (n_patches, dim)

    def __post_init__(self):
        if self.feats.shape[0] != self.grid.n_patches:
            raise GridMismatch(
                f"{self.image_id}: {self.feats.shape[0]} feature rows for "
                f"{self.grid.n_patches} patches"
            )


@dataclass(frozen=True)
class MatchReport:
    score: float
    assignment: Assignment
    used_structure_tag: str
    unmatched_rows: tuple[int, ...] = ()


def _resolve(source: StructureSource, u: "ImagePatches", v: "ImagePatches") -> CorrespondenceStructure:
    if callable(source):
        return source(u, v)
    return source


def correlation_matrix(
    u: ImagePatches,
    v: ImagePatches,
    s: CorrespondenceStructure,
    bank: MetricBank,
    t_c: float,
) -> ScoreMatrix:
    """Log-space correlation entries; masked-out pairs are infeasible.

    Entry (i, j) is ``log(phi_ij * P_ij)`` floored at ``log(1e-300)``; a
    pair is feasible only when it lies in the search range and its
    probability strictly exceeds ``t_c``.
    """
    if u.grid.spec != s.probe_grid or v.grid.spec != s.gallery_grid:
        raise GridMismatch("image grids do not match the structure's grids")
    feasible = s.range_mask() & (s.probs > t_c)
    log_phi = bank.log_similarity_matrix(u.feats, v.feats)
    with np.errstate(divide="ignore"):
        log_p = np.where(feasible, np.log(np.maximum(s.probs, SCORE_FLOOR)), 0.0)
    values = np.where(feasible, np.maximum(log_phi + log_p, LOG_FLOOR), 0.0)
    return ScoreMatrix(values=values, feasible=feasible)


def solve_with_unmatched_penalty(m: ScoreMatrix) -> tuple[Assignment, tuple[int, ...]]:
    """Best one-to-one matching where leaving a row out costs the floor.

    Every row gets a private dummy column carrying ``log(1e-300)``, so a
    complete assignment always exists even when feasible columns are
    scarce; rows landing on their dummy are reported as unmatched and the
    returned assignment holds only real pairs.
    """
    n_rows, n_cols = m.n_rows, m.n_cols
    values = np.concatenate(
        [m.values, np.full((n_rows, n_rows), LOG_FLOOR)], axis=1
    )
    feasible = np.concatenate(
        [m.feasible, np.eye(n_rows, dtype=bool)], axis=1
    )
    solved = solve_assignment(ScoreMatrix(values=values, feasible=feasible))
    real_pairs = tuple((r, c) for r, c in solved.pairs if c < n_cols)
    unmatched = tuple(r for r, c in solved.pairs if c >= n_cols)
    assignment = Assignment(
        pairs=real_pairs,
        total=math.fsum(float(m.values[r, c]) for r, c in real_pairs),
    )
    return assignment, unmatched


def match_score(
    u: ImagePatches,
    v: ImagePatches,
    source: StructureSource,
    bank: MetricBank,
    t_c: float,
) -> MatchReport:
    """Globally constrained matching score between two images.

    Probe patches that cannot take any feasible gallery patch, either for
    lack of candidates or because feasible columns run out, are left
    unmatched and each contributes the floor penalty ``log(1e-300)``.
    """
    s = _resolve(source, u, v)
    m = correlation_matrix(u, v, s, bank, t_c)
    assignment, unmatched = solve_with_unmatched_penalty(m)
    score = math.fsum([assignment.total] + [LOG_FLOOR] * len(unmatched))
    return MatchReport(
        score=score,
        assignment=assignment,
        used_structure_tag=s.tag,
        unmatched_rows=unmatched,
    )


def greedy_match_score(
    u: ImagePatches,
    v: ImagePatches,
    source: StructureSource,
    bank: MetricBank,
    t_c: float,
) -> float:
    """Per-row argmax score, i.e. matching without the global constraint."""
    s = _resolve(source, u, v)
    m = correlation_matrix(u, v, s, bank, t_c)
    masked = np.where(m.feasible, m.values, -np.inf)
    row_best = masked.max(axis=1)
    row_best = np.where(np.isfinite(row_best), row_best, LOG_FLOOR)
    return float(row_best.sum())


def colocated_score(
    u: ImagePatches, v: ImagePatches, coloc: np.ndarray, bank: MetricBank
) -> float:
    """Sum of log similarities at co-located patch pairs (no structure)."""
    log_phi = bank.log_similarity_matrix(u.feats, v.feats)
    return float(log_phi[np.arange(u.grid.n_patches), coloc].sum())


@dataclass(frozen=True)
class RankingResult:
    ordered: tuple[tuple[str, float], ...]  # (gallery image_id, score), best first
    correct_rank: int
    reports: dict = field(default_factory=dict, repr=False)


def rank_gallery(
    u: ImagePatches,
    gallery: list[ImagePatches],
    source: StructureSource,
    bank: MetricBank,
    t_c: float,
    solver: str = "hungarian",
    threads: int = 1,
    keep_reports: bool = False,
) -> RankingResult:
    """Rank gallery images by score, descending; ties by ascending image id.

    Closed-set single-shot protocol: exactly one gallery image must share
    the probe's person id; its 1-based position is the returned rank.
    """
    if not gallery:
        raise NoCorrectMatch("empty gallery")
    correct = [g.image_id for g in gallery if g.person_id == u.person_id]
    if len(correct) != 1:
        raise NoCorrectMatch(
            f"probe {u.image_id}: expected exactly 1 correct match, found {len(correct)}"
        )

    def score_one(v: ImagePatches):
        if solver == "greedy":
            return v.image_id, greedy_match_score(u, v, source, bank, t_c), None
        report = match_score(u, v, source, bank, t_c)
        return v.image_id, report.score, report

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(score_one, gallery))
    else:
        results = [score_one(v) for v in gallery]

    ordered = sorted(results, key=lambda t: (-t[1], t[0]))
    rank = 1 + [t[0] for t in ordered].index(correct[0])
    reports = {t[0]: t[2] for t in results if t[2] is not None} if keep_reports else {}
    return RankingResult(
        ordered=tuple((t[0], t[1]) for t in ordered),
        correct_rank=rank,
        reports=reports,
    )


def rank_from_scores(scores: dict[str, float], correct_id: str) -> int:
    """1-based rank of ``correct_id`` under descending score, id tie-break."""
    ordered = sorted(scores.items(), key=lambda t: (-t[1], t[0]))
    return 1 + [k for k, _ in ordered].index(correct_id)
