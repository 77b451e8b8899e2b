"""Iterative correspondence-structure learning.

Per probe image, an optimal binary mapping structure (one best-matching
gallery patch per probe patch, searched over several ranges) is selected
by the rank it yields for the probe's correct match.  Each iteration mixes
the estimates implied by a stratified sample of those binary structures,
weighted by their rank-n match rates, into the current structure at a
fixed update rate; an optional evaluation step accepts a candidate only
when it improves the mean training rank.

Training-time rankings deliberately skip the one-to-one constraint and use
the per-row argmax score; prediction uses the full solver.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import grid as gridmod
from .errors import PoolTooSmall
from .grid import PatchGrid
from .matching import LOG_FLOOR, ImagePatches
from .metric import MetricBank, SimilarityTable
from .structure import CorrespondenceStructure, init_structure, normalize_rows

logger = logging.getLogger(__name__)

_TABLE_FLOOR = 1e-12
_LINK_SUBSAMPLE_SEED = 104729  # fixed stream for the link-weight subsample


@dataclass(frozen=True)
class BinaryMappingStructure:
    """0/1 link set approximating one probe image's best patch mapping."""

    links: tuple[tuple[int, int], ...]
    source_probe: str
    search_range: int

    def link_cols(self, n_probe: int) -> np.ndarray:
        """Gallery ordinal per probe patch, -1 where unlinked."""
        cols = np.full(n_probe, -1, dtype=np.int64)
        for i, j in self.links:
            cols[i] = j
        return cols


@dataclass(frozen=True)
class LearnConfig:
    epsilon: float = 0.2
    n_cmc: int = 5
    structures_per_iter: int = 20
    candidate_ranges: tuple[int, int] = (26, 32)
    max_iters: int = 300
    use_eval_module: bool = False
    t_c: float = 0.05
    t_d: int = 32
    link_cmc_subsample: int = 32
    convergence_patience: int = 20
    normalization: str = "row"  # "row" or "joint" estimate normalization

    def validate(self) -> None:
        if not 0 < self.epsilon <= 1:
            raise ValueError("epsilon must be in (0, 1]")
        if self.n_cmc < 1:
            raise ValueError("n_cmc must be >= 1")
        if self.structures_per_iter % 2 != 0:
            raise ValueError("structures_per_iter must be even")
        if self.candidate_ranges[0] > self.candidate_ranges[1]:
            raise ValueError("candidate range interval is empty")
        if self.normalization not in ("row", "joint"):
            raise ValueError("normalization must be 'row' or 'joint'")


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    objective: float
    accepted: bool
    checksum: str


@dataclass
class LearnTrace:
    records: list[IterationRecord] = field(default_factory=list)

    def objectives(self, accepted_only: bool = False) -> list[float]:
        return [r.objective for r in self.records if r.accepted or not accepted_only]


# -- core estimate arithmetic (shared by the public ops and the engine) ------

def _strength_shape(
    link_cols: np.ndarray, table: np.ndarray, range_mask: np.ndarray
) -> np.ndarray:
    """Row-normalized correspondence-strength term of one binary structure.

    Linked pairs take weight one; other in-range pairs take their average
    similarity relative to the linked pairs of the same probe patch.  Rows
    without a link fall back to the normalized similarity profile.
    """
    n_probe, n_gallery = table.shape
    floored = np.where(range_mask, np.maximum(table, _TABLE_FLOOR), 0.0)
    shape = floored.copy()
    linked = link_cols >= 0
    rows = np.flatnonzero(linked)
    if rows.size:
        denom = floored[rows, link_cols[rows]]
        denom = np.maximum(denom, _TABLE_FLOOR)
        shape[rows] = floored[rows] / denom[:, None]
        shape[rows, link_cols[rows]] = 1.0
    shape *= range_mask
    sums = shape.sum(axis=1, keepdims=True)
    return np.divide(shape, sums, out=np.zeros_like(shape), where=sums > 0)


def _impact_matrix(probe_grid: PatchGrid, t_d: int) -> np.ndarray:
    """impact[i, s]: distance-decay influence of a link at patch s on patch i.

    Columns are normalized so each link spreads one unit of influence.
    """
    d = gridmod.cell_distance_matrix(probe_grid)
    w = np.where(d < t_d, 1.0 / (d + 1.0), 0.0)
    sums = w.sum(axis=0, keepdims=True)
    return np.divide(w, sums, out=np.zeros_like(w), where=sums > 0)


def _patch_importance(
    link_cols: np.ndarray, link_weights: np.ndarray, impact: np.ndarray
) -> np.ndarray:
    """Importance of each probe patch under one structure's weighted links."""
    rows = np.flatnonzero(link_cols >= 0)
    if rows.size == 0:
        n = impact.shape[0]
        return np.full(n, 1.0 / n)
    lw = link_weights[rows].astype(np.float64)
    total = lw.sum()
    if total <= 0:
        warnings.warn("all link weights are zero; using uniform link importances",
                      RuntimeWarning, stacklevel=2)
        lw = np.full(rows.size, 1.0 / rows.size)
    else:
        lw = lw / total
    imp = impact[:, rows] @ lw
    s = imp.sum()
    return imp / s if s > 0 else np.full(imp.size, 1.0 / imp.size)


def _mix_estimates(
    priors: np.ndarray,
    shapes: list[np.ndarray],
    importances: list[np.ndarray],
    range_mask: np.ndarray,
    normalization: str,
) -> np.ndarray:
    est = np.zeros(range_mask.shape, dtype=np.float64)
    for prior, shape, imp in zip(priors, shapes, importances):
        est += prior * shape * imp[:, None]
    est *= range_mask
    if normalization == "joint":
        # experimental alternative: keep relative row masses, scale the
        # whole matrix to total n_rows; rows recover stochasticity at the
        # blend step
        total = est.sum()
        return est * (est.shape[0] / total) if total > 0 else est
    sums = est.sum(axis=1, keepdims=True)
    return np.divide(est, sums, out=np.zeros_like(est), where=sums > 0)


def _normalized_priors(weights: np.ndarray) -> np.ndarray:
    total = weights.sum()
    if total <= 0:
        warnings.warn("all structure weights are zero; using uniform priors",
                      RuntimeWarning, stacklevel=2)
        return np.full(weights.size, 1.0 / weights.size)
    return weights / total


# -- public operations --------------------------------------------------------

def binary_structure_as_correspondence(
    m: BinaryMappingStructure,
    probe: PatchGrid,
    gallery: PatchGrid,
    t_d: int,
) -> CorrespondenceStructure:
    """View a link set as a 0/1 correspondence structure (one-hot rows)."""
    probs = np.zeros((probe.n_patches, gallery.n_patches))
    for i, j in m.links:
        probs[i, j] = 1.0
    probs *= gridmod.in_range_mask(probe, gallery, t_d)
    return CorrespondenceStructure(
        probe_grid=probe.spec, gallery_grid=gallery.spec, t_d=t_d, probs=probs,
        tag=f"binary:{m.source_probe}:r{m.search_range}",
    )


def candidate_binary_structures(
    u: ImagePatches,
    v_correct: ImagePatches,
    bank: MetricBank,
    ranges: tuple[int, int],
) -> list[BinaryMappingStructure]:
    """One candidate per search range: per-patch argmax similarity links."""
    lo, hi = ranges
    if lo > hi:
        raise ValueError("empty candidate range interval")
    log_phi = bank.log_similarity_matrix(u.feats, v_correct.feats)
    coloc = gridmod.colocated_map(u.grid, v_correct.grid)
    dist = gridmod.cell_distance_matrix(v_correct.grid)[coloc, :]
    out = []
    for r in range(lo, hi + 1):
        masked = np.where(dist < r, log_phi, -np.inf)
        cols = np.argmax(masked, axis=1)
        links = tuple(
            (int(i), int(cols[i]))
            for i in range(u.grid.n_patches)
            if np.isfinite(masked[i, cols[i]])
        )
        out.append(BinaryMappingStructure(
            links=links, source_probe=u.image_id, search_range=r,
        ))
    return out


def optimal_binary_structure(
    u: ImagePatches,
    v_correct: ImagePatches,
    gallery: list[ImagePatches],
    candidates: list[BinaryMappingStructure],
    bank: MetricBank,
    t_c: float,
    t_d: int | None = None,
) -> BinaryMappingStructure:
    """The candidate whose 0/1 structure ranks the correct match best.

    Ties prefer the smaller search range.  Rankings use the training-time
    greedy score.
    """
    from .matching import rank_gallery

    if not candidates:
        raise ValueError("no candidate structures")
    t_d = t_d if t_d is not None else max(c.search_range for c in candidates)
    best = None
    for cand in sorted(candidates, key=lambda c: c.search_range):
        s = binary_structure_as_correspondence(cand, u.grid, v_correct.grid, t_d)
        rank = rank_gallery(u, gallery, s, bank, t_c, solver="greedy").correct_rank
        if best is None or rank < best[0]:
            best = (rank, cand)
    return best[1]


def cmc_weight(
    entity: BinaryMappingStructure,
    train_set: list[tuple[ImagePatches, ImagePatches]],
    bank: MetricBank,
    t_c: float,
    n: int,
    t_d: int | None = None,
) -> float:
    """Fraction of training probes ranked within n using the entity alone."""
    from .matching import rank_gallery

    if not train_set:
        raise ValueError("empty training set")
    probe_grid = train_set[0][0].grid
    gallery_grid = train_set[0][1].grid
    t_d = t_d if t_d is not None else max(entity.search_range, 1)
    s = binary_structure_as_correspondence(entity, probe_grid, gallery_grid, t_d)
    gallery = [v for _, v in train_set]
    hits = 0
    for u, _ in train_set:
        rank = rank_gallery(u, gallery, s, bank, t_c, solver="greedy").correct_rank
        hits += rank <= n
    return hits / len(train_set)


def single_link_structure(s: int, t: int, source: str, search_range: int) -> BinaryMappingStructure:
    return BinaryMappingStructure(links=((s, t),), source_probe=source,
                                  search_range=search_range)


@dataclass
class WeightCache:
    """CMC weights for structures (by source probe id) and single links."""

    structures: dict[str, float] = field(default_factory=dict)
    links: dict[tuple[int, int], float] = field(default_factory=dict)


def select_binary_structures(
    current: CorrespondenceStructure,
    pool: dict[str, BinaryMappingStructure],
    train_set: list[tuple[ImagePatches, ImagePatches]],
    bank: MetricBank,
    cfg: LearnConfig,
    rng: np.random.Generator,
) -> list[BinaryMappingStructure]:
    """Stratified sample of the pool: half top-ranked, half bottom-ranked."""
    from .matching import rank_gallery

    if len(pool) < cfg.structures_per_iter:
        raise PoolTooSmall(
            f"pool of {len(pool)} structures < {cfg.structures_per_iter}"
        )
    gallery = [v for _, v in train_set]
    ranked = []
    for u, _ in train_set:
        if u.image_id not in pool:
            continue
        r = rank_gallery(u, gallery, current, bank, cfg.t_c, solver="greedy").correct_rank
        ranked.append((r, u.image_id))
    ranked.sort(key=lambda t: (t[0], t[1]))
    ids = [pid for _, pid in ranked]
    return _stratified_pick(ids, pool, cfg.structures_per_iter, rng)


def _stratified_pick(ids_by_rank, pool, count, rng):
    half = count // 2
    split = (len(ids_by_rank) + 1) // 2  # odd pools put the extra id on top
    top, bottom = ids_by_rank[:split], ids_by_rank[split:]
    if len(top) < half or len(bottom) < half:
        raise PoolTooSmall(
            f"strata of {len(top)}/{len(bottom)} cannot supply {half} each"
        )
    pick_top = rng.choice(len(top), size=half, replace=False)
    pick_bottom = rng.choice(len(bottom), size=half, replace=False)
    chosen = [top[i] for i in sorted(pick_top)] + [bottom[i] for i in sorted(pick_bottom)]
    return [pool[pid] for pid in chosen]


def estimate_update(
    gamma: list[BinaryMappingStructure],
    sim_table: SimilarityTable,
    weights: WeightCache,
    probe_grid: PatchGrid,
    gallery_grid: PatchGrid,
    t_d: int,
    normalization: str = "row",
) -> np.ndarray:
    """Updated matching-probability matrix implied by selected structures.

    Combines, per structure: its prior (normalized rank-n match rate), the
    correspondence-strength term of its links, and the distance-decayed
    patch importances of its weighted links; the mixture is row-normalized.
    """
    if not gamma:
        raise ValueError("no structures selected")
    n_probe = probe_grid.n_patches
    range_mask = gridmod.in_range_mask(probe_grid, gallery_grid, t_d)
    struct_w = np.array([weights.structures[m.source_probe] for m in gamma])
    priors = _normalized_priors(struct_w)
    impact = _impact_matrix(probe_grid, t_d)
    shapes, importances = [], []
    for m in gamma:
        cols = m.link_cols(n_probe)
        lw = np.array([
            weights.links.get((i, int(cols[i])), 0.0) if cols[i] >= 0 else 0.0
            for i in range(n_probe)
        ])
        shapes.append(_strength_shape(cols, sim_table.values, range_mask))
        importances.append(_patch_importance(cols, lw, impact))
    return _mix_estimates(priors, shapes, importances, range_mask, normalization)


def update_structure(
    prev: CorrespondenceStructure, p_hat: np.ndarray, epsilon: float
) -> CorrespondenceStructure:
    """Blend the estimate into the previous structure at the update rate."""
    if prev.probs.shape != p_hat.shape:
        from .errors import ShapeMismatch

        raise ShapeMismatch("estimate shape does not match the structure")
    # incremental form of (1 - eps) * prev + eps * estimate; keeps the
    # common eps = 0.2 blend of 0.5 and 1.0 at the 0.6 literal exactly
    blended = prev.probs + epsilon * (p_hat - prev.probs)
    blended = np.maximum(blended * prev.range_mask(), 0.0)
    s, _ = normalize_rows(replace(prev, probs=blended))
    return s


# -- vectorized training engine ----------------------------------------------

class _Engine:
    """Precomputed tensors for one training run.

    log_phi[p, q, i, j] caches the log similarity of probe p's patch i
    against gallery q's patch j, so each iteration reduces to gathers and
    row maxima.
    """

    def __init__(
        self,
        train_set: list[tuple[ImagePatches, ImagePatches]],
        bank: MetricBank,
        cfg: LearnConfig,
    ):
        self.cfg = cfg
        self.n = len(train_set)
        self.probe_grid = train_set[0][0].grid
        self.gallery_grid = train_set[0][1].grid
        self.np_, self.ng = self.probe_grid.n_patches, self.gallery_grid.n_patches
        self.probe_ids = [u.image_id for u, _ in train_set]
        gallery_ids = [v.image_id for _, v in train_set]
        self.id_rank = np.argsort(np.argsort(np.array(gallery_ids)))
        self.range_mask = gridmod.in_range_mask(
            self.probe_grid, self.gallery_grid, cfg.t_d
        )
        self.coloc = gridmod.colocated_map(self.probe_grid, self.gallery_grid)
        self.dist_from_coloc = gridmod.cell_distance_matrix(self.gallery_grid)[self.coloc]

        logger.info("building %dx%d pairwise similarity cache", self.n, self.n)
        self.log_phi = np.empty(
            (self.n, self.n, self.np_, self.ng), dtype=np.float32
        )
        for p, (u, _) in enumerate(train_set):
            for q, (_, v) in enumerate(train_set):
                self.log_phi[p, q] = bank.log_similarity_matrix(u.feats, v.feats)

        # average similarity over correct pairs, floored inside the range
        table = np.zeros((self.np_, self.ng))
        for p in range(self.n):
            table += np.exp(self.log_phi[p, p].astype(np.float64))
        table /= self.n
        self.phibar = np.where(self.range_mask, np.maximum(table, _TABLE_FLOOR), 0.0)
        self.impact = _impact_matrix(self.probe_grid, cfg.t_d)

    # -- ranking ------------------------------------------------------------

    def rank_all(self, probs: np.ndarray) -> np.ndarray:
        """Greedy-score rank of each probe's correct match, 1-based."""
        feasible = self.range_mask & (probs > self.cfg.t_c)
        weight = np.where(feasible, np.log(np.maximum(probs, 1e-300)), -np.inf).astype(
            np.float32
        )
        scores = np.empty((self.n, self.n), dtype=np.float64)
        for p in range(self.n):
            s = self.log_phi[p] + weight[None, :, :]
            best = s.max(axis=2)
            best = np.where(np.isfinite(best), best, np.float32(LOG_FLOOR))
            scores[p] = best.sum(axis=1, dtype=np.float64)
        return self._ranks(scores)

    def _ranks(self, scores: np.ndarray) -> np.ndarray:
        correct = np.arange(self.n)
        s_corr = scores[correct, correct]
        greater = (scores > s_corr[:, None]).sum(axis=1)
        ties = (
            (scores == s_corr[:, None])
            & (self.id_rank[None, :] < self.id_rank[correct][:, None])
        ).sum(axis=1)
        return 1 + greater + ties

    def _ranks_for_links(self, link_cols: np.ndarray) -> np.ndarray:
        """Ranks of correct matches using a link set as the structure."""
        rows = np.flatnonzero(link_cols >= 0)
        if rows.size == 0:
            scores = np.zeros((self.n, self.n))
        else:
            gathered = self.log_phi[:, :, rows, link_cols[rows]]
            scores = gathered.sum(axis=2, dtype=np.float64)
        return self._ranks(scores)

    # -- step 1: per-probe optimal binary structures --------------------------

    def build_structures(self) -> dict[str, BinaryMappingStructure]:
        lo, hi = self.cfg.candidate_ranges
        range_masks = {r: self.dist_from_coloc < r for r in range(lo, hi + 1)}
        pool: dict[str, BinaryMappingStructure] = {}
        for p in range(self.n):
            lp = self.log_phi[p, p]
            best = None
            for r in range(lo, hi + 1):
                masked = np.where(range_masks[r], lp, -np.inf)
                cols = np.argmax(masked, axis=1).astype(np.int64)
                cols[~np.isfinite(masked[np.arange(self.np_), cols])] = -1
                scores = self.log_phi[p, :, np.arange(self.np_), np.maximum(cols, 0)]
                scores = np.where((cols >= 0)[:, None], scores, np.float32(LOG_FLOOR))
                ranks = self._ranks_one(scores.sum(axis=0, dtype=np.float64), p)
                if best is None or ranks < best[0]:
                    best = (ranks, r, cols)
            _, r, cols = best
            links = tuple(
                (int(i), int(cols[i])) for i in range(self.np_) if cols[i] >= 0
            )
            pool[self.probe_ids[p]] = BinaryMappingStructure(
                links=links, source_probe=self.probe_ids[p], search_range=r
            )
        return pool

    def _ranks_one(self, scores: np.ndarray, correct: int) -> int:
        s_corr = scores[correct]
        greater = int((scores > s_corr).sum())
        ties = int(
            ((scores == s_corr) & (self.id_rank < self.id_rank[correct])).sum()
        )
        return 1 + greater + ties

    # -- weights --------------------------------------------------------------

    def build_weights(self, pool: dict[str, BinaryMappingStructure]) -> WeightCache:
        cache = WeightCache()
        n_cmc = self.cfg.n_cmc
        if self.n > self.cfg.link_cmc_subsample:
            sub_rng = np.random.default_rng(_LINK_SUBSAMPLE_SEED)
            sub = np.sort(sub_rng.choice(self.n, self.cfg.link_cmc_subsample,
                                         replace=False))
        else:
            sub = np.arange(self.n)
        for pid, m in pool.items():
            cols = m.link_cols(self.np_)
            ranks = self._ranks_for_links(cols)
            cache.structures[pid] = float((ranks <= n_cmc).mean())
            rows = np.flatnonzero(cols >= 0)
            todo = [i for i in rows if (int(i), int(cols[i])) not in cache.links]
            if todo:
                todo = np.array(todo)
                vals = self.log_phi[:, :, todo, cols[todo]][sub]  # (S, n, L)
                s_corr = vals[np.arange(sub.size), sub, :][:, None, :]
                greater = (vals > s_corr).sum(axis=1)
                tie_ok = self.id_rank[None, :, None] < self.id_rank[sub][:, None, None]
                ties = ((vals == s_corr) & tie_ok).sum(axis=1)
                link_ranks = 1 + greater + ties  # (S, L)
                cmc = (link_ranks <= n_cmc).mean(axis=0)
                for l, i in enumerate(todo):
                    cache.links[(int(i), int(cols[i]))] = float(cmc[l])
        return cache

    # -- per-structure constants ----------------------------------------------

    def build_estimate_parts(self, pool, cache):
        shapes, importances = {}, {}
        for pid, m in pool.items():
            cols = m.link_cols(self.np_)
            lw = np.array([
                cache.links.get((int(i), int(cols[i])), 0.0) if cols[i] >= 0 else 0.0
                for i in range(self.np_)
            ])
            shapes[pid] = _strength_shape(cols, self.phibar, self.range_mask)
            importances[pid] = _patch_importance(cols, lw, self.impact)
        return shapes, importances


def learn(
    train_set: list[tuple[ImagePatches, ImagePatches]],
    bank: MetricBank,
    cfg: LearnConfig,
    seed: int,
    tag: str = "",
    on_iteration=None,
) -> tuple[CorrespondenceStructure, LearnTrace]:
    """Run the full learning process and return the structure plus trace.

    Deterministic in (train_set, cfg, seed).  ``on_iteration(k, structure)``
    is invoked after every iteration, including iteration 0 for the
    initialization.
    """
    cfg.validate()
    if len(train_set) < cfg.structures_per_iter:
        raise PoolTooSmall(
            f"{len(train_set)} training identities < "
            f"structures_per_iter={cfg.structures_per_iter}"
        )
    probe_ids = [u.image_id for u, _ in train_set]
    if len(set(probe_ids)) != len(probe_ids):
        raise ValueError("probe image ids must be unique")
    grids = {(u.grid.spec, v.grid.spec) for u, v in train_set}
    if len(grids) != 1:
        raise ValueError("all training pairs must share one grid pair")
    rng = np.random.default_rng(seed)
    engine = _Engine(train_set, bank, cfg)

    pool = engine.build_structures()
    cache = engine.build_weights(pool)
    shapes, importances = engine.build_estimate_parts(pool, cache)
    struct_w = {pid: cache.structures[pid] for pid in pool}

    structure = init_structure(engine.probe_grid, engine.gallery_grid, cfg.t_d)
    if tag:
        structure = replace(structure, tag=tag)
    trace = LearnTrace()

    ranks = engine.rank_all(structure.probs)
    objective = float(ranks.mean())
    trace.records.append(IterationRecord(0, objective, True, structure.checksum()))
    if on_iteration is not None:
        on_iteration(0, structure)

    ids_sorted_by_rank = None
    streak = 0
    last_accepted_obj = objective

    for k in range(1, cfg.max_iters + 1):
        order = np.lexsort((np.array(engine.probe_ids), ranks))
        ids_sorted_by_rank = [engine.probe_ids[i] for i in order]
        gamma_ids = _stratified_ids(ids_sorted_by_rank, cfg.structures_per_iter, rng)

        weights = np.array([struct_w[pid] for pid in gamma_ids])
        priors = _normalized_priors(weights)
        p_hat = _mix_estimates(
            priors,
            [shapes[pid] for pid in gamma_ids],
            [importances[pid] for pid in gamma_ids],
            engine.range_mask,
            cfg.normalization,
        )
        candidate = update_structure(structure, p_hat, cfg.epsilon)

        accepted = True
        if cfg.use_eval_module:
            # non-worse candidates are accepted: plateaus are common while
            # the structure is still too diffuse to clear t_c, and equal
            # objectives keep the trace exactly nonincreasing either way
            cand_ranks = engine.rank_all(candidate.probs)
            cand_obj = float(cand_ranks.mean())
            if cand_obj <= objective:
                structure, ranks, objective = candidate, cand_ranks, cand_obj
            else:
                accepted = False
        else:
            structure = candidate
            ranks = engine.rank_all(structure.probs)
            objective = float(ranks.mean())

        trace.records.append(
            IterationRecord(k, objective, accepted, structure.checksum())
        )
        if on_iteration is not None:
            on_iteration(k, structure)

        if accepted:
            if objective == last_accepted_obj:
                streak += 1
            else:
                streak = 0
            last_accepted_obj = objective
            if streak >= cfg.convergence_patience:
                logger.info("converged after %d iterations", k)
                break

    return structure, trace


def _stratified_ids(ids_by_rank: list[str], count: int, rng: np.random.Generator):
    half = count // 2
    split = (len(ids_by_rank) + 1) // 2
    top, bottom = ids_by_rank[:split], ids_by_rank[split:]
    if len(top) < half or len(bottom) < half:
        raise PoolTooSmall(
            f"strata of {len(top)}/{len(bottom)} cannot supply {half} each"
        )
    pick_top = rng.choice(len(top), size=half, replace=False)
    pick_bottom = rng.choice(len(bottom), size=half, replace=False)
    return [top[i] for i in sorted(pick_top)] + [bottom[i] for i in sorted(pick_bottom)]


def simple_average_structure(
    pool: dict[str, BinaryMappingStructure],
    probe_grid: PatchGrid,
    gallery_grid: PatchGrid,
    t_d: int,
) -> CorrespondenceStructure:
    """Mean of the per-probe binary structures, row-normalized (baseline)."""
    probs = np.zeros((probe_grid.n_patches, gallery_grid.n_patches))
    for m in pool.values():
        for i, j in m.links:
            probs[i, j] += 1.0
    probs *= gridmod.in_range_mask(probe_grid, gallery_grid, t_d)
    s = CorrespondenceStructure(
        probe_grid=probe_grid.spec, gallery_grid=gallery_grid.spec,
        t_d=t_d, probs=probs, tag="simple_average",
    )
    s, _ = normalize_rows(s)
    return s


def build_structure_pool(
    train_set: list[tuple[ImagePatches, ImagePatches]],
    bank: MetricBank,
    cfg: LearnConfig,
) -> dict[str, BinaryMappingStructure]:
    """Per-probe optimal binary structures via the vectorized engine."""
    engine = _Engine(train_set, bank, cfg)
    return engine.build_structures()
