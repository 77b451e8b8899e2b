"""CMC evaluation and the repeated-split experiment protocol.

Each split partitions identities (never images) into train and test,
fits PCA, metrics and structures on the train side only, and scores the
test probes against the test gallery under several methods: the proposed
globally constrained matcher, the same structure without the global
constraint, plain co-located similarity, the simple average of binary
structures, and the all-ones adjacency structure with a global constraint.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import grid as gridmod
from .assignment import ScoreMatrix
from .errors import DatasetTooSmall, EmptyRanks
from .features import apply_pca, fit_pca, image_patch_features
from .grid import PatchGrid, build_grid
from .learning import (
    LearnConfig,
    build_structure_pool,
    learn,
    simple_average_structure,
)
from .matching import (
    LOG_FLOOR,
    ImagePatches,
    colocated_score,
    greedy_match_score,
    match_score,
    rank_from_scores,
    solve_with_unmatched_penalty,
)
from .metric import MetricBank, MetricMode, fit_metric_bank
from .multistructure import (
    StructureRegistry,
    cluster_pose_groups,
    form_group_pairs,
    learn_registry,
)

ALL_METHODS = (
    "proposed", "non_global", "non_structure", "simple_average", "ac_global",
)


@dataclass(frozen=True)
class CMCCurve:
    """Cumulative match rates indexed by rank; ``rates[0]`` is rank 1."""

    rates: np.ndarray

    def rate(self, rank: int) -> float:
        return float(self.rates[rank - 1])

    @property
    def max_rank(self) -> int:
        return self.rates.size


def cmc_from_ranks(ranks, max_rank: int) -> CMCCurve:
    """Fraction of ranks at or below each cutoff from 1 to ``max_rank``."""
    ranks = np.asarray(list(ranks), dtype=np.int64)
    if ranks.size == 0:
        raise EmptyRanks("no ranks to accumulate")
    if np.any(ranks < 1):
        raise EmptyRanks("ranks must be 1-based")
    cutoffs = np.arange(1, max_rank + 1)
    rates = (ranks[None, :] <= cutoffs[:, None]).mean(axis=1)
    return CMCCurve(rates=rates)


def objective_value(
    source,
    eval_set: list[tuple[ImagePatches, ImagePatches]],
    bank: MetricBank,
    t_c: float,
    solver: str = "greedy",
) -> float:
    """Mean 1-based rank of the correct matches (lower is better)."""
    from .matching import rank_gallery

    if not eval_set:
        raise EmptyRanks("empty evaluation set")
    gallery = [v for _, v in eval_set]
    ranks = [
        rank_gallery(u, gallery, source, bank, t_c, solver=solver).correct_rank
        for u, _ in eval_set
    ]
    return float(np.mean(ranks))


# -- dataset representation ---------------------------------------------------

@dataclass
class IdentityRecord:
    person_id: str
    probe_id: str
    gallery_id: str
    probe_pixels: np.ndarray = field(repr=False)    # (H, W, 3) float in [0, 1]
    gallery_pixels: np.ndarray = field(repr=False)
    pose_label: str = ""


@dataclass(frozen=True)
class ProtocolConfig:
    splits: int = 10
    fraction: float = 0.5
    threads: int = 1
    methods: tuple[str, ...] = ALL_METHODS
    multi_mode: str = "off"   # off | manual | auto
    k_max: int = 6
    min_pairs: int = 10


@dataclass
class SplitResult:
    seed: int
    curves: dict[str, CMCCurve]
    ranks: dict[str, list[int]]
    train_seconds: float
    match_ms_per_pair: float


@dataclass
class ExperimentReport:
    splits: list[SplitResult]
    mean_curves: dict[str, CMCCurve]
    config_fingerprint: str
    seeds: list[int]

    def mean_rate(self, method: str, rank: int) -> float:
        return self.mean_curves[method].rate(rank)


def _mean_curves(splits: list[SplitResult]) -> dict[str, CMCCurve]:
    methods = splits[0].curves.keys()
    return {
        m: CMCCurve(
            rates=np.mean([s.curves[m].rates for s in splits], axis=0)
        )
        for m in methods
    }


# -- one split ----------------------------------------------------------------

@dataclass
class FittedPipeline:
    """Everything fitted on one training split."""

    bank: MetricBank
    structure: object                 # CorrespondenceStructure or callable
    structure_single: object
    simple_avg: object
    registry: StructureRegistry | None
    pca: object
    probe_grid: PatchGrid
    gallery_grid: PatchGrid
    coloc: np.ndarray
    range_mask: np.ndarray
    t_c: float
    trace: object = None


def extract_features(
    records: list[IdentityRecord],
    probe_grid: PatchGrid,
    gallery_grid: PatchGrid,
    feature_cfg,
) -> dict[str, np.ndarray]:
    """Raw per-patch features for every image, keyed by image id."""
    feats = {}
    for rec in records:
        feats[rec.probe_id] = image_patch_features(
            rec.probe_pixels, probe_grid, feature_cfg
        )
        feats[rec.gallery_id] = image_patch_features(
            rec.gallery_pixels, gallery_grid, feature_cfg
        )
    return feats


def fit_split(
    records: list[IdentityRecord],
    raw_feats: dict[str, np.ndarray],
    train_idx: np.ndarray,
    probe_grid: PatchGrid,
    gallery_grid: PatchGrid,
    learn_cfg: LearnConfig,
    protocol: ProtocolConfig,
    feature_cfg,
    metric_mode: MetricMode,
    ridge,
    seed: int,
) -> tuple[FittedPipeline, dict[str, np.ndarray]]:
    """Fit PCA, metric bank and structures on the training identities."""
    train_records = [records[i] for i in train_idx]

    pca = None
    if feature_cfg.pca_dim is not None:
        stack = np.concatenate(
            [raw_feats[r.probe_id] for r in train_records]
            + [raw_feats[r.gallery_id] for r in train_records]
        )
        pca = fit_pca(stack, feature_cfg.pca_dim)
    feats = {
        key: (apply_pca(pca, f) if pca is not None else f)
        for key, f in raw_feats.items()
    }

    def patches(rec: IdentityRecord) -> tuple[ImagePatches, ImagePatches]:
        u = ImagePatches(rec.probe_id, "A", rec.person_id, probe_grid,
                         feats[rec.probe_id])
        v = ImagePatches(rec.gallery_id, "B", rec.person_id, gallery_grid,
                         feats[rec.gallery_id])
        return u, v

    train_set = [patches(r) for r in train_records]
    train_pairs = [(u.feats, v.feats) for u, v in train_set]
    bank = fit_metric_bank(
        train_pairs, probe_grid, gallery_grid, learn_cfg.t_d,
        mode=metric_mode, ridge=ridge, seed=seed,
    )

    structure, trace = learn(train_set, bank, learn_cfg, seed=seed, tag="single")
    pool = build_structure_pool(train_set, bank, learn_cfg)
    simple_avg = simple_average_structure(pool, probe_grid, gallery_grid,
                                          learn_cfg.t_d)

    registry = None
    source = structure
    if protocol.multi_mode != "off":
        manual = protocol.multi_mode == "manual"
        labels = {r.probe_id: (r.pose_label or "none") for r in train_records}
        labels.update({r.gallery_id: (r.pose_label or "none") for r in train_records})
        model_a = cluster_pose_groups(
            [(r.probe_id, r.probe_pixels) for r in train_records],
            "A", auto=not manual, k_max=protocol.k_max,
            manual_labels=labels, seed=seed,
        )
        model_b = cluster_pose_groups(
            [(r.gallery_id, r.gallery_pixels) for r in train_records],
            "B", auto=not manual, k_max=protocol.k_max,
            manual_labels=labels, seed=seed,
        )
        pairs = form_group_pairs(
            model_a, model_b,
            [(r.person_id, r.probe_id, r.gallery_id) for r in train_records],
            min_pairs=protocol.min_pairs,
        )
        registry = learn_registry(
            train_set, pairs, bank, learn_cfg, seed=seed,
            model_a=model_a, model_b=model_b,
        )

    fitted = FittedPipeline(
        bank=bank,
        structure=source,
        structure_single=structure,
        simple_avg=simple_avg,
        registry=registry,
        pca=pca,
        probe_grid=probe_grid,
        gallery_grid=gallery_grid,
        coloc=gridmod.colocated_map(probe_grid, gallery_grid),
        range_mask=gridmod.in_range_mask(probe_grid, gallery_grid, learn_cfg.t_d),
        t_c=learn_cfg.t_c,
        trace=trace,
    )
    return fitted, feats


def _ac_global_score(u: ImagePatches, v: ImagePatches, fitted: FittedPipeline) -> float:
    """All-ones adjacency structure under the global constraint."""
    log_phi = fitted.bank.log_similarity_matrix(u.feats, v.feats)
    values = np.where(fitted.range_mask, np.maximum(log_phi, LOG_FLOOR), 0.0)
    m = ScoreMatrix(values=values, feasible=fitted.range_mask.copy())
    assignment, unmatched = solve_with_unmatched_penalty(m)
    return math.fsum([assignment.total] + [LOG_FLOOR] * len(unmatched))


def score_pair(method: str, u, v, fitted: FittedPipeline,
               registry_source=None) -> float:
    if method == "proposed":
        src = registry_source if registry_source is not None else fitted.structure_single
        return match_score(u, v, src, fitted.bank, fitted.t_c).score
    if method == "non_global":
        return greedy_match_score(u, v, fitted.structure_single, fitted.bank, fitted.t_c)
    if method == "non_structure":
        return colocated_score(u, v, fitted.coloc, fitted.bank)
    if method == "simple_average":
        return match_score(u, v, fitted.simple_avg, fitted.bank, fitted.t_c).score
    if method == "ac_global":
        return _ac_global_score(u, v, fitted)
    raise ValueError(f"unknown method {method!r}")


def evaluate_split(
    records: list[IdentityRecord],
    feats: dict[str, np.ndarray],
    test_idx: np.ndarray,
    fitted: FittedPipeline,
    protocol: ProtocolConfig,
    seed: int,
    train_seconds: float,
) -> SplitResult:
    test_records = [records[i] for i in test_idx]
    gallery = [
        ImagePatches(r.gallery_id, "B", r.person_id, fitted.gallery_grid,
                     feats[r.gallery_id])
        for r in test_records
    ]
    probes = [
        ImagePatches(r.probe_id, "A", r.person_id, fitted.probe_grid,
                     feats[r.probe_id])
        for r in test_records
    ]
    registry_source = None
    if fitted.registry is not None:
        pixels = {r.probe_id: r.probe_pixels for r in test_records}
        pixels.update({r.gallery_id: r.gallery_pixels for r in test_records})
        registry_source = fitted.registry.selector(pixels)

    def rank_probe(p: int) -> tuple[dict[str, int], float, int]:
        u = probes[p]
        out = {}
        proposed_time, proposed_pairs = 0.0, 0
        for method in protocol.methods:
            t0 = time.perf_counter()
            scores = {
                v.image_id: score_pair(method, u, v, fitted, registry_source)
                for v in gallery
            }
            if method == "proposed":
                proposed_time += time.perf_counter() - t0
                proposed_pairs += len(gallery)
            out[method] = rank_from_scores(scores, test_records[p].gallery_id)
        return out, proposed_time, proposed_pairs

    indices = range(len(probes))
    if protocol.threads > 1:
        with ThreadPoolExecutor(max_workers=protocol.threads) as pool:
            per_probe = list(pool.map(rank_probe, indices))
    else:
        per_probe = [rank_probe(p) for p in indices]

    match_time = sum(t for _, t, _ in per_probe)
    n_pairs = sum(c for _, _, c in per_probe)
    ranks = {m: [pp[m] for pp, _, _ in per_probe] for m in protocol.methods}
    curves = {
        m: cmc_from_ranks(r, max_rank=len(gallery)) for m, r in ranks.items()
    }
    ms_per_pair = 1000.0 * match_time / n_pairs if n_pairs else 0.0
    return SplitResult(
        seed=seed, curves=curves, ranks=ranks,
        train_seconds=train_seconds, match_ms_per_pair=ms_per_pair,
    )


def run_experiment(
    records: list[IdentityRecord],
    probe_spec,
    gallery_spec,
    feature_cfg,
    learn_cfg: LearnConfig,
    protocol: ProtocolConfig,
    metric_mode: MetricMode = MetricMode.SHARED,
    ridge=None,
    seeds: list[int] | None = None,
    config_fingerprint: str = "",
) -> ExperimentReport:
    """Repeated random identity splits; fit on train, CMC on test."""
    if len(records) < 4:
        raise DatasetTooSmall(f"need >= 4 identities, got {len(records)}")
    if seeds is None:
        seeds = list(range(protocol.splits))
    if len(seeds) != protocol.splits:
        raise ValueError("need one seed per split")

    probe_grid = build_grid(probe_spec)
    gallery_grid = build_grid(gallery_spec)
    raw_feats = extract_features(records, probe_grid, gallery_grid, feature_cfg)

    results = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        perm = rng.permutation(len(records))
        n_train = int(round(protocol.fraction * len(records)))
        train_idx = np.sort(perm[:n_train])
        test_idx = np.sort(perm[n_train:])
        t0 = time.perf_counter()
        fitted, feats = fit_split(
            records, raw_feats, train_idx, probe_grid, gallery_grid,
            learn_cfg, protocol, feature_cfg, metric_mode, ridge, seed,
        )
        train_seconds = time.perf_counter() - t0
        results.append(evaluate_split(
            records, feats, test_idx, fitted, protocol, seed, train_seconds,
        ))

    return ExperimentReport(
        splits=results,
        mean_curves=_mean_curves(results),
        config_fingerprint=config_fingerprint,
        seeds=list(seeds),
    )
