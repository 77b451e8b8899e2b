"""CMC curves, the rank objective, and the split experiment pipeline."""

import numpy as np
import pytest

from patchcorr.errors import DatasetTooSmall, EmptyRanks
from patchcorr.evaluation import (
    IdentityRecord,
    ProtocolConfig,
    cmc_from_ranks,
    objective_value,
    run_experiment,
)
from patchcorr.features import FeatureConfig
from patchcorr.grid import GridSpec, build_grid
from patchcorr.learning import LearnConfig
from patchcorr.matching import ImagePatches
from patchcorr.metric import KissmeModel, MetricBank, MetricMode
from patchcorr.structure import init_structure

SMALL_PROBE = GridSpec(image_w=24, image_h=24, patch_w=8, patch_h=8,
                       stride_x=8, stride_y=8)
SMALL_GALLERY = GridSpec(image_w=24, image_h=24, patch_w=8, patch_h=8,
                         stride_x=4, stride_y=4)
SMALL_FEATURES = FeatureConfig(bins_per_channel=8, grad_orient_bins=4,
                               grad_cells=(1, 1), pca_dim=12)
SMALL_LEARN = LearnConfig(structures_per_iter=4, candidate_ranges=(2, 3),
                          max_iters=6, t_d=6)


class TestCmcFromRanks:
    def test_all_rank_one_is_flat_one(self):
        curve = cmc_from_ranks([1, 1, 1], max_rank=5)
        np.testing.assert_array_equal(curve.rates, np.ones(5))

    def test_counting_example(self):
        curve = cmc_from_ranks([1, 2, 3, 4], max_rank=4)
        np.testing.assert_allclose(curve.rates, [0.25, 0.5, 0.75, 1.0])

    def test_single_rank_step_function(self):
        curve = cmc_from_ranks([3], max_rank=5)
        np.testing.assert_array_equal(curve.rates, [0, 0, 1, 1, 1])

    def test_monotone_nondecreasing_random(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            ranks = rng.integers(1, 11, size=rng.integers(1, 30))
            curve = cmc_from_ranks(ranks, max_rank=10)
            assert np.all(np.diff(curve.rates) >= 0)
            assert np.all((curve.rates >= 0) & (curve.rates <= 1))
            assert curve.rates[-1] == 1.0  # max rank covers the gallery

    def test_empty_ranks_rejected(self):
        with pytest.raises(EmptyRanks):
            cmc_from_ranks([], max_rank=3)


def toy_eval_set(n=5, flip=False):
    """Identities with scalar features; flip makes every score inverted."""
    spec = GridSpec(image_w=8, image_h=4, patch_w=4, patch_h=4, stride_x=4,
                    stride_y=4)
    grid = build_grid(spec)
    out = []
    for k in range(n):
        base = np.full((2, 1), float(4 * k))
        gal = -base if flip else base
        out.append((
            ImagePatches(f"A{k}", "A", f"p{k}", grid, base),
            ImagePatches(f"B{k}", "B", f"p{k}", grid, gal),
        ))
    return out, grid


def scalar_bank():
    return MetricBank(mode=MetricMode.SHARED,
                      fallback=KissmeModel(np.eye(1), 1.0))


class TestObjectiveValue:
    def test_perfect_matcher_gives_one(self):
        eval_set, grid = toy_eval_set()
        s = init_structure(grid, grid, t_d=2)
        assert objective_value(s, eval_set, scalar_bank(), t_c=0.05) == 1.0

    def test_recount_oracle(self):
        from patchcorr.matching import rank_gallery

        eval_set, grid = toy_eval_set(n=6)
        # perturb galleries so rankings are nontrivial
        rng = np.random.default_rng(1)
        eval_set = [
            (u, ImagePatches(v.image_id, "B", v.person_id, grid,
                             v.feats + rng.normal(scale=6.0, size=v.feats.shape)))
            for u, v in eval_set
        ]
        s = init_structure(grid, grid, t_d=2)
        value = objective_value(s, eval_set, scalar_bank(), t_c=0.05)
        gallery = [v for _, v in eval_set]
        ranks = [
            rank_gallery(u, gallery, s, scalar_bank(), 0.05,
                         solver="greedy").correct_rank
            for u, _ in eval_set
        ]
        assert value == np.mean(ranks)

    def test_reversed_matcher_gives_gallery_size(self):
        """Swapped identities: every correct match ranks last (G = 2)."""
        eval_set, _ = toy_eval_set(n=2)
        u0, v0 = eval_set[0]
        u1, v1 = eval_set[1]
        swapped = [(u0, ImagePatches("B0", "B", "p0", v0.grid, v1.feats)),
                   (u1, ImagePatches("B1", "B", "p1", v1.grid, v0.feats))]
        s = init_structure(u0.grid, u0.grid, t_d=2)
        value = objective_value(s, swapped, scalar_bank(), t_c=0.05)
        assert value == 2.0


def make_records(n=12, seed=0, noise=0.02):
    rng = np.random.default_rng(seed)
    records = []
    for k in range(n):
        img = rng.random((24, 24, 3))
        gal = np.clip(img + rng.normal(0, noise, img.shape), 0, 1)
        records.append(IdentityRecord(
            person_id=f"p{k:03d}", probe_id=f"A{k:03d}", gallery_id=f"B{k:03d}",
            probe_pixels=img, gallery_pixels=gal, pose_label="",
        ))
    return records


class TestRunExperiment:
    def protocol(self, **kw):
        base = dict(splits=1, fraction=0.5, threads=1,
                    methods=("proposed", "non_global", "non_structure"))
        base.update(kw)
        return ProtocolConfig(**base)

    def test_deterministic_per_seed(self):
        records = make_records()
        kwargs = dict(
            probe_spec=SMALL_PROBE, gallery_spec=SMALL_GALLERY,
            feature_cfg=SMALL_FEATURES, learn_cfg=SMALL_LEARN,
            protocol=self.protocol(), seeds=[7],
        )
        r1 = run_experiment(make_records(), **kwargs)
        r2 = run_experiment(records, **kwargs)
        for m in r1.mean_curves:
            np.testing.assert_array_equal(
                r1.mean_curves[m].rates, r2.mean_curves[m].rates
            )

    def test_two_split_mean_is_arithmetic_mean(self):
        report = run_experiment(
            make_records(), SMALL_PROBE, SMALL_GALLERY, SMALL_FEATURES,
            SMALL_LEARN, self.protocol(splits=2), seeds=[0, 1],
        )
        for m, curve in report.mean_curves.items():
            stack = np.stack([s.curves[m].rates for s in report.splits])
            np.testing.assert_allclose(curve.rates, stack.mean(axis=0),
                                       atol=1e-15)

    def test_identity_partition_disjoint_and_exhaustive(self):
        records = make_records()
        report = run_experiment(
            records, SMALL_PROBE, SMALL_GALLERY, SMALL_FEATURES, SMALL_LEARN,
            self.protocol(), seeds=[3],
        )
        split = report.splits[0]
        # the gallery size equals the test half
        assert report.mean_curves["proposed"].max_rank == len(records) // 2
        assert len(split.ranks["proposed"]) == len(records) // 2

    def test_matching_beats_chance_on_easy_records(self):
        report = run_experiment(
            make_records(n=16, noise=0.01), SMALL_PROBE, SMALL_GALLERY,
            SMALL_FEATURES, SMALL_LEARN, self.protocol(), seeds=[0],
        )
        assert report.mean_rate("proposed", 1) >= 0.75

    def test_threads_do_not_change_curves(self):
        records = make_records()
        base = run_experiment(
            records, SMALL_PROBE, SMALL_GALLERY, SMALL_FEATURES, SMALL_LEARN,
            self.protocol(threads=1), seeds=[5],
        )
        threaded = run_experiment(
            records, SMALL_PROBE, SMALL_GALLERY, SMALL_FEATURES, SMALL_LEARN,
            self.protocol(threads=4), seeds=[5],
        )
        for m in base.mean_curves:
            np.testing.assert_array_equal(
                base.mean_curves[m].rates, threaded.mean_curves[m].rates
            )

    def test_all_methods_run(self):
        report = run_experiment(
            make_records(), SMALL_PROBE, SMALL_GALLERY, SMALL_FEATURES,
            SMALL_LEARN,
            self.protocol(methods=("proposed", "non_global", "non_structure",
                                   "simple_average", "ac_global")),
            seeds=[0],
        )
        assert set(report.mean_curves) == {
            "proposed", "non_global", "non_structure", "simple_average",
            "ac_global",
        }

    def test_dataset_too_small(self):
        with pytest.raises(DatasetTooSmall):
            run_experiment(
                make_records(n=3), SMALL_PROBE, SMALL_GALLERY, SMALL_FEATURES,
                SMALL_LEARN, self.protocol(), seeds=[0],
            )
