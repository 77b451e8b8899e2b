"""Correlation assembly, match scores, and gallery ranking."""

import math
from dataclasses import replace

import numpy as np
import pytest

from patchcorr.assignment import brute_force_assignment
from patchcorr.errors import GridMismatch, NoCorrectMatch
from patchcorr.grid import GridSpec, build_grid
from patchcorr.matching import (
    LOG_FLOOR,
    ImagePatches,
    correlation_matrix,
    greedy_match_score,
    match_score,
    rank_gallery,
)
from patchcorr.metric import KissmeModel, MetricBank, MetricMode
from patchcorr.structure import init_structure

SPEC = GridSpec(image_w=8, image_h=8, patch_w=4, patch_h=4, stride_x=4, stride_y=4)


def identity_bank(dim=3, sigma=1.0):
    model = KissmeModel(m_matrix=np.eye(dim), calib_sigma=sigma)
    return MetricBank(mode=MetricMode.SHARED, fallback=model)


def image(image_id, person, feats, camera="A"):
    return ImagePatches(image_id, camera, person, build_grid(SPEC), feats)


def one_hot_structure(t_d=2, probs=None):
    g = build_grid(SPEC)
    s = init_structure(g, g, t_d=t_d)
    if probs is not None:
        s = replace(s, probs=np.asarray(probs, dtype=np.float64))
    else:
        s = replace(s, probs=np.eye(4))
    return s


class TestCorrelationMatrix:
    def setup_method(self):
        self.bank = identity_bank()
        self.feats = np.zeros((4, 3))

    def test_probability_one_similarity_one_gives_zero(self):
        u = image("u", "p1", self.feats)
        v = image("v", "p1", self.feats, camera="B")
        s = one_hot_structure()
        m = correlation_matrix(u, v, s, self.bank, t_c=0.05)
        np.testing.assert_allclose(np.diag(m.values), 0.0, atol=1e-12)
        assert m.feasible[0, 0] and not m.feasible[0, 1]

    def test_hand_arithmetic_entry(self):
        """P = 0.5 and similarity 1/e give -1 + ln 0.5."""
        feats_v = self.feats.copy()
        feats_v[:, 0] = 1.0  # distance 1 from u everywhere -> phi = exp(-1)
        u = image("u", "p1", self.feats)
        v = image("v", "p1", feats_v, camera="B")
        probs = np.full((4, 4), 0.5) * one_hot_structure(t_d=4).range_mask()
        s = replace(one_hot_structure(t_d=4), probs=probs)
        m = correlation_matrix(u, v, s, self.bank, t_c=0.05)
        np.testing.assert_allclose(
            m.values[0, 0], -1.0 + math.log(0.5), atol=1e-12
        )

    def test_probability_below_threshold_is_infeasible(self):
        probs = np.eye(4) * 0.04 + (np.ones((4, 4)) - np.eye(4)) * 0.32
        probs = probs * one_hot_structure(t_d=4).range_mask()
        s = replace(one_hot_structure(t_d=4), probs=probs)
        u = image("u", "p1", self.feats)
        v = image("v", "p1", self.feats, camera="B")
        m = correlation_matrix(u, v, s, self.bank, t_c=0.05)
        assert not m.feasible[0, 0]
        assert m.feasible[0, 1]

    def test_grid_mismatch(self):
        other = build_grid(GridSpec(12, 12, 4, 4, 4, 4))
        u = ImagePatches("u", "A", "p1", other, np.zeros((9, 3)))
        v = image("v", "p1", self.feats, camera="B")
        with pytest.raises(GridMismatch):
            correlation_matrix(u, v, one_hot_structure(), self.bank, 0.05)


class TestMatchScore:
    def setup_method(self):
        self.bank = identity_bank()

    def test_perfect_self_match(self):
        rng = np.random.default_rng(0)
        feats = rng.normal(size=(4, 3))
        u = image("u", "p1", feats)
        v = image("v", "p1", feats, camera="B")
        report = match_score(u, v, one_hot_structure(), self.bank, t_c=0.05)
        assert report.score == 0.0
        assert report.assignment.pairs == ((0, 0), (1, 1), (2, 2), (3, 3))
        assert report.unmatched_rows == ()

    def test_score_equals_assignment_total(self):
        rng = np.random.default_rng(1)
        u = image("u", "p1", rng.normal(size=(4, 3)))
        v = image("v", "p1", rng.normal(size=(4, 3)), camera="B")
        s = one_hot_structure(t_d=3)
        report = match_score(u, v, s, self.bank, t_c=0.01)
        assert report.score == report.assignment.total

    def test_matches_brute_force_on_toy(self):
        rng = np.random.default_rng(2)
        u = image("u", "p1", rng.normal(size=(4, 3)))
        v = image("v", "p1", rng.normal(size=(4, 3)), camera="B")
        s = one_hot_structure(t_d=3)
        report = match_score(u, v, s, self.bank, t_c=0.01)
        m = correlation_matrix(u, v, s, self.bank, t_c=0.01)
        oracle = brute_force_assignment(m)
        assert report.assignment.total == oracle.total
        assert report.assignment.pairs == oracle.pairs

    def test_all_rows_masked_gives_floor_penalties(self):
        probs = np.full((4, 4), 0.01) * one_hot_structure(t_d=4).range_mask()
        s = replace(one_hot_structure(t_d=4), probs=probs)
        u = image("u", "p1", np.zeros((4, 3)))
        v = image("v", "p1", np.zeros((4, 3)), camera="B")
        report = match_score(u, v, s, self.bank, t_c=0.05)
        assert report.unmatched_rows == (0, 1, 2, 3)
        np.testing.assert_allclose(report.score, 4 * LOG_FLOOR, atol=1e-9)

    def test_gallery_patch_order_invariance(self):
        """Permuting gallery feature construction order must not matter:
        scores depend only on (patch index -> feature) mapping."""
        rng = np.random.default_rng(3)
        feats = rng.normal(size=(4, 3))
        u = image("u", "p1", feats)
        v = image("v", "p1", feats + 0.1 * rng.normal(size=(4, 3)), camera="B")
        s = one_hot_structure(t_d=3)
        r1 = match_score(u, v, s, self.bank, t_c=0.01)
        r2 = match_score(u, v, s, self.bank, t_c=0.01)
        assert r1.score == r2.score and r1.assignment == r2.assignment

    def test_greedy_upper_bounds_constrained_score(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            u = image("u", "p1", rng.normal(size=(4, 3)))
            v = image("v", "p1", rng.normal(size=(4, 3)), camera="B")
            s = one_hot_structure(t_d=4)
            greedy = greedy_match_score(u, v, s, self.bank, t_c=0.01)
            constrained = match_score(u, v, s, self.bank, t_c=0.01).score
            assert greedy >= constrained - 1e-9


class ScaledBank:
    """Wraps a bank, multiplying every similarity by a constant in (0, 1]."""

    def __init__(self, base: MetricBank, kappa: float):
        self.base = base
        self.log_kappa = math.log(kappa)

    def log_similarity_matrix(self, fu, fv):
        return self.base.log_similarity_matrix(fu, fv) + self.log_kappa


class TestRankGallery:
    def setup_method(self):
        self.bank = identity_bank()
        rng = np.random.default_rng(5)
        self.probe_feats = rng.normal(size=(4, 3))
        self.u = image("probe", "p0", self.probe_feats)

    def gallery(self, n=5, noise=0.3, seed=6):
        rng = np.random.default_rng(seed)
        out = []
        for k in range(n):
            base = self.probe_feats if k == 0 else rng.normal(size=(4, 3))
            feats = base + noise * rng.normal(size=(4, 3)) * (k == 0)
            out.append(image(f"g{k}", f"p{k}", feats, camera="B"))
        return out

    def test_single_image_gallery(self):
        gallery = [image("g0", "p0", self.probe_feats, camera="B")]
        result = rank_gallery(self.u, gallery, one_hot_structure(t_d=2),
                              self.bank, 0.05)
        assert result.correct_rank == 1

    def test_correct_match_with_highest_score_ranks_first(self):
        result = rank_gallery(self.u, self.gallery(noise=0.05), one_hot_structure(t_d=2),
                              self.bank, 0.05)
        assert result.correct_rank == 1

    def test_rank_matches_independent_sort(self):
        gallery = self.gallery(n=10, noise=0.8)
        s = one_hot_structure(t_d=2)
        result = rank_gallery(self.u, gallery, s, self.bank, 0.05)
        scores = {
            v.image_id: match_score(self.u, v, s, self.bank, 0.05).score
            for v in gallery
        }
        ordered = sorted(scores.items(), key=lambda t: (-t[1], t[0]))
        expected = 1 + [k for k, _ in ordered].index("g0")
        assert result.correct_rank == expected
        assert [g for g, _ in result.ordered] == [k for k, _ in ordered]

    def test_no_correct_match_raises(self):
        gallery = [image("g1", "p1", self.probe_feats, camera="B")]
        with pytest.raises(NoCorrectMatch):
            rank_gallery(self.u, gallery, one_hot_structure(t_d=2), self.bank, 0.05)

    def test_similarity_scaling_shifts_scores_uniformly(self):
        """With full feasibility, scaling phi by kappa shifts every score by
        n_rows * log(kappa) and keeps the ranking."""
        gallery = self.gallery(n=6, noise=0.5)
        s = one_hot_structure(t_d=2)
        base = rank_gallery(self.u, gallery, s, self.bank, 0.05)
        scaled_bank = ScaledBank(self.bank, kappa=0.25)
        scaled = rank_gallery(self.u, gallery, s, scaled_bank, 0.05)
        assert [g for g, _ in base.ordered] == [g for g, _ in scaled.ordered]
        for (g1, s1), (g2, s2) in zip(base.ordered, scaled.ordered):
            np.testing.assert_allclose(
                s2 - s1, 4 * math.log(0.25), atol=1e-9
            )

    def test_threads_do_not_change_result(self):
        gallery = self.gallery(n=8, noise=0.6)
        s = one_hot_structure(t_d=2)
        single = rank_gallery(self.u, gallery, s, self.bank, 0.05, threads=1)
        multi = rank_gallery(self.u, gallery, s, self.bank, 0.05, threads=4)
        assert single.ordered == multi.ordered
        assert single.correct_rank == multi.correct_rank
