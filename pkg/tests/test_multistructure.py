"""Pose descriptors, grouping, group pairs, registry learning and routing."""

import numpy as np
import pytest

from patchcorr.config import DEFAULT_GALLERY_GRID, DEFAULT_PROBE_GRID
from patchcorr.errors import TooFewImages
from patchcorr.grid import build_grid, colocated_map
from patchcorr.learning import LearnConfig
from patchcorr.matching import ImagePatches
from patchcorr.multistructure import (
    StructureRegistry,
    cluster_pose_groups,
    form_group_pairs,
    learn_registry,
    load_registry,
    pose_descriptor,
    save_registry,
    select_structure,
)
from patchcorr.structure import init_structure
from patchcorr.synth import PoseSpec, TransformSpec, generate_dataset, interior_rows

PROBE = build_grid(DEFAULT_PROBE_GRID)
GALLERY = build_grid(DEFAULT_GALLERY_GRID)


def solid_top_image(top_rgb, bottom_rgb=(0.5, 0.5, 0.5), h=128, w=48, noise=0.0,
                    rng=None):
    img = np.empty((h, w, 3))
    img[: h // 4] = top_rgb
    img[h // 4:] = bottom_rgb
    if noise and rng is not None:
        img = np.clip(img + rng.normal(0, noise, img.shape), 0, 1)
    return img


class TestPoseDescriptor:
    def test_identical_images_identical_descriptors(self):
        rng = np.random.default_rng(0)
        img = rng.random((128, 48, 3))
        np.testing.assert_array_equal(pose_descriptor(img),
                                      pose_descriptor(img.copy()))

    def test_reads_top_quarter_only(self):
        rng = np.random.default_rng(1)
        img = rng.random((128, 48, 3))
        altered = img.copy()
        altered[64:] = rng.random((64, 48, 3))
        np.testing.assert_array_equal(pose_descriptor(img),
                                      pose_descriptor(altered))

    def test_generator_archetypes_within_pose_closer_than_across(self):
        spec = TransformSpec(pose_mix=(PoseSpec("front", 0.5, 8, 0),
                                       PoseSpec("back", 0.5, -8, 0)),
                             noise_sigma=4 / 255)
        ds = generate_dataset(3, 24, spec, PROBE, GALLERY)
        labels = {r.image_id: r.pose_label for r in ds.rows}
        for cam in ("A", "B"):
            ids = [r.image_id for r in ds.rows if r.camera_id == cam]
            desc = {i: pose_descriptor(ds.images[i] / 255.0) for i in ids}
            within, across = [], []
            for a in range(len(ids)):
                for b in range(a + 1, len(ids)):
                    d = np.linalg.norm(desc[ids[a]] - desc[ids[b]])
                    same = labels[ids[a]] == labels[ids[b]]
                    (within if same else across).append(d)
            assert np.mean(within) < np.mean(across)


class TestClusterPoseGroups:
    def test_manual_mode_follows_labels(self):
        rng = np.random.default_rng(2)
        images, labels = [], {}
        for k in range(10):
            pose = "L" if k % 2 == 0 else "R"
            top = (0.9, 0.1, 0.1) if pose == "L" else (0.1, 0.1, 0.9)
            images.append((f"i{k}", solid_top_image(top, rng=rng, noise=0.01)))
            labels[f"i{k}"] = pose
        model = cluster_pose_groups(images, "A", auto=False, manual_labels=labels)
        assert model.group_ids == ["L", "R"]
        assert all(model.assignments[i] == labels[i] for i, _ in images)

    def test_auto_mode_separates_two_blobs(self):
        rng = np.random.default_rng(3)
        images, truth = [], {}
        for k in range(24):
            pose = "L" if k < 12 else "R"
            top = (0.9, 0.2, 0.1) if pose == "L" else (0.05, 0.3, 0.95)
            images.append((f"i{k}", solid_top_image(top, rng=rng, noise=0.02)))
            truth[f"i{k}"] = pose
        model = cluster_pose_groups(images, "A", auto=True, k_max=5, seed=0)
        assert len(model.group_ids) == 2
        # agreement vs generator labels (cluster naming is arbitrary)
        clusters = {}
        for iid, g in model.assignments.items():
            clusters.setdefault(g, []).append(truth[iid])
        agreement = sum(
            max(v.count(x) for x in set(v)) for v in clusters.values()
        ) / len(images)
        assert agreement >= 0.95

    def test_auto_mode_identical_descriptors_single_group(self):
        images = [(f"i{k}", solid_top_image((0.4, 0.4, 0.4))) for k in range(8)]
        model = cluster_pose_groups(images, "A", auto=True, k_max=5, seed=0)
        assert len(model.group_ids) == 1

    def test_too_few_images(self):
        with pytest.raises(TooFewImages):
            cluster_pose_groups([("a", solid_top_image((1, 0, 0)))], "A", auto=True)

    def test_classifier_confidence_on_clean_blobs(self):
        rng = np.random.default_rng(4)
        images, labels = [], {}
        for k in range(20):
            pose = "L" if k % 2 == 0 else "R"
            top = (0.9, 0.1, 0.1) if pose == "L" else (0.1, 0.1, 0.9)
            images.append((f"i{k}", solid_top_image(top, rng=rng, noise=0.02)))
            labels[f"i{k}"] = pose
        model = cluster_pose_groups(images, "A", auto=False, manual_labels=labels)
        hit, confident = 0, 0
        for k in range(20, 30):
            pose = "L" if k % 2 == 0 else "R"
            top = (0.9, 0.1, 0.1) if pose == "L" else (0.1, 0.1, 0.9)
            g, _, ok = model.classify(
                pose_descriptor(solid_top_image(top, rng=rng, noise=0.02))
            )
            hit += g == pose
            confident += ok
        assert hit == 10
        assert confident >= 9


class TestFormGroupPairs:
    def model(self, assignments, camera):
        from patchcorr.multistructure import PoseGroupModel

        groups = sorted(set(assignments.values()))
        return PoseGroupModel(
            camera_id=camera, group_ids=groups, assignments=assignments,
            centroids=np.zeros((len(groups), 3)),
            weights=np.zeros((len(groups), 4)),
            confidence_threshold=0.0,
        )

    def test_single_combination(self):
        m_a = self.model({f"A{k}": "g0" for k in range(12)}, "A")
        m_b = self.model({f"B{k}": "h0" for k in range(12)}, "B")
        train = [(f"p{k}", f"A{k}", f"B{k}") for k in range(12)]
        pairs = form_group_pairs(m_a, m_b, train, min_pairs=10)
        assert list(pairs) == [("g0", "h0")]
        assert len(pairs[("g0", "h0")]) == 12

    def test_min_pairs_one_emits_every_observed_combination(self):
        m_a = self.model({"A0": "g0", "A1": "g1"}, "A")
        m_b = self.model({"B0": "h0", "B1": "h0"}, "B")
        train = [("p0", "A0", "B0"), ("p1", "A1", "B1")]
        pairs = form_group_pairs(m_a, m_b, train, min_pairs=1)
        assert set(pairs) == {("g0", "h0"), ("g1", "h0")}

    def test_under_threshold_combination_dropped(self):
        m_a = self.model({"A0": "g0", "A1": "g1"}, "A")
        m_b = self.model({"B0": "h0", "B1": "h0"}, "B")
        train = [("p0", "A0", "B0"), ("p1", "A1", "B1")]
        assert form_group_pairs(m_a, m_b, train, min_pairs=2) == {}


def synth_training_setup(spec, n_ids, seed=0):
    """Features + train set + bank on the default geometry."""
    from patchcorr.features import FeatureConfig, apply_pca, fit_pca, image_patch_features
    from patchcorr.metric import fit_metric_bank

    ds = generate_dataset(seed, n_ids, spec, PROBE, GALLERY)
    fcfg = FeatureConfig()
    feats = {}
    for key, im in ds.images.items():
        g = PROBE if key.startswith("A") else GALLERY
        feats[key] = image_patch_features(im / 255.0, g, fcfg)
    pca = fit_pca(np.concatenate(list(feats.values())), 34)
    feats = {k: apply_pca(pca, v) for k, v in feats.items()}
    train_pairs = [(feats[f"A{i:04d}"], feats[f"B{i:04d}"]) for i in range(n_ids)]
    bank = fit_metric_bank(train_pairs, PROBE, GALLERY, 32)
    train_set = [
        (ImagePatches(f"A{i:04d}", "A", f"p{i:04d}", PROBE, feats[f"A{i:04d}"]),
         ImagePatches(f"B{i:04d}", "B", f"p{i:04d}", GALLERY, feats[f"B{i:04d}"]))
        for i in range(n_ids)
    ]
    return ds, train_set, bank


class TestLearnRegistry:
    def test_single_group_local_equals_global(self):
        spec = TransformSpec(dy=4, dx=0, noise_sigma=4 / 255)
        _, train_set, bank = synth_training_setup(spec, 20)
        cfg = LearnConfig(structures_per_iter=8, max_iters=5)
        pairs = {("g0", "h0"): [u.person_id for u, _ in train_set]}
        registry = learn_registry(train_set, pairs, bank, cfg, seed=0)
        local = registry.locals[("g0", "h0")]
        np.testing.assert_array_equal(local.probs, registry.global_structure.probs)

    def test_two_pose_locals_recover_their_shifts(self):
        spec = TransformSpec(pose_mix=(PoseSpec("front", 0.5, 8, 0),
                                       PoseSpec("back", 0.5, -8, 0)),
                             noise_sigma=4 / 255)
        ds, train_set, bank = synth_training_setup(spec, 40, seed=1)
        label_of = {r.person_id: r.pose_label for r in ds.rows}
        groups = {}
        for u, _ in train_set:
            groups.setdefault(label_of[u.person_id], []).append(u.person_id)
        pairs = {(lab, lab): persons for lab, persons in groups.items()}
        cfg = LearnConfig(structures_per_iter=8, max_iters=40)
        registry = learn_registry(train_set, pairs, bank, cfg, seed=0)
        coloc = colocated_map(PROBE, GALLERY)
        for (lab, _), local in registry.locals.items():
            dy = 8 if lab == "front" else -8
            pose = PoseSpec(lab, 1.0, dy, 0)
            inner = interior_rows(TransformSpec(pose_mix=(pose,)), PROBE, GALLERY)
            arg = np.argmax(local.probs, axis=1)
            offsets = (arg[inner] // GALLERY.cols) - (coloc[inner] // GALLERY.cols)
            vals, counts = np.unique(offsets, return_counts=True)
            assert vals[np.argmax(counts)] == dy, lab

    def test_underpopulated_pair_skipped(self):
        spec = TransformSpec(dy=4, dx=0, noise_sigma=4 / 255)
        _, train_set, bank = synth_training_setup(spec, 20)
        cfg = LearnConfig(structures_per_iter=8, max_iters=3)
        pairs = {
            ("g0", "h0"): [u.person_id for u, _ in train_set[:17]],
            ("g1", "h0"): [u.person_id for u, _ in train_set[17:]],  # only 3
        }
        registry = learn_registry(train_set, pairs, bank, cfg, seed=0)
        assert ("g0", "h0") in registry.locals
        assert ("g1", "h0") not in registry.locals


class TestSelectStructure:
    def make_registry(self, with_locals=True, with_models=True):
        g = init_structure(PROBE, GALLERY, t_d=32)
        registry = StructureRegistry(global_structure=g)
        if with_locals:
            from dataclasses import replace

            registry.locals[("L", "L")] = replace(g, tag="L|L")
            registry.locals[("R", "R")] = replace(g, tag="R|R")
        if with_models:
            rng = np.random.default_rng(5)
            images, labels = [], {}
            for k in range(16):
                pose = "L" if k % 2 == 0 else "R"
                top = (0.9, 0.1, 0.1) if pose == "L" else (0.1, 0.1, 0.9)
                images.append((f"i{k}", solid_top_image(top, rng=rng, noise=0.01)))
                labels[f"i{k}"] = pose
            model = cluster_pose_groups(images, "A", auto=False,
                                        manual_labels=labels)
            registry.model_a = model
            registry.model_b = model
        return registry

    def probe_image(self):
        rng = np.random.default_rng(6)
        return ImagePatches("u", "A", "p", PROBE, rng.normal(size=(84, 3)))

    def gallery_image(self):
        rng = np.random.default_rng(7)
        return ImagePatches("v", "B", "p", GALLERY, rng.normal(size=(297, 3)))

    def test_empty_locals_fall_back_to_global(self):
        registry = self.make_registry(with_locals=False)
        s = select_structure(self.probe_image(), self.gallery_image(), registry,
                             probe_pixels=solid_top_image((0.9, 0.1, 0.1)),
                             gallery_pixels=solid_top_image((0.9, 0.1, 0.1)))
        assert s is registry.global_structure

    def test_confident_pair_routes_to_local(self):
        registry = self.make_registry()
        s = select_structure(self.probe_image(), self.gallery_image(), registry,
                             probe_pixels=solid_top_image((0.9, 0.1, 0.1)),
                             gallery_pixels=solid_top_image((0.9, 0.1, 0.1)))
        assert s.tag == "L|L"

    def test_low_confidence_falls_back_to_global(self):
        registry = self.make_registry()
        halfway = solid_top_image((0.5, 0.1, 0.5))  # between the archetypes
        s = select_structure(self.probe_image(), self.gallery_image(), registry,
                             probe_pixels=halfway, gallery_pixels=halfway)
        assert s is registry.global_structure

    def test_missing_pixels_fall_back_to_global(self):
        registry = self.make_registry()
        s = select_structure(self.probe_image(), self.gallery_image(), registry)
        assert s is registry.global_structure

    def test_totality_over_random_inputs(self):
        registry = self.make_registry()
        rng = np.random.default_rng(8)
        for _ in range(10):
            pixels = rng.random((128, 48, 3))
            s = select_structure(self.probe_image(), self.gallery_image(),
                                 registry, probe_pixels=pixels,
                                 gallery_pixels=pixels)
            assert s is not None

    def test_registry_round_trip(self, tmp_path):
        registry = self.make_registry()
        save_registry(registry, tmp_path / "reg")
        loaded = load_registry(tmp_path / "reg")
        assert set(loaded.locals) == set(registry.locals)
        np.testing.assert_array_equal(
            loaded.global_structure.probs, registry.global_structure.probs
        )
        assert loaded.model_a.group_ids == registry.model_a.group_ids
        np.testing.assert_allclose(loaded.model_a.weights,
                                   registry.model_a.weights, atol=1e-15)
        g, _, ok = loaded.model_a.classify(
            pose_descriptor(solid_top_image((0.9, 0.1, 0.1)))
        )
        assert g == "L" and ok
