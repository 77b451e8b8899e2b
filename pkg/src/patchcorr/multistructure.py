"""Pose-grouped local correspondence structures with a global fallback.

Images in each camera are grouped by pose, either from manifest labels or
by spectral clustering of a pose descriptor read from the top quarter of
the image.  A local structure is learned per sufficiently populated pose
group pair; prediction classifies both images of a pair and routes to the
matching local structure, falling back to the global one whenever the
classification is not confident or the pair has no local structure.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.cluster.vq import kmeans2

from .errors import TooFewImages
from .features import FeatureConfig, extract_image_features
from .learning import LearnConfig, learn
from .matching import ImagePatches
from .metric import MetricBank
from .structure import CorrespondenceStructure, load_structure, save_structure

logger = logging.getLogger(__name__)

_DESC_CFG = FeatureConfig(bins_per_channel=8, grad_orient_bins=8,
                          grad_cells=(2, 1), pca_dim=None)


def pose_descriptor(image: np.ndarray) -> np.ndarray:
    """Fixed-length descriptor of the top quarter of an image.

    Color and gradient-orientation statistics over the head region stand
    in for semantic pose parsing; the bottom three quarters never enter.
    """
    h = image.shape[0] // 4
    top = image[:h]
    return extract_image_features(
        top, np.array([[0, 0]]), h, image.shape[1], _DESC_CFG
    )[0]


@dataclass
class PoseGroupModel:
    camera_id: str
    group_ids: list[str]
    assignments: dict[str, str]          # image_id -> group_id
    centroids: np.ndarray                # (k, desc_dim)
    weights: np.ndarray                  # (k, desc_dim + 1) linear one-vs-rest
    confidence_threshold: float

    def classify(self, descriptor: np.ndarray) -> tuple[str, float, bool]:
        """(group_id, margin, confident) for one descriptor."""
        x = np.concatenate([descriptor, [1.0]])
        scores = self.weights @ x
        order = np.argsort(scores)[::-1]
        top = int(order[0])
        margin = float(scores[order[0]] - scores[order[1]]) if scores.size > 1 \
            else float(scores[order[0]])
        return self.group_ids[top], margin, margin >= self.confidence_threshold


def _fit_linear_classifier(desc: np.ndarray, labels: np.ndarray, k: int,
                           ridge: float = 1e-3) -> np.ndarray:
    """One-vs-rest ridge regression to +-1 targets, bias included."""
    x = np.concatenate([desc, np.ones((desc.shape[0], 1))], axis=1)
    targets = np.where(labels[:, None] == np.arange(k)[None, :], 1.0, -1.0)
    gram = x.T @ x + ridge * np.eye(x.shape[1])
    return np.linalg.solve(gram, x.T @ targets).T  # (k, dim + 1)


def _margins(model_weights: np.ndarray, desc: np.ndarray) -> np.ndarray:
    x = np.concatenate([desc, np.ones((desc.shape[0], 1))], axis=1)
    scores = x @ model_weights.T
    if scores.shape[1] == 1:
        return scores[:, 0]
    part = np.partition(scores, -2, axis=1)
    return part[:, -1] - part[:, -2]


def _crossfit_threshold(desc: np.ndarray, labels: np.ndarray, k: int) -> float:
    """10th percentile of margins measured on held-out halves.

    Margins of the final classifier on its own training data overstate
    test-time confidence, so the threshold is calibrated on two-fold
    cross-fitted margins instead.
    """
    n = desc.shape[0]
    if n < 4 or k < 2:
        return 0.0
    half = n // 2
    held_out = []
    for train_sl, test_sl in ((slice(0, half), slice(half, n)),
                              (slice(half, n), slice(0, half))):
        if len(set(labels[train_sl].tolist())) < k:
            continue
        w = _fit_linear_classifier(desc[train_sl], labels[train_sl], k)
        held_out.append(_margins(w, desc[test_sl]))
    if not held_out:
        return 0.0
    return float(max(np.percentile(np.concatenate(held_out), 10), 0.0))


def _local_scaled_affinity(desc: np.ndarray) -> np.ndarray:
    """Locally scaled affinities restricted to a symmetrized kNN graph.

    Per-point scales (distance to the k-th neighbor) sharpen the block
    structure enough for the eigengap to expose the cluster count.
    """
    n = desc.shape[0]
    diffs = desc[:, None, :] - desc[None, :, :]
    d2 = np.einsum("ijd,ijd->ij", diffs, diffs)
    k_nn = min(max(4, n // 3), n - 1)
    order = np.sort(d2, axis=1)
    sigma = np.sqrt(np.maximum(order[:, k_nn], 1e-12))
    affinity = np.exp(-d2 / (sigma[:, None] * sigma[None, :]))
    ranks = np.argsort(np.argsort(d2, axis=1), axis=1)
    neighbor = ranks <= k_nn  # self plus k nearest
    keep = neighbor | neighbor.T
    affinity = np.where(keep, affinity, 0.0)
    np.fill_diagonal(affinity, 1.0)
    return affinity


def _eigengap_k(affinity: np.ndarray, k_max: int) -> int:
    d = affinity.sum(axis=1)
    d_inv = 1.0 / np.sqrt(np.maximum(d, 1e-12))
    lap = np.eye(affinity.shape[0]) - d_inv[:, None] * affinity * d_inv[None, :]
    evals = np.linalg.eigvalsh(lap)
    upper = min(k_max, evals.size - 1)
    gaps = evals[1:upper + 1] - evals[:upper]
    return int(np.argmax(gaps)) + 1


def cluster_pose_groups(
    images: list[tuple[str, np.ndarray]],
    camera_id: str,
    auto: bool,
    k_max: int = 6,
    manual_labels: dict[str, str] | None = None,
    seed: int = 0,
) -> PoseGroupModel:
    """Group images by pose, manually from labels or by spectral clustering.

    Auto mode picks the cluster count at the largest eigengap of the
    normalized affinity spectrum, capped at ``k_max``, then k-means the
    spectral embedding; everything is seeded and deterministic.
    """
    if len(images) < 2:
        raise TooFewImages(f"camera {camera_id}: need >= 2 images to group")
    ids = [i for i, _ in images]
    desc = np.stack([pose_descriptor(img) for _, img in images])

    if not auto:
        if not manual_labels:
            raise TooFewImages("manual grouping needs pose labels")
        group_ids = sorted(set(manual_labels[i] for i in ids))
        labels = np.array([group_ids.index(manual_labels[i]) for i in ids])
    else:
        affinity = _local_scaled_affinity(desc)
        k = _eigengap_k(affinity, k_max)
        if k == 1:
            group_ids = ["g0"]
            labels = np.zeros(len(ids), dtype=int)
        else:
            d = affinity.sum(axis=1)
            d_inv = 1.0 / np.sqrt(np.maximum(d, 1e-12))
            lap = np.eye(len(ids)) - d_inv[:, None] * affinity * d_inv[None, :]
            evals, evecs = np.linalg.eigh(lap)
            embed = evecs[:, :k]
            for c in range(k):
                j = int(np.argmax(np.abs(embed[:, c])))
                if embed[j, c] < 0:
                    embed[:, c] = -embed[:, c]
            norms = np.linalg.norm(embed, axis=1, keepdims=True)
            embed = embed / np.maximum(norms, 1e-12)
            _, labels = kmeans2(embed, k, seed=seed, minit="++")
            group_ids = [f"g{c}" for c in range(k)]

    k = len(group_ids)
    centroids = np.stack([
        desc[labels == c].mean(axis=0) if np.any(labels == c) else desc.mean(axis=0)
        for c in range(k)
    ])
    weights = _fit_linear_classifier(desc, labels, k)
    threshold = _crossfit_threshold(desc, labels, k)
    return PoseGroupModel(
        camera_id=camera_id,
        group_ids=list(group_ids),
        assignments={i: group_ids[labels[n]] for n, i in enumerate(ids)},
        centroids=centroids,
        weights=weights,
        confidence_threshold=threshold,
    )


def form_group_pairs(
    model_a: PoseGroupModel,
    model_b: PoseGroupModel,
    train_ids: list[tuple[str, str, str]],  # (person_id, probe image, gallery image)
    min_pairs: int = 10,
) -> dict[tuple[str, str], list[str]]:
    """Pose-group pairs observed by at least ``min_pairs`` identities."""
    buckets: dict[tuple[str, str], list[str]] = {}
    for person, img_a, img_b in train_ids:
        key = (model_a.assignments[img_a], model_b.assignments[img_b])
        buckets.setdefault(key, []).append(person)
    return {k: v for k, v in sorted(buckets.items()) if len(v) >= min_pairs}


@dataclass
class StructureRegistry:
    global_structure: CorrespondenceStructure
    locals: dict[tuple[str, str], CorrespondenceStructure] = field(default_factory=dict)
    model_a: PoseGroupModel | None = None
    model_b: PoseGroupModel | None = None

    def select(self, probe: ImagePatches, gallery_img: ImagePatches,
               probe_pixels: np.ndarray | None = None,
               gallery_pixels: np.ndarray | None = None) -> CorrespondenceStructure:
        return select_structure(probe, gallery_img, self,
                                probe_pixels=probe_pixels,
                                gallery_pixels=gallery_pixels)

    def selector(self, pixels: dict[str, np.ndarray]):
        """A (probe, gallery) -> structure callable bound to pixel data."""

        def pick(u: ImagePatches, v: ImagePatches) -> CorrespondenceStructure:
            return self.select(u, v, probe_pixels=pixels.get(u.image_id),
                               gallery_pixels=pixels.get(v.image_id))

        return pick


def select_structure(
    probe: ImagePatches,
    gallery_img: ImagePatches,
    registry: StructureRegistry,
    probe_pixels: np.ndarray | None = None,
    gallery_pixels: np.ndarray | None = None,
) -> CorrespondenceStructure:
    """Local structure of the classified pose-group pair, else the global.

    Falls back to the global structure when pixels are unavailable, either
    classification is below its confidence threshold, or the pair has no
    local structure.
    """
    if not registry.locals or registry.model_a is None or registry.model_b is None:
        return registry.global_structure
    if probe_pixels is None or gallery_pixels is None:
        return registry.global_structure
    ga, _, ok_a = registry.model_a.classify(pose_descriptor(probe_pixels))
    gb, _, ok_b = registry.model_b.classify(pose_descriptor(gallery_pixels))
    if not (ok_a and ok_b):
        return registry.global_structure
    return registry.locals.get((ga, gb), registry.global_structure)


def learn_registry(
    train_set: list[tuple[ImagePatches, ImagePatches]],
    group_pairs: dict[tuple[str, str], list[str]],
    bank: MetricBank,
    cfg: LearnConfig,
    seed: int,
    model_a: PoseGroupModel | None = None,
    model_b: PoseGroupModel | None = None,
    on_iteration=None,
) -> StructureRegistry:
    """Global structure plus one local structure per qualifying group pair.

    Pairs too small for the configured batch size get the batch clamped to
    the group's (even) size; groups below 4 identities are skipped with a
    warning and covered by the global structure.
    """
    global_structure, _ = learn(train_set, bank, cfg, seed=seed, tag="global",
                                on_iteration=on_iteration)
    registry = StructureRegistry(
        global_structure=global_structure, model_a=model_a, model_b=model_b
    )
    by_person = {u.person_id: (u, v) for u, v in train_set}
    for key, persons in group_pairs.items():
        subset = [by_person[p] for p in persons if p in by_person]
        batch = min(cfg.structures_per_iter, 2 * (len(subset) // 2))
        if batch < 4:
            logger.warning("skipping group pair %s: only %d identities",
                           key, len(subset))
            continue
        local_cfg = replace(cfg, structures_per_iter=batch)
        tag = f"{key[0]}|{key[1]}"
        local, _ = learn(subset, bank, local_cfg, seed=seed, tag=tag)
        registry.locals[key] = local
    return registry


# -- registry persistence -----------------------------------------------------

def save_registry(registry: StructureRegistry, directory: Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_structure(registry.global_structure, directory / "global.cstr")
    manifest = {"locals": [], "models": {}}
    for n, (key, s) in enumerate(sorted(registry.locals.items())):
        name = f"local_{n:03d}.cstr"
        save_structure(s, directory / name)
        manifest["locals"].append({"group_a": key[0], "group_b": key[1], "file": name})
    for side, model in (("A", registry.model_a), ("B", registry.model_b)):
        if model is None:
            continue
        manifest["models"][side] = {
            "camera_id": model.camera_id,
            "group_ids": model.group_ids,
            "assignments": model.assignments,
            "centroids": model.centroids.tolist(),
            "weights": model.weights.tolist(),
            "confidence_threshold": model.confidence_threshold,
        }
    with open(directory / "registry.json", "w") as fh:
        json.dump(manifest, fh, indent=2)


def load_registry(directory: Path) -> StructureRegistry:
    directory = Path(directory)
    with open(directory / "registry.json") as fh:
        manifest = json.load(fh)
    registry = StructureRegistry(
        global_structure=load_structure(directory / "global.cstr")
    )
    for entry in manifest["locals"]:
        key = (entry["group_a"], entry["group_b"])
        registry.locals[key] = load_structure(directory / entry["file"])
    models = {}
    for side, m in manifest.get("models", {}).items():
        models[side] = PoseGroupModel(
            camera_id=m["camera_id"],
            group_ids=m["group_ids"],
            assignments=m["assignments"],
            centroids=np.array(m["centroids"]),
            weights=np.array(m["weights"]),
            confidence_threshold=m["confidence_threshold"],
        )
    registry.model_a = models.get("A")
    registry.model_b = models.get("B")
    return registry
