"""Synthetic two-camera person datasets with a known cross-view transform.

Each identity is a color-block texture (horizontal bands crossed with
vertical stripes, random LAB colors) rendered on the probe canvas; the
gallery image shows the same texture translated by a pose-conditional
whole-stride shift, with illumination gain and pixel noise.  The injected
shift doubles as a ground-truth correspondence structure for verifying the
learner.  A pose-colored head band at the top keeps pose groups separable
from pixels alone.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from skimage import color as skcolor

from . import grid as gridmod
from .errors import ShiftOutOfBounds
from .grid import PatchGrid
from .structure import CorrespondenceStructure

_HEAD_H = 24
_POSE_STRIPE_W = 14  # left pose-colored stripe; survives vertical shifts
_MIN_BANDS, _MAX_BANDS = 6, 10
_MIN_STRIPES, _MAX_STRIPES = 3, 5


@dataclass(frozen=True)
class PoseSpec:
    label: str
    prob: float
    dy: int  # gallery-stride units, vertical
    dx: int  # gallery-stride units, horizontal


@dataclass(frozen=True)
class TransformSpec:
    dy: int = 0
    dx: int = 0
    pose_mix: tuple[PoseSpec, ...] = ()
    illum_gain: tuple[float, float] = (1.0, 1.0)
    noise_sigma: float = 0.0

    def poses(self) -> tuple[PoseSpec, ...]:
        if self.pose_mix:
            return self.pose_mix
        return (PoseSpec(label="p0", prob=1.0, dy=self.dy, dx=self.dx),)

    def validate(self, t_d: int | None = None) -> None:
        poses = self.poses()
        total = sum(p.prob for p in poses)
        if abs(total - 1.0) > 1e-9:
            raise ShiftOutOfBounds(f"pose probabilities sum to {total}, not 1")
        if t_d is not None:
            for p in poses:
                if abs(p.dy) >= t_d or abs(p.dx) >= t_d:
                    raise ShiftOutOfBounds(
                        f"pose {p.label}: shift ({p.dy}, {p.dx}) not below t_d={t_d}"
                    )


@dataclass
class ManifestRow:
    image_id: str
    camera_id: str
    person_id: str
    pose_label: str
    path: str


@dataclass
class SynthDataset:
    rows: list[ManifestRow]
    ground_truth: TransformSpec
    root: Path | None = None
    images: dict[str, np.ndarray] = field(default_factory=dict, repr=False)


def _lab_color(rng: np.random.Generator) -> np.ndarray:
    return np.array([rng.uniform(20, 85), rng.uniform(-55, 55), rng.uniform(-55, 55)])


def _pose_head_color(pose_index: int, n_poses: int) -> np.ndarray:
    angle = 2.0 * np.pi * pose_index / max(n_poses, 1)
    return np.array([70.0, 45.0 * np.cos(angle), 45.0 * np.sin(angle)])


def _lab2rgb(lab: np.ndarray) -> np.ndarray:
    return np.clip(skcolor.lab2rgb(lab.reshape(1, 1, 3)).reshape(3), 0.0, 1.0)


def _render_texture(
    rng: np.random.Generator,
    h: int,
    w: int,
    pad_y: int,
    pad_x: int,
    head_rgb: np.ndarray,
) -> np.ndarray:
    """Block texture on an extended canvas of shape (h + 2*pad_y, w + 2*pad_x).

    Row/column 0 of the probe view sits at offset (pad_y, pad_x).  Two
    pose-colored cues stay visible in both views: the head band covering
    all extended rows above ``_HEAD_H``, and a left stripe spanning every
    extended row so that even a downward-scrolled gallery crop keeps a
    pose cue for the descriptor.
    """
    eh, ew = h + 2 * pad_y, w + 2 * pad_x
    canvas = np.empty((eh, ew, 3), dtype=np.float64)

    n_bands = int(rng.integers(_MIN_BANDS, _MAX_BANDS + 1))
    n_stripes = int(rng.integers(_MIN_STRIPES, _MAX_STRIPES + 1))
    body_top = pad_y + _HEAD_H
    y_edges = np.linspace(body_top, eh, n_bands + 1)
    y_edges[1:-1] += rng.uniform(-3, 3, size=n_bands - 1)
    y_edges = np.clip(np.round(y_edges), body_top, eh).astype(int)
    x_edges = np.linspace(0, ew, n_stripes + 1)
    x_edges[1:-1] += rng.uniform(-2, 2, size=n_stripes - 1)
    x_edges = np.clip(np.round(x_edges), 0, ew).astype(int)

    pose_rgb = _lab2rgb(head_rgb)
    canvas[:body_top] = pose_rgb
    for b in range(n_bands):
        for s in range(n_stripes):
            rgb = _lab2rgb(_lab_color(rng))
            canvas[y_edges[b]:y_edges[b + 1], x_edges[s]:x_edges[s + 1]] = rgb
    canvas[:, :pad_x + _POSE_STRIPE_W] = pose_rgb
    return canvas


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def generate_dataset(
    seed: int,
    n_identities: int,
    spec: TransformSpec,
    probe_grid: PatchGrid,
    gallery_grid: PatchGrid,
    out_dir: Path | None = None,
    image_format: str = "png",
) -> SynthDataset:
    """Render one probe and one gallery image per identity.

    Deterministic per seed: each identity draws from its own child stream
    of the master seed.  With ``out_dir`` set, images plus a ``manifest.csv``
    are written; pixel arrays (uint8-quantized, so identical to the decoded
    files) are always kept on the returned dataset.
    """
    if n_identities < 4:
        raise ValueError("need at least 4 identities")
    spec.validate()
    h, w = probe_grid.spec.image_h, probe_grid.spec.image_w
    if (gallery_grid.spec.image_h, gallery_grid.spec.image_w) != (h, w):
        raise ShiftOutOfBounds("probe and gallery canvases must match")
    poses = spec.poses()
    shifts_px = [(p.dy * gallery_grid.spec.stride_y, p.dx * gallery_grid.spec.stride_x)
                 for p in poses]
    pad_y = max((abs(s[0]) for s in shifts_px), default=0)
    pad_x = max((abs(s[1]) for s in shifts_px), default=0)
    if pad_y >= h or pad_x >= w:
        raise ShiftOutOfBounds("pixel shift exceeds the image canvas")

    probs = np.array([p.prob for p in poses])
    master = np.random.SeedSequence(seed)
    children = master.spawn(n_identities)

    rows: list[ManifestRow] = []
    images: dict[str, np.ndarray] = {}
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "camA").mkdir(parents=True, exist_ok=True)
        (out_dir / "camB").mkdir(parents=True, exist_ok=True)

    for ident in range(n_identities):
        rng = np.random.default_rng(children[ident])
        pose_idx = int(rng.choice(len(poses), p=probs))
        pose = poses[pose_idx]
        dy_px, dx_px = shifts_px[pose_idx]
        head = _pose_head_color(pose_idx, len(poses))
        head = head + rng.uniform(-4, 4, size=3)
        tex = _render_texture(rng, h, w, pad_y, pad_x, head)

        probe_img = tex[pad_y:pad_y + h, pad_x:pad_x + w]
        gallery_img = tex[pad_y - dy_px:pad_y - dy_px + h,
                          pad_x - dx_px:pad_x - dx_px + w].copy()
        gain = float(rng.uniform(*spec.illum_gain))
        gallery_img = gallery_img * gain
        if spec.noise_sigma > 0:
            gallery_img = gallery_img + rng.normal(
                0.0, spec.noise_sigma, size=gallery_img.shape
            )

        pid = f"p{ident:04d}"
        for cam, img in (("A", probe_img), ("B", gallery_img)):
            image_id = f"{cam}{ident:04d}"
            arr = _quantize(img)
            images[image_id] = arr
            rel = f"cam{cam}/{pid}.{image_format}"
            rows.append(ManifestRow(image_id, cam, pid, pose.label, rel))
            if out_dir is not None:
                Image.fromarray(arr).save(out_dir / rel)

    if out_dir is not None:
        with open(out_dir / "manifest.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image_id", "camera_id", "person_id", "pose_label", "path"])
            for r in rows:
                writer.writerow([r.image_id, r.camera_id, r.person_id, r.pose_label, r.path])

    return SynthDataset(rows=rows, ground_truth=spec, root=out_dir, images=images)


def shifted_target_map(
    pose: PoseSpec, probe_grid: PatchGrid, gallery_grid: PatchGrid
) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth gallery ordinal per probe patch, plus in-bounds mask.

    The target is the co-located patch displaced by (dy, dx) grid cells;
    out-of-bounds targets are clamped to the grid edge and flagged.
    """
    coloc = gridmod.colocated_map(probe_grid, gallery_grid)
    rr, cc = np.divmod(coloc, gallery_grid.cols)
    tr, tc = rr + pose.dy, cc + pose.dx
    inside = (
        (tr >= 0) & (tr < gallery_grid.rows) & (tc >= 0) & (tc < gallery_grid.cols)
    )
    tr = np.clip(tr, 0, gallery_grid.rows - 1)
    tc = np.clip(tc, 0, gallery_grid.cols - 1)
    return tr * gallery_grid.cols + tc, inside


def ground_truth_structure(
    spec: TransformSpec,
    probe_grid: PatchGrid,
    gallery_grid: PatchGrid,
    t_d: int,
) -> CorrespondenceStructure:
    """One-hot (or pose-mixture) rows at the injected displacement."""
    spec.validate(t_d=t_d)
    for p in spec.poses():
        if abs(p.dy) + abs(p.dx) >= t_d:
            raise ShiftOutOfBounds(
                f"pose {p.label}: l1 shift {abs(p.dy) + abs(p.dx)} >= t_d={t_d}"
            )
    probs = np.zeros((probe_grid.n_patches, gallery_grid.n_patches))
    for pose in spec.poses():
        targets, _ = shifted_target_map(pose, probe_grid, gallery_grid)
        probs[np.arange(probe_grid.n_patches), targets] += pose.prob
    return CorrespondenceStructure(
        probe_grid=probe_grid.spec,
        gallery_grid=gallery_grid.spec,
        t_d=t_d,
        probs=probs,
        tag="ground_truth",
    )


def interior_rows(spec: TransformSpec, probe_grid: PatchGrid, gallery_grid: PatchGrid) -> np.ndarray:
    """Probe ordinals whose shifted target is in-bounds for every pose."""
    inside = np.ones(probe_grid.n_patches, dtype=bool)
    for pose in spec.poses():
        _, ok = shifted_target_map(pose, probe_grid, gallery_grid)
        inside &= ok
    return np.flatnonzero(inside)
