"""Per-patch appearance features and linear dimensionality reduction.

A patch is described by the concatenation of per-channel color histograms
(LAB or HSV) and per-cell gradient-orientation histograms weighted by
gradient magnitude.  Every histogram block is L1-normalized, so the raw
vector is a stack of small probability distributions; an optional PCA
projects it down before metric learning.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from PIL import Image
from skimage import color as skcolor

from .errors import DecodeError, InsufficientSamples, InvalidSpec, LengthMismatch
from .grid import GridSpec, PatchGrid


class ColorSpace(str, Enum):
    LAB = "LAB"
    HSV = "HSV"


@dataclass(frozen=True)
class FeatureConfig:
    color_space: ColorSpace = ColorSpace.LAB
    bins_per_channel: int = 16
    grad_orient_bins: int = 8
    grad_cells: tuple[int, int] = (2, 2)  # (nx, ny)
    pca_dim: int | None = 34

    def validate(self) -> None:
        if self.bins_per_channel < 2:
            raise InvalidSpec("bins_per_channel must be >= 2")
        if self.grad_orient_bins < 2:
            raise InvalidSpec("grad_orient_bins must be >= 2")
        if min(self.grad_cells) < 1:
            raise InvalidSpec("grad_cells must be >= 1")
        if self.pca_dim is not None and self.pca_dim > self.raw_length:
            raise InvalidSpec(
                f"pca_dim {self.pca_dim} exceeds raw feature length {self.raw_length}"
            )

    @property
    def raw_length(self) -> int:
        nx, ny = self.grad_cells
        return 3 * self.bins_per_channel + nx * ny * self.grad_orient_bins


# Channel value ranges used for fixed histogram binning.
_CHANNEL_RANGES = {
    ColorSpace.LAB: ((0.0, 100.0), (-128.0, 127.0), (-128.0, 127.0)),
    ColorSpace.HSV: ((0.0, 1.0), (0.0, 1.0), (0.0, 1.0)),
}


def _to_color_space(rgb: np.ndarray, space: ColorSpace) -> np.ndarray:
    if space is ColorSpace.LAB:
        return skcolor.rgb2lab(rgb)
    return skcolor.rgb2hsv(rgb)


def _bin_indices(values: np.ndarray, lo: float, hi: float, bins: int) -> np.ndarray:
    idx = np.floor((values - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def _orientation_bins(patch_gray: np.ndarray, bins: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel edge-orientation bin and gradient magnitude.

    The histogrammed angle is the edge orientation (orthogonal to the
    gradient direction), folded into [0, pi).
    """
    gy, gx = np.gradient(patch_gray)
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx) + np.pi / 2.0, np.pi)
    idx = np.floor(theta / np.pi * bins).astype(np.int64) % bins
    return idx, mag


def extract_patch_features(patch_pixels: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """Feature vector for a single patch given as (h, w, 3) float RGB in [0, 1].

    A zero-gradient cell yields a uniform orientation block so that every
    block sums to one.
    """
    cfg.validate()
    if patch_pixels.ndim != 3 or patch_pixels.shape[2] != 3:
        raise DecodeError(f"expected (h, w, 3) pixels, got {patch_pixels.shape}")
    feats = extract_image_features(
        patch_pixels,
        np.array([[0, 0]], dtype=np.int64),
        patch_pixels.shape[0],
        patch_pixels.shape[1],
        cfg,
    )
    return feats[0]


def extract_image_features(
    image: np.ndarray,
    positions: np.ndarray,
    patch_h: int,
    patch_w: int,
    cfg: FeatureConfig,
) -> np.ndarray:
    """Feature vectors for every patch position of one image.

    ``image`` is (H, W, 3) float RGB in [0, 1]; ``positions`` is (n, 2) of
    (top, left).  Returns (n, raw_length) float64.  Extraction is a pure
    function of the pixels, so parallel callers stay deterministic.
    """
    cfg.validate()
    n = positions.shape[0]
    bins = cfg.bins_per_channel
    nx, ny = cfg.grad_cells
    obins = cfg.grad_orient_bins

    converted = _to_color_space(image, cfg.color_space)
    gray = skcolor.rgb2gray(image)
    ranges = _CHANNEL_RANGES[cfg.color_space]

    out = np.empty((n, cfg.raw_length), dtype=np.float64)
    x_edges = np.linspace(0, patch_w, nx + 1).astype(np.int64)
    y_edges = np.linspace(0, patch_h, ny + 1).astype(np.int64)

    for k in range(n):
        top, left = int(positions[k, 0]), int(positions[k, 1])
        cpatch = converted[top:top + patch_h, left:left + patch_w]
        gpatch = gray[top:top + patch_h, left:left + patch_w]
        vec = []
        for ch in range(3):
            lo, hi = ranges[ch]
            idx = _bin_indices(cpatch[:, :, ch].ravel(), lo, hi, bins)
            hist = np.bincount(idx, minlength=bins).astype(np.float64)
            vec.append(hist / hist.sum())
        oidx, mag = _orientation_bins(gpatch, obins)
        for cy in range(ny):
            for cx in range(nx):
                sl = (slice(y_edges[cy], y_edges[cy + 1]),
                      slice(x_edges[cx], x_edges[cx + 1]))
                hist = np.bincount(
                    oidx[sl].ravel(), weights=mag[sl].ravel(), minlength=obins
                )
                total = hist.sum()
                if total <= 0.0:
                    hist = np.full(obins, 1.0 / obins)
                else:
                    hist = hist / total
                vec.append(hist)
        out[k] = np.concatenate(vec)
    return out


def decode_image(path, spec: GridSpec) -> np.ndarray:
    """Decode an 8-bit RGB raster file and rescale to the camera size.

    Returns (image_h, image_w, 3) float64 RGB in [0, 1].
    """
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (spec.image_w, spec.image_h):
                im = im.resize((spec.image_w, spec.image_h), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from None
    return arr


def image_patch_features(image: np.ndarray, pgrid: PatchGrid, cfg: FeatureConfig) -> np.ndarray:
    return extract_image_features(
        image, pgrid.positions, pgrid.spec.patch_h, pgrid.spec.patch_w, cfg
    )


# -- PCA -------------------------------------------------------------------

@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    basis: np.ndarray  # (pca_dim, raw_len), orthonormal rows
    explained_fraction: float

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    @property
    def raw_length(self) -> int:
        return self.basis.shape[1]


def fit_pca(samples: np.ndarray, dim: int) -> PcaModel:
    """Top-``dim`` principal directions of the centered sample matrix.

    Sign convention: the largest-magnitude coordinate of each basis row is
    made positive, so the fit is deterministic.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise InvalidSpec("samples must be a 2-D array")
    n, raw = samples.shape
    if dim < 1 or dim > raw:
        raise InvalidSpec(f"pca dim {dim} out of range [1, {raw}]")
    if n <= dim:
        raise InsufficientSamples(f"need more than {dim} samples, got {n}")
    mean = samples.mean(axis=0)
    centered = samples - mean
    cov = centered.T @ centered / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.maximum(evals[order], 0.0)
    basis = evecs[:, order[:dim]].T.copy()
    for r in range(dim):
        j = int(np.argmax(np.abs(basis[r])))
        if basis[r, j] < 0:
            basis[r] = -basis[r]
    total = evals.sum()
    explained = float(evals[:dim].sum() / total) if total > 0 else 1.0
    return PcaModel(mean=mean, basis=basis, explained_fraction=explained)


def apply_pca(model: PcaModel, f: np.ndarray) -> np.ndarray:
    """Project one vector or a (n, raw_len) batch onto the basis."""
    f = np.asarray(f, dtype=np.float64)
    if f.shape[-1] != model.raw_length:
        raise LengthMismatch(
            f"feature length {f.shape[-1]} != model raw length {model.raw_length}"
        )
    return (f - model.mean) @ model.basis.T
