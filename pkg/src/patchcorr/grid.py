"""Patch-grid geometry.

A camera view is covered by a regular grid of fixed-size patches laid out
in row-first scan order.  Distances between patches are measured in stride
units (cells) with the l1 metric; search neighborhoods and co-location
between grids of different stride are derived from pixel positions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import IndexOutOfRange, InvalidSpec


@dataclass(frozen=True)
class GridSpec:
    """Pixel geometry of one camera's patch grid."""

    image_w: int
    image_h: int
    patch_w: int
    patch_h: int
    stride_x: int
    stride_y: int

    def validate(self) -> None:
        if self.patch_w > self.image_w or self.patch_h > self.image_h:
            raise InvalidSpec(
                f"patch {self.patch_w}x{self.patch_h} exceeds image "
                f"{self.image_w}x{self.image_h}"
            )
        if self.stride_x < 1 or self.stride_y < 1:
            raise InvalidSpec(f"strides must be >= 1, got "
                              f"({self.stride_x}, {self.stride_y})")
        if min(self.image_w, self.image_h, self.patch_w, self.patch_h) < 1:
            raise InvalidSpec("all dimensions must be positive")


@dataclass(frozen=True)
class PatchGrid:
    """Patch positions for one image class, in row-first scan order.

    ``positions[k] = (top, left)`` in pixels for patch ordinal ``k``;
    ``k = row * cols + col``.
    """

    spec: GridSpec
    cols: int
    rows: int
    positions: np.ndarray = field(repr=False)  # (n, 2) int array of (top, left)

    @property
    def n_patches(self) -> int:
        return self.rows * self.cols

    def rc(self, idx: int) -> tuple[int, int]:
        """(row, col) of a patch ordinal."""
        self.check_index(idx)
        return divmod(int(idx), self.cols)

    def check_index(self, idx: int) -> None:
        if not 0 <= int(idx) < self.n_patches:
            raise IndexOutOfRange(f"patch index {idx} outside [0, {self.n_patches})")

    def __eq__(self, other) -> bool:
        return isinstance(other, PatchGrid) and self.spec == other.spec

    def __hash__(self) -> int:
        return hash(self.spec)


def build_grid(spec: GridSpec) -> PatchGrid:
    """Lay out all patch positions that fit inside the image.

    Counts follow ``cols = floor((image_w - patch_w) / stride_x) + 1`` and
    the analogous row formula; positions are strictly increasing in
    row-first order.
    """
    spec.validate()
    cols = (spec.image_w - spec.patch_w) // spec.stride_x + 1
    rows = (spec.image_h - spec.patch_h) // spec.stride_y + 1
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    positions = np.stack(
        [rr.ravel() * spec.stride_y, cc.ravel() * spec.stride_x], axis=1
    ).astype(np.int64)
    return PatchGrid(spec=spec, cols=cols, rows=rows, positions=positions)


def patch_distance(grid: PatchGrid, a: int, b: int) -> int:
    """l1 distance between two patches of the same grid, in cells."""
    ra, ca = grid.rc(a)
    rb, cb = grid.rc(b)
    return abs(ra - rb) + abs(ca - cb)


def colocated_patch(probe: PatchGrid, gallery: PatchGrid, i: int) -> int:
    """Gallery patch whose pixel position is nearest to probe patch ``i``.

    Ties are broken toward the lowest ordinal, which argmin provides since
    positions are scanned row-first.
    """
    probe.check_index(i)
    d = gallery.positions - probe.positions[int(i)]
    return int(np.argmin((d * d).sum(axis=1)))


def colocated_map(probe: PatchGrid, gallery: PatchGrid) -> np.ndarray:
    """Vectorized ``colocated_patch`` for every probe ordinal."""
    d = probe.positions[:, None, :] - gallery.positions[None, :, :]
    return np.argmin((d * d).sum(axis=2), axis=1)


def search_set(gallery: PatchGrid, center: int, t_d: int) -> np.ndarray:
    """All gallery ordinals strictly closer than ``t_d`` cells to ``center``.

    Returned in ascending ordinal order; empty for ``t_d == 0``.
    """
    gallery.check_index(center)
    if t_d < 0:
        raise InvalidSpec(f"search range must be nonnegative, got {t_d}")
    rc_center = np.array(divmod(int(center), gallery.cols))
    rr, cc = np.divmod(np.arange(gallery.n_patches), gallery.cols)
    dist = np.abs(rr - rc_center[0]) + np.abs(cc - rc_center[1])
    return np.flatnonzero(dist < t_d)


def cell_distance_matrix(grid: PatchGrid) -> np.ndarray:
    """(n, n) l1 distances between all patch pairs of one grid."""
    rr, cc = np.divmod(np.arange(grid.n_patches), grid.cols)
    return np.abs(rr[:, None] - rr[None, :]) + np.abs(cc[:, None] - cc[None, :])


def in_range_mask(probe: PatchGrid, gallery: PatchGrid, t_d: int) -> np.ndarray:
    """(n_probe, n_gallery) bool mask of pairs within the search range.

    Pair (i, j) is in range when the gallery-grid distance from probe
    patch i's co-located patch to j is strictly below ``t_d``.
    """
    coloc = colocated_map(probe, gallery)
    dmat = cell_distance_matrix(gallery)
    return dmat[coloc, :] < t_d
