"""Correspondence structures: matching-probability matrices for a camera pair.

Rows are conditional distributions over the gallery grid (one row per probe
patch), supported only on pairs inside the search range and re-normalized
after every update.  Serialization uses a small versioned binary container
of (row, col, value) triples plus an optional CSV heatmap export.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import grid as gridmod
from .errors import CorruptFile, GridMismatch, NegativeEntry, VersionMismatch
from .grid import GridSpec, PatchGrid, build_grid

_ROW_SUM_TOL = 1e-9


@dataclass(frozen=True)
class CorrespondenceStructure:
    probe_grid: GridSpec
    gallery_grid: GridSpec
    t_d: int
    probs: np.ndarray = field(repr=False)  # (n_probe, n_gallery) float64
    tag: str = ""

    @property
    def n_rows(self) -> int:
        return self.probs.shape[0]

    @property
    def n_cols(self) -> int:
        return self.probs.shape[1]

    def grids(self) -> tuple[PatchGrid, PatchGrid]:
        return build_grid(self.probe_grid), build_grid(self.gallery_grid)

    def range_mask(self) -> np.ndarray:
        probe, gallery = self.grids()
        return gridmod.in_range_mask(probe, gallery, self.t_d)

    def validate(self) -> None:
        """Check support containment and row stochasticity."""
        if np.any(self.probs < 0):
            raise NegativeEntry("structure holds negative probabilities")
        mask = self.range_mask()
        if np.any(self.probs[~mask] != 0.0):
            raise GridMismatch("structure has support outside the search range")
        sums = self.probs.sum(axis=1)
        nonempty = mask.any(axis=1)
        bad = nonempty & (np.abs(sums - 1.0) > _ROW_SUM_TOL) & (sums > 0)
        if np.any(bad):
            raise ValueError(
                f"rows {np.flatnonzero(bad)[:5].tolist()} are not normalized"
            )

    def checksum(self) -> str:
        import hashlib

        return hashlib.sha256(self.probs.tobytes()).hexdigest()[:16]


def init_structure(probe: PatchGrid, gallery: PatchGrid, t_d: int) -> CorrespondenceStructure:
    """Distance-decay initialization.

    Pairs closer than ``t_d`` get weight ``1 / (distance + 1)``; out-of-range
    pairs get zero; each row is then normalized to sum one.
    """
    if t_d < 1:
        raise ValueError(f"t_d must be >= 1, got {t_d}")
    coloc = gridmod.colocated_map(probe, gallery)
    dmat = gridmod.cell_distance_matrix(gallery)[coloc, :]
    weights = np.where(dmat < t_d, 1.0 / (dmat + 1.0), 0.0)
    s = CorrespondenceStructure(
        probe_grid=probe.spec, gallery_grid=gallery.spec, t_d=t_d, probs=weights
    )
    s, _ = normalize_rows(s)
    return s


def normalize_rows(s: CorrespondenceStructure) -> tuple[CorrespondenceStructure, list[int]]:
    """Normalize each nonzero row to sum one.

    All-zero rows are left untouched and their indices are reported.
    """
    if np.any(s.probs < 0):
        raise NegativeEntry("cannot normalize rows with negative entries")
    sums = s.probs.sum(axis=1, keepdims=True)
    zero_rows = np.flatnonzero(sums.ravel() == 0.0).tolist()
    safe = np.where(sums > 0, sums, 1.0)
    return replace(s, probs=s.probs / safe), zero_rows


def threshold_mask(s: CorrespondenceStructure, t_c: float) -> np.ndarray:
    """Boolean mask of entries strictly above ``t_c``."""
    if not 0.0 <= t_c < 1.0:
        raise ValueError(f"t_c must be in [0, 1), got {t_c}")
    return s.probs > t_c


# -- serialization -----------------------------------------------------------

_MAGIC = b"CSTR"
_VERSION = 1
_SPEC_FMT = "<6I"


def save_structure(s: CorrespondenceStructure, path) -> None:
    rows, cols = np.nonzero(s.probs)
    vals = s.probs[rows, cols]
    tag = s.tag.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<H", _VERSION))
        for spec in (s.probe_grid, s.gallery_grid):
            fh.write(struct.pack(_SPEC_FMT, spec.image_w, spec.image_h,
                                 spec.patch_w, spec.patch_h,
                                 spec.stride_x, spec.stride_y))
        fh.write(struct.pack("<I", s.t_d))
        fh.write(struct.pack("<H", len(tag)))
        fh.write(tag)
        fh.write(struct.pack("<Q", rows.size))
        body = np.empty(rows.size, dtype=[("r", "<u4"), ("c", "<u4"), ("v", "<f8")])
        body["r"], body["c"], body["v"] = rows, cols, vals
        fh.write(body.tobytes())


def load_structure(path) -> CorrespondenceStructure:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        if data[:4] != _MAGIC:
            raise CorruptFile(f"{path}: not a correspondence structure file")
        (version,) = struct.unpack_from("<H", data, 4)
        if version != _VERSION:
            raise VersionMismatch(f"{path}: format version {version} unsupported")
        off = 6
        specs = []
        for _ in range(2):
            fields = struct.unpack_from(_SPEC_FMT, data, off)
            off += struct.calcsize(_SPEC_FMT)
            specs.append(GridSpec(*fields))
        (t_d,) = struct.unpack_from("<I", data, off)
        off += 4
        (tag_len,) = struct.unpack_from("<H", data, off)
        off += 2
        tag = data[off:off + tag_len].decode("utf-8")
        if len(data[off:off + tag_len]) != tag_len:
            raise CorruptFile(f"{path}: truncated tag")
        off += tag_len
        (n_entries,) = struct.unpack_from("<Q", data, off)
        off += 8
        body = data[off:]
        rec = np.dtype([("r", "<u4"), ("c", "<u4"), ("v", "<f8")])
        if len(body) != n_entries * rec.itemsize:
            raise CorruptFile(f"{path}: truncated entry block")
        triples = np.frombuffer(body, dtype=rec)
    except struct.error:
        raise CorruptFile(f"{path}: truncated header") from None

    probe = build_grid(specs[0])
    gallery = build_grid(specs[1])
    probs = np.zeros((probe.n_patches, gallery.n_patches), dtype=np.float64)
    if n_entries:
        if triples["r"].max() >= probe.n_patches or triples["c"].max() >= gallery.n_patches:
            raise CorruptFile(f"{path}: entry outside grid bounds")
        probs[triples["r"], triples["c"]] = triples["v"]
    return CorrespondenceStructure(
        probe_grid=specs[0], gallery_grid=specs[1], t_d=int(t_d), probs=probs, tag=tag
    )


def export_heatmap_csv(s: CorrespondenceStructure, path, downsample: int = 1) -> np.ndarray:
    """Write the dense probability matrix as CSV in row-first patch order.

    ``downsample > 1`` block-averages the matrix for readability; the
    written array is returned.
    """
    m = s.probs
    if downsample > 1:
        r = (m.shape[0] + downsample - 1) // downsample
        c = (m.shape[1] + downsample - 1) // downsample
        out = np.zeros((r, c))
        for i in range(r):
            for j in range(c):
                block = m[i * downsample:(i + 1) * downsample,
                          j * downsample:(j + 1) * downsample]
                out[i, j] = block.mean()
        m = out
    np.savetxt(path, m, delimiter=",", fmt="%.17g")
    return m
