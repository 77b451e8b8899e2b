"""Learned patch similarity: KISSME models, metric banks, similarity tables.

The basic model is the difference of inverse covariances of similar-pair
and dissimilar-pair feature differences.  Metric distances are mapped to
(0, 1] similarities by ``exp(-max(d, 0) / sigma)`` where ``sigma`` is the
mean distance over the similar training pairs, so a typical correct pair
lands near ``1/e``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import grid as gridmod
from .errors import (
    CorruptFile,
    EmptyTrainingSet,
    InsufficientPairs,
    LengthMismatch,
    SingularCovariance,
    VersionMismatch,
)
from .grid import PatchGrid

GLOBAL_KEY = "GLOBAL"

_SIGMA_FLOOR = 1e-12


class MetricMode(str, Enum):
    SHARED = "SHARED"
    PER_LOCATION = "PER_LOCATION"


@dataclass(frozen=True)
class KissmeModel:
    m_matrix: np.ndarray          # (dim, dim) symmetric
    calib_sigma: float            # > 0, mean similar-pair distance
    location_key: tuple[int, int] | str = GLOBAL_KEY

    @property
    def dim(self) -> int:
        return self.m_matrix.shape[0]


def _regularized_inverse(diffs: np.ndarray, ridge: float | None) -> tuple[np.ndarray, np.ndarray]:
    cov = diffs.T @ diffs / diffs.shape[0]
    dim = cov.shape[0]
    if ridge is None:
        ridge = 1e-3 * np.trace(cov) / dim
    cov = cov + ridge * np.eye(dim)
    try:
        inv = np.linalg.inv(cov)
    except np.linalg.LinAlgError:
        raise SingularCovariance(
            "covariance inversion failed even with ridge"
        ) from None
    return cov, inv


def fit_kissme(
    similar_diffs: np.ndarray,
    dissimilar_diffs: np.ndarray,
    ridge: float | None = None,
    location_key: tuple[int, int] | str = GLOBAL_KEY,
) -> KissmeModel:
    """Fit ``M = inv(cov_sim) - inv(cov_dis)`` from difference vectors.

    ``ridge=None`` uses the scale-aware default ``1e-3 * trace(cov) / dim``
    per covariance.  Each set must hold at least ``dim + 1`` samples.
    """
    similar_diffs = np.atleast_2d(np.asarray(similar_diffs, dtype=np.float64))
    dissimilar_diffs = np.atleast_2d(np.asarray(dissimilar_diffs, dtype=np.float64))
    if similar_diffs.shape[1] != dissimilar_diffs.shape[1]:
        raise LengthMismatch("similar/dissimilar feature dims differ")
    if ridge is not None and ridge < 0:
        raise ValueError("ridge must be nonnegative")
    dim = similar_diffs.shape[1]
    if similar_diffs.shape[0] < dim + 1:
        raise InsufficientPairs(
            f"need >= {dim + 1} similar pairs, got {similar_diffs.shape[0]}"
        )
    if dissimilar_diffs.shape[0] < dim + 1:
        raise InsufficientPairs(
            f"need >= {dim + 1} dissimilar pairs, got {dissimilar_diffs.shape[0]}"
        )
    _, inv_sim = _regularized_inverse(similar_diffs, ridge)
    _, inv_dis = _regularized_inverse(dissimilar_diffs, ridge)
    m = inv_sim - inv_dis
    m = (m + m.T) / 2.0
    d_sim = np.einsum("nd,de,ne->n", similar_diffs, m, similar_diffs)
    sigma = max(float(d_sim.mean()), _SIGMA_FLOOR)
    return KissmeModel(m_matrix=m, calib_sigma=sigma, location_key=location_key)


def similarity(model: KissmeModel, f_a: np.ndarray, f_b: np.ndarray) -> float:
    """Similarity in (0, 1]; negative quadratic forms are clamped to zero."""
    f_a = np.asarray(f_a, dtype=np.float64)
    f_b = np.asarray(f_b, dtype=np.float64)
    if f_a.shape != f_b.shape or f_a.shape[-1] != model.dim:
        raise LengthMismatch(
            f"feature lengths {f_a.shape}/{f_b.shape} do not match model dim {model.dim}"
        )
    d = f_a - f_b
    q = float(d @ model.m_matrix @ d)
    return float(np.exp(-max(q, 0.0) / model.calib_sigma))


@dataclass
class MetricBank:
    """Per-location similarity models with a global fallback.

    ``models`` is consulted only in PER_LOCATION mode; the fallback is
    always present and always used in SHARED mode.
    """

    mode: MetricMode
    fallback: KissmeModel
    models: dict[tuple[int, int], KissmeModel] = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.fallback.dim

    def model_for(self, i: int, j: int) -> KissmeModel:
        if self.mode is MetricMode.PER_LOCATION:
            return self.models.get((i, j), self.fallback)
        return self.fallback

    def log_similarity_matrix(
        self, feats_u: np.ndarray, feats_v: np.ndarray
    ) -> np.ndarray:
        """log similarity for every (probe patch, gallery patch) pair.

        Returns (n_u, n_v) float64 of ``-max(d, 0) / sigma`` values.
        """
        feats_u = np.asarray(feats_u, dtype=np.float64)
        feats_v = np.asarray(feats_v, dtype=np.float64)
        if feats_u.shape[1] != self.dim or feats_v.shape[1] != self.dim:
            raise LengthMismatch("feature dims do not match bank dim")
        if self.mode is MetricMode.SHARED:
            return self._shared_log_sim(feats_u, feats_v, self.fallback)
        n_u, n_v = feats_u.shape[0], feats_v.shape[0]
        out = self._shared_log_sim(feats_u, feats_v, self.fallback)
        for (i, j), model in self.models.items():
            if i < n_u and j < n_v:
                d = feats_u[i] - feats_v[j]
                q = float(d @ model.m_matrix @ d)
                out[i, j] = -max(q, 0.0) / model.calib_sigma
        return out

    @staticmethod
    def _shared_log_sim(
        feats_u: np.ndarray, feats_v: np.ndarray, model: KissmeModel
    ) -> np.ndarray:
        mu = feats_u @ model.m_matrix
        du = np.einsum("nd,nd->n", mu, feats_u)
        dv = np.einsum("nd,nd->n", feats_v @ model.m_matrix, feats_v)
        qf = du[:, None] + dv[None, :] - 2.0 * mu @ feats_v.T
        # the expansion cancels catastrophically near zero distance; values
        # below the cancellation noise floor are genuinely zero
        tol = 1e-12 * (np.abs(du)[:, None] + np.abs(dv)[None, :])
        qf = np.where(qf <= tol, 0.0, qf)
        return -qf / model.calib_sigma


@dataclass
class SimilarityTable:
    """Mean similarity per in-range location pair over correct-match pairs."""

    values: np.ndarray        # (n_probe, n_gallery), 0 outside range
    in_range: np.ndarray      # bool mask of defined entries

    def value(self, i: int, j: int) -> float:
        if not self.in_range[i, j]:
            raise KeyError(f"location pair ({i}, {j}) outside search range")
        return float(self.values[i, j])


def build_similarity_table(
    train_pairs: list[tuple[np.ndarray, np.ndarray]],
    bank: MetricBank,
    probe: PatchGrid,
    gallery: PatchGrid,
    t_d: int,
) -> SimilarityTable:
    """Average the bank similarity at every in-range pair over correct matches.

    ``train_pairs`` holds (probe_feats, gallery_feats) arrays per identity.
    """
    if not train_pairs:
        raise EmptyTrainingSet("no correct-match training pairs")
    mask = gridmod.in_range_mask(probe, gallery, t_d)
    acc = np.zeros(mask.shape, dtype=np.float64)
    for fu, fv in train_pairs:
        acc += np.exp(bank.log_similarity_matrix(fu, fv))
    acc /= len(train_pairs)
    acc = np.where(mask, np.maximum(acc, _SIGMA_FLOOR), 0.0)
    return SimilarityTable(values=acc, in_range=mask)


# -- pipeline-level bank fitting --------------------------------------------

def _bootstrap_aligned_diffs(
    train_pairs: list[tuple[np.ndarray, np.ndarray]],
    mask: np.ndarray,
    rng: np.random.Generator,
    dissimilar_factor: int = 4,
) -> tuple[np.ndarray, np.ndarray]:
    """Similar/dissimilar difference vectors for the global model.

    Similar pairs align each probe patch with its raw-feature nearest
    gallery patch inside the search range of the same identity; this
    bootstrap keeps the similar set meaningful even when co-located
    patches of a camera pair do not correspond.  Dissimilar pairs reuse
    the aligned gallery positions of a wrong identity.
    """
    n_pairs = len(train_pairs)
    sims = []
    aligned_cols = []
    for fu, fv in train_pairs:
        d2 = (
            np.einsum("nd,nd->n", fu, fu)[:, None]
            + np.einsum("md,md->m", fv, fv)[None, :]
            - 2.0 * fu @ fv.T
        )
        d2 = np.where(mask, d2, np.inf)
        best = np.argmin(d2, axis=1)
        aligned_cols.append(best)
        sims.append(fu - fv[best])
    similar = np.concatenate(sims, axis=0)

    n_rows = train_pairs[0][0].shape[0]
    diss = []
    target = dissimilar_factor * similar.shape[0]
    while sum(d.shape[0] for d in diss) < target:
        p = int(rng.integers(n_pairs))
        q = int(rng.integers(n_pairs))
        if p == q and n_pairs > 1:
            continue
        if p == q:
            break
        fu = train_pairs[p][0]
        fv = train_pairs[q][1]
        diss.append(fu - fv[aligned_cols[q]])
    dissimilar = (
        np.concatenate(diss, axis=0)[:target] if diss else similar[:0]
    )
    return similar, dissimilar


def fit_metric_bank(
    train_pairs: list[tuple[np.ndarray, np.ndarray]],
    probe: PatchGrid,
    gallery: PatchGrid,
    t_d: int,
    mode: MetricMode = MetricMode.SHARED,
    ridge: float | None = None,
    seed: int = 0,
) -> MetricBank:
    """Fit the metric bank from correct-match training pairs.

    PER_LOCATION mode fits one model per in-range location pair, pooling
    the 8 grid-adjacent location pairs when a pair alone is below the
    ``dim + 1`` sample floor, and falls back to the global model below the
    floor even after pooling.
    """
    if not train_pairs:
        raise EmptyTrainingSet("no correct-match training pairs")
    rng = np.random.default_rng(seed)
    mask = gridmod.in_range_mask(probe, gallery, t_d)
    similar, dissimilar = _bootstrap_aligned_diffs(train_pairs, mask, rng)
    fallback = fit_kissme(similar, dissimilar, ridge=ridge, location_key=GLOBAL_KEY)
    bank = MetricBank(mode=mode, fallback=fallback)
    if mode is MetricMode.SHARED:
        return bank

    dim = train_pairs[0][0].shape[1]
    floor = dim + 1
    n_pairs = len(train_pairs)
    fu_all = np.stack([fu for fu, _ in train_pairs])   # (P, n_probe, dim)
    fv_all = np.stack([fv for _, fv in train_pairs])   # (P, n_gallery, dim)
    p_rows, p_cols = _rc_arrays(probe)
    g_rows, g_cols = _rc_arrays(gallery)
    # wrong-identity pairings: roll the gallery side by 1..4 identities
    rolls = [np.roll(np.arange(n_pairs), s) for s in range(1, min(5, n_pairs))]

    for i, j in zip(*np.nonzero(mask)):
        keys = _pooled_keys(i, j, p_rows, p_cols, g_rows, g_cols, probe, gallery, mask)
        if n_pairs * len(keys) < floor:
            continue  # global fallback covers this pair
        sim = np.concatenate(
            [fu_all[:, ii, :] - fv_all[:, jj, :] for ii, jj in keys], axis=0
        )
        if sim.shape[0] < floor:
            continue
        dis_parts = []
        for rolled in rolls:
            dis_parts.extend(
                fu_all[:, ii, :] - fv_all[rolled][:, jj, :] for ii, jj in keys
            )
        if not dis_parts:
            continue
        dis = np.concatenate(dis_parts, axis=0)
        try:
            bank.models[(int(i), int(j))] = fit_kissme(
                sim, dis, ridge=ridge, location_key=(int(i), int(j))
            )
        except (InsufficientPairs, SingularCovariance):
            continue
    return bank


def _rc_arrays(g: PatchGrid) -> tuple[np.ndarray, np.ndarray]:
    return np.divmod(np.arange(g.n_patches), g.cols)


def _pooled_keys(i, j, p_rows, p_cols, g_rows, g_cols, probe, gallery, mask):
    """(i, j) plus in-bounds location pairs shifted jointly by one cell."""
    keys = [(int(i), int(j))]
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            pr, pc = p_rows[i] + dr, p_cols[i] + dc
            gr, gc = g_rows[j] + dr, g_cols[j] + dc
            if not (0 <= pr < probe.rows and 0 <= pc < probe.cols):
                continue
            if not (0 <= gr < gallery.rows and 0 <= gc < gallery.cols):
                continue
            ii = int(pr * probe.cols + pc)
            jj = int(gr * gallery.cols + gc)
            if mask[ii, jj]:
                keys.append((ii, jj))
    return keys


# -- serialization -----------------------------------------------------------

_BANK_MAGIC = b"MBNK"
_BANK_VERSION = 1


def save_bank(bank: MetricBank, path) -> None:
    dim = bank.dim
    with open(path, "wb") as fh:
        fh.write(_BANK_MAGIC)
        fh.write(struct.pack("<HBI", _BANK_VERSION,
                             1 if bank.mode is MetricMode.PER_LOCATION else 0,
                             dim))
        entries = [(GLOBAL_KEY, bank.fallback)] + sorted(bank.models.items())
        fh.write(struct.pack("<I", len(entries)))
        for key, model in entries:
            if key == GLOBAL_KEY:
                fh.write(struct.pack("<ii", -1, -1))
            else:
                fh.write(struct.pack("<ii", key[0], key[1]))
            fh.write(struct.pack("<d", model.calib_sigma))
            fh.write(model.m_matrix.astype("<f8").tobytes())


def load_bank(path) -> MetricBank:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        if data[:4] != _BANK_MAGIC:
            raise CorruptFile("not a metric bank file")
        version, per_loc, dim = struct.unpack_from("<HBI", data, 4)
        if version != _BANK_VERSION:
            raise VersionMismatch(f"bank format version {version} unsupported")
        (count,) = struct.unpack_from("<I", data, 11)
        off = 15
        fallback = None
        models = {}
        for _ in range(count):
            i, j = struct.unpack_from("<ii", data, off)
            off += 8
            (sigma,) = struct.unpack_from("<d", data, off)
            off += 8
            m = np.frombuffer(data, dtype="<f8", count=dim * dim, offset=off)
            off += dim * dim * 8
            m = m.reshape(dim, dim).copy()
            if (i, j) == (-1, -1):
                fallback = KissmeModel(m, sigma, GLOBAL_KEY)
            else:
                models[(i, j)] = KissmeModel(m, sigma, (i, j))
        if fallback is None:
            raise CorruptFile("metric bank misses global fallback")
    except struct.error:
        raise CorruptFile("truncated metric bank file") from None
    mode = MetricMode.PER_LOCATION if per_loc else MetricMode.SHARED
    return MetricBank(mode=mode, fallback=fallback, models=models)
