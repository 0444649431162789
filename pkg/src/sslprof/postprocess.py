"""Deterministic representation pipeline: site-level fusion, well-level
merging with grid resampling, cross-plate alignment, and dual-model fusion.

All transformations are pure functions over embedding tables; output rows
are sorted by key, so the pipeline is invariant to input row order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import EmbeddingTable
from .errors import ValidationError


@dataclass(frozen=True)
class AlignmentConfig:
    """Blend factor toward the per-position cluster centre; 1 = no change."""

    alpha_align: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.alpha_align <= 1.0:
            raise ValidationError("alpha_align must be in [0, 1]")


def site_representation(cls_vec: np.ndarray, patches: np.ndarray) -> np.ndarray:
    """Concatenate the CLS vector with the mean over patch vectors."""
    patches = np.asarray(patches)
    if patches.ndim != 2 or patches.shape[0] == 0:
        raise ValidationError("patches must be a non-empty (n_patches, d) matrix")
    mean_patch = patches.mean(axis=0, dtype=np.float64).astype(patches.dtype)
    return np.concatenate([np.asarray(cls_vec), mean_patch])


def well_grid_resample(site_vectors) -> np.ndarray:
    """Reduce 16 row-major grid vectors to 9 by bilinear resampling.

    A 4x4 acquisition grid is sampled at corner-aligned coordinates
    {0, 1.5, 3} x {0, 1.5, 3} component-wise, preserving the four corner
    sites exactly; 9 vectors pass through unchanged.
    """
    vecs = np.asarray(site_vectors)
    if vecs.ndim != 2 or vecs.shape[0] not in (9, 16):
        raise ValidationError(f"expected 9 or 16 site vectors, got shape {vecs.shape}")
    if vecs.shape[0] == 9:
        return vecs.copy()
    grid = vecs.reshape(4, 4, -1)
    coords = (0.0, 1.5, 3.0)
    out = np.empty((3, 3, grid.shape[2]), dtype=np.float64)
    for i, r in enumerate(coords):
        r0 = min(int(np.floor(r)), 3)
        r1 = min(r0 + 1, 3)
        fr = r - r0
        for j, c in enumerate(coords):
            c0 = min(int(np.floor(c)), 3)
            c1 = min(c0 + 1, 3)
            fc = c - c0
            out[i, j] = (
                grid[r0, c0] * (1 - fr) * (1 - fc)
                + grid[r0, c1] * (1 - fr) * fc
                + grid[r1, c0] * fr * (1 - fc)
                + grid[r1, c1] * fr * fc
            )
    return out.reshape(9, -1).astype(vecs.dtype)


def merge_well(nine_vectors, mode: str = "concat") -> np.ndarray:
    """Merge the 9 resampled site vectors into one well vector."""
    vecs = np.asarray(nine_vectors)
    if vecs.ndim != 2 or vecs.shape[0] != 9:
        raise ValidationError(f"expected exactly 9 vectors, got shape {vecs.shape}")
    if mode == "concat":
        return vecs.reshape(-1).copy()
    if mode == "average":
        return vecs.mean(axis=0, dtype=np.float64).astype(vecs.dtype)
    raise ValidationError(f"unknown merge mode {mode!r}")


def aggregate_wells(
    cls_table: EmbeddingTable,
    patch_table: EmbeddingTable | None = None,
    site_repr: str = "concat",
    merge: str = "concat",
) -> EmbeddingTable:
    """Site tables -> one well-level table.

    ``site_repr`` selects the per-site vector: "concat" joins CLS with the
    mean-patch part (requires ``patch_table``), "cls" uses CLS alone. Site
    order within a well comes from the site index, not row order.
    """
    cls_table.validate()
    if cls_table.level != "site":
        raise ValidationError("aggregate_wells needs site-level tables")
    if site_repr not in ("concat", "cls"):
        raise ValidationError(f"unknown site_repr {site_repr!r}")
    if site_repr == "concat":
        if patch_table is None:
            raise ValidationError("site_repr 'concat' needs the patch table")
        patch_table.validate()
        if patch_table.level != "site" or set(patch_table.keys) != set(cls_table.keys):
            raise ValidationError("patch table keys must match the CLS table")
        patch_index = patch_table.row_index()

    wells: dict[tuple, list[tuple[int, np.ndarray]]] = {}
    for i, key in enumerate(cls_table.keys):
        vec = cls_table.vectors[i]
        if site_repr == "concat":
            vec = np.concatenate([vec, patch_table.vectors[patch_index[key]]])
        wells.setdefault((key[0], key[1]), []).append((key[2], vec))

    keys = []
    rows = []
    for well_key in sorted(wells):
        sites = sorted(wells[well_key], key=lambda kv: kv[0])
        if [s for s, _ in sites] != list(range(len(sites))):
            raise ValidationError(f"well {well_key}: site indices not contiguous")
        stacked = np.stack([v for _, v in sites])
        rows.append(merge_well(well_grid_resample(stacked), mode=merge))
        keys.append(well_key)

    table = EmbeddingTable(
        keys=keys,
        vectors=np.stack(rows).astype(np.float32),
        level="well",
        meta={"site_repr": site_repr, "merge": merge},
    )
    table.validate()
    return table


def cross_plate_align(table: EmbeddingTable, cfg: AlignmentConfig) -> EmbeddingTable:
    """Shrink each well vector toward the mean of same-position wells.

    For every well position w: mu_w = mean over plates of z, then
    z <- alpha * z + (1 - alpha) * mu_w. Positions appearing on a single
    plate are unchanged for any alpha. Per-position means are preserved.
    """
    table.validate()
    if table.level != "well":
        raise ValidationError("cross_plate_align needs a well-level table")
    if cfg.alpha_align == 1.0:
        out = table.vectors.copy()
    else:
        vectors = table.vectors.astype(np.float64)
        out64 = vectors.copy()
        groups: dict[str, list[int]] = {}
        for i, key in enumerate(table.keys):
            groups.setdefault(key[1], []).append(i)
        for rows in groups.values():
            mu = vectors[rows].mean(axis=0)
            out64[rows] = cfg.alpha_align * vectors[rows] + (1.0 - cfg.alpha_align) * mu
        out = out64.astype(np.float32)
    meta = dict(table.meta)
    meta["aligned"] = True
    return EmbeddingTable(keys=list(table.keys), vectors=out, level="well", meta=meta)


def fuse_channel_models(fluor: EmbeddingTable, bright: EmbeddingTable) -> EmbeddingTable:
    """Concatenate the two channel models' well vectors, key-aligned."""
    fluor.validate()
    bright.validate()
    if fluor.level != "well" or bright.level != "well":
        raise ValidationError("fusion needs well-level tables")
    if fluor.meta.get("fused") or bright.meta.get("fused"):
        raise ValidationError("input tables are already fused")
    fk, bk = set(fluor.keys), set(bright.keys)
    if fk != bk:
        missing_b = sorted(fk - bk)
        missing_f = sorted(bk - fk)
        raise ValidationError(
            f"well keys differ; missing in brightfield: {missing_b}, "
            f"missing in fluorescent: {missing_f}"
        )
    bright_index = bright.row_index()
    keys = sorted(fluor.keys)
    fluor_index = fluor.row_index()
    rows = [
        np.concatenate(
            [fluor.vectors[fluor_index[k]], bright.vectors[bright_index[k]]]
        )
        for k in keys
    ]
    meta = {"fused": True}
    table = EmbeddingTable(
        keys=keys, vectors=np.stack(rows).astype(np.float32), level="well", meta=meta
    )
    table.validate()
    return table
