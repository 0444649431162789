"""Synthetic plate/well/site dataset generator.

Produces a directory of image files plus a validated manifest with the
same structure the rest of the pipeline expects from real screens: plates
per cell line, a fixed position-to-perturbation assignment shared by all
plates, and 9 or 16 sites per well imaged as one 5-channel fluorescent and
one 3-channel brightfield file.

Cells are soft-edged elliptical blobs. Each perturbation gets a signature
of per-channel base intensities (grid-spaced, so any two perturbations
differ by at least 0.1 in some channel), a blob density and a radius
profile. Per-blob amplitude is normalised by density * radius^2 so the
mean intensity of a channel encodes the signature intensity and not the
cell count; density and radius remain visible as texture.

Site-to-site nuisances (illumination gradient, count jitter, placement
jitter, per-site gain, pixel noise) and per-plate gain factors all scale
with ``nuisance_strength`` and vanish at 0. Cell placement is keyed on the
well, not the site, so at strength 0 all sites of a well are identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataio
from .dataio import (
    BRIGHTFIELD,
    FLUORESCENT,
    CellImage,
    DatasetManifest,
    SiteRecord,
)
from .errors import ValidationError
from .seeding import (
    TAG_ASSIGNMENT,
    TAG_LINE,
    TAG_PLACEMENT,
    TAG_PLATE,
    TAG_SITE,
    rng_for,
)

INTENSITY_LEVELS = (0.2, 0.35, 0.5, 0.65, 0.8)
DENSITY_LEVELS = (26, 28, 30, 32)  # blobs per site before jitter
RADIUS_LEVELS = (3.2, 4.0, 4.8)
RADIUS_SIGMA = 0.5
BLOB_MASS_FRACTION = 0.30  # mean intensity added by blobs at base 1.0
FLUOR_BACKGROUND = 0.08
BRIGHT_BACKGROUND = 0.50
LINE_FACTOR_RANGE = (0.95, 1.05)
PLATE_FACTOR_RANGE = 0.10
EDGE_MARGIN = 6.0


@dataclass(frozen=True)
class SynthConfig:
    n_cell_lines: int = 2
    n_plates_per_line: int = 2
    n_well_positions: int = 16
    n_perturbations: int = 8
    sites_per_well: int = 9
    image_size: tuple[int, int] = (64, 64)
    seed: int = 0
    nuisance_strength: float = 1.0

    def validate(self) -> None:
        if self.n_cell_lines < 1:
            raise ValidationError("n_cell_lines must be >= 1")
        if self.n_plates_per_line < 1:
            raise ValidationError("n_plates_per_line must be >= 1")
        if self.n_well_positions < 2:
            raise ValidationError("n_well_positions must be >= 2")
        if self.n_perturbations < 2:
            raise ValidationError("n_perturbations must be >= 2")
        if self.n_perturbations > self.n_well_positions:
            raise ValidationError("n_perturbations must be <= n_well_positions")
        if self.sites_per_well not in dataio.VALID_SITE_COUNTS:
            raise ValidationError("sites_per_well must be 9 or 16")
        h, w = self.image_size
        if h < 16 or w < 16:
            raise ValidationError("image_size must be at least 16x16")
        if self.nuisance_strength < 0:
            raise ValidationError("nuisance_strength must be >= 0")


@dataclass(frozen=True)
class PhenotypeSignature:
    """Per-perturbation appearance parameters."""

    fluor_intensity: tuple[float, ...]  # 5 values in (0, 1)
    bright_intensity: tuple[float, ...]  # 3 values in (0, 1)
    blob_density: int
    blob_radius_mean: float
    blob_radius_sigma: float
    line_modulation: tuple[tuple[float, ...], ...]  # per line, 8 channel factors


def perturbation_signature(seed: int, pert_index: int, n_cell_lines: int) -> PhenotypeSignature:
    fluor = tuple(
        INTENSITY_LEVELS[(pert_index // 5**c) % 5] for c in range(5)
    )
    mixed = (pert_index * 7 + 3) % 125
    bright = tuple(INTENSITY_LEVELS[(mixed // 5**c) % 5] for c in range(3))
    lines = tuple(
        tuple(rng_for(seed, TAG_LINE, li).uniform(*LINE_FACTOR_RANGE, size=8))
        for li in range(n_cell_lines)
    )
    return PhenotypeSignature(
        fluor_intensity=fluor,
        bright_intensity=bright,
        blob_density=DENSITY_LEVELS[pert_index % 4],
        blob_radius_mean=RADIUS_LEVELS[(pert_index // 4) % 3],
        blob_radius_sigma=RADIUS_SIGMA,
        line_modulation=lines,
    )


def position_labels(n: int) -> list[str]:
    cols = math.ceil(math.sqrt(n))
    return [f"{chr(ord('A') + i // cols)}{i % cols + 1:02d}" for i in range(n)]


def assign_perturbations(cfg: SynthConfig) -> dict[str, int]:
    """Fixed position-to-perturbation assignment reused across all plates."""
    positions = position_labels(cfg.n_well_positions)
    order = rng_for(cfg.seed, TAG_ASSIGNMENT).permutation(cfg.n_well_positions)
    return {positions[j]: int(i % cfg.n_perturbations) for i, j in enumerate(order)}


def _blob_profile(h: int, w: int, centers, radii, eccs, angles) -> np.ndarray:
    """Sum of anisotropic Gaussian bumps, peak height 1 each."""
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    profile = np.zeros((h, w), dtype=np.float64)
    for (cy, cx), r, ecc, ang in zip(centers, radii, eccs, angles):
        ca, sa = math.cos(ang), math.sin(ang)
        u = (ys - cy) * ca + (xs - cx) * sa
        v = -(ys - cy) * sa + (xs - cx) * ca
        ru = max(r * ecc, 1.0)
        rv = max(r / ecc, 1.0)
        profile += np.exp(-0.5 * ((u / ru) ** 2 + (v / rv) ** 2))
    return profile


def _render_site(
    cfg: SynthConfig,
    sig: PhenotypeSignature,
    line_idx: int,
    plate_idx: int,
    well_idx: int,
    site_idx: int,
) -> np.ndarray:
    """All 8 channels of one site, float32 in [0, 1]."""
    h, w = cfg.image_size
    s = cfg.nuisance_strength

    placement = rng_for(cfg.seed, TAG_PLACEMENT, line_idx, plate_idx, well_idx)
    n_base = sig.blob_density
    n_candidates = n_base + 12
    lo = EDGE_MARGIN
    centers = placement.uniform(
        [lo, lo], [h - lo, w - lo], size=(n_candidates, 2)
    )
    radii = np.clip(
        placement.normal(sig.blob_radius_mean, sig.blob_radius_sigma, n_candidates),
        1.5,
        None,
    )
    eccs = placement.uniform(0.8, 1.25, n_candidates)
    angles = placement.uniform(0.0, math.pi, n_candidates)

    site = rng_for(cfg.seed, TAG_SITE, line_idx, plate_idx, well_idx, site_idx)
    count = n_base
    jitter = np.zeros((n_candidates, 2))
    illum = np.ones((h, w), dtype=np.float64)
    gain = np.ones(8, dtype=np.float64)
    if s > 0:
        count = int(np.clip(round(n_base + s * site.normal(0.0, 0.15 * n_base)), 4, n_candidates))
        # Sites are distinct fields of view: at full nuisance strength the
        # per-blob jitter is large enough to decorrelate cell layouts.
        jitter = s * site.normal(0.0, 6.0, size=(n_candidates, 2))
        gx, gy = site.uniform(-0.3, 0.3, size=2)
        ys = (np.arange(h) / max(h - 1, 1) - 0.5)[:, None]
        xs = (np.arange(w) / max(w - 1, 1) - 0.5)[None, :]
        illum = 1.0 + s * (gx * xs + gy * ys)
        gain = 1.0 + s * 0.05 * site.normal(0.0, 1.0, size=8)

    profile = _blob_profile(
        h, w, centers[:count] + jitter[:count], radii[:count], eccs[:count], angles[:count]
    )

    # Amplitude normalised so blob mass is density/radius independent.
    mass = BLOB_MASS_FRACTION * h * w / (n_base * 2.0 * math.pi * sig.blob_radius_mean**2)
    line_f = np.asarray(sig.line_modulation[line_idx])
    plate_rng = rng_for(cfg.seed, TAG_PLATE, line_idx, plate_idx)
    plate_f = 1.0 + s * plate_rng.uniform(-PLATE_FACTOR_RANGE, PLATE_FACTOR_RANGE, size=8)

    base = np.concatenate([np.asarray(sig.fluor_intensity), np.asarray(sig.bright_intensity)])
    amp = mass * base * line_f * plate_f * gain
    pixels = np.empty((h, w, 8), dtype=np.float64)
    pixels[:, :, :5] = FLUOR_BACKGROUND + profile[:, :, None] * amp[:5]
    pixels[:, :, 5:] = BRIGHT_BACKGROUND - profile[:, :, None] * amp[5:]
    pixels *= illum[:, :, None]
    if s > 0:
        pixels += s * 0.02 * site.normal(0.0, 1.0, size=pixels.shape)
    return np.clip(pixels, 0.0, 1.0).astype(np.float32)


def generate_dataset(cfg: SynthConfig, out_dir: str | Path) -> DatasetManifest:
    """Write images and manifest under ``out_dir``; returns the manifest.

    Deterministic in ``cfg``: the same config yields byte-identical files.
    Per-site RNG streams are keyed on (seed, line, plate, well, site), so
    growing the plate count leaves existing wells' pixels untouched.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)

    assignment = assign_perturbations(cfg)
    signatures = {
        p: perturbation_signature(cfg.seed, p, cfg.n_cell_lines)
        for p in range(cfg.n_perturbations)
    }
    positions = position_labels(cfg.n_well_positions)

    records: list[SiteRecord] = []
    for line_idx in range(cfg.n_cell_lines):
        cell_line = f"CL{line_idx + 1}"
        for plate_idx in range(cfg.n_plates_per_line):
            plate_id = f"{cell_line}-P{plate_idx + 1:02d}"
            plate_dir = out_dir / "images" / plate_id
            plate_dir.mkdir(parents=True, exist_ok=True)
            for well_idx, pos in enumerate(positions):
                pert = assignment[pos]
                sig = signatures[pert]
                for site_idx in range(cfg.sites_per_well):
                    pixels = _render_site(
                        cfg, sig, line_idx, plate_idx, well_idx, site_idx
                    )
                    for channel_set, sl, kinds in (
                        (FLUORESCENT, slice(0, 5), (FLUORESCENT,) * 5),
                        (BRIGHTFIELD, slice(5, 8), (BRIGHTFIELD,) * 3),
                    ):
                        image = CellImage(
                            pixels=np.ascontiguousarray(pixels[:, :, sl]),
                            channel_kinds=kinds,
                        )
                        image.validate_channel_set()
                        rel = (
                            f"images/{plate_id}/"
                            f"{pos}_s{site_idx:02d}_{channel_set}.cpim"
                        )
                        dataio.write_image(image, out_dir / rel)
                        records.append(
                            SiteRecord(
                                plate_id=plate_id,
                                well_position=pos,
                                site_index=site_idx,
                                cell_line=cell_line,
                                perturbation=f"pert-{pert:02d}",
                                image_path=rel,
                                channel_set=channel_set,
                            )
                        )

    manifest = DatasetManifest(records=records, root=out_dir)
    violations = dataio.validate_manifest(records)
    if violations:  # internal bug guard; the generator must satisfy dataio
        raise ValidationError("generator produced an invalid manifest: " + violations[0])
    dataio.save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest
