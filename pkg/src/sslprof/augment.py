"""Stochastic augmentations for cell images and training-view assembly.

All operations map valid images to valid images (shape, finiteness and the
[0, 1] range are preserved) and are pure functions of (input, config, RNG
state). Zero-strength configs reduce to exact identities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._kernels import bilinear_gather, separable_blur
from .dataio import CellImage
from .errors import ValidationError


@dataclass(frozen=True)
class ColorJitterConfig:
    """Per-channel brightness/contrast jitter strengths; 0 disables."""

    alpha_b: float = 0.25
    alpha_c: float = 0.25

    def __post_init__(self):
        if not (math.isfinite(self.alpha_b) and math.isfinite(self.alpha_c)):
            raise ValidationError("jitter strengths must be finite")
        if self.alpha_b < 0 or self.alpha_c < 0:
            raise ValidationError("jitter strengths must be >= 0")


@dataclass(frozen=True)
class NoiseConfig:
    """Sensor noise model: Poisson shot noise, dark offset, Gaussian read noise."""

    sigma_shot: float = 0.1
    sigma_dark: float = 0.05
    sigma_read: float = 0.01

    def __post_init__(self):
        if self.sigma_shot <= 0:
            raise ValidationError("sigma_shot must be > 0")
        if self.sigma_dark < 0 or self.sigma_read < 0:
            raise ValidationError("sigma_dark and sigma_read must be >= 0")


@dataclass(frozen=True)
class ElasticConfig:
    """Smooth random warp: blurred noise displacement fields scaled by alpha."""

    alpha_elastic: float = 1200.0
    sigma_smooth: float = 40.0
    prob: float = 0.5

    def __post_init__(self):
        if self.alpha_elastic < 0:
            raise ValidationError("alpha_elastic must be >= 0")
        if self.sigma_smooth <= 0:
            raise ValidationError("sigma_smooth must be > 0")
        if not 0.0 <= self.prob <= 1.0:
            raise ValidationError("prob must be in [0, 1]")


@dataclass(frozen=True)
class AugmentConfig:
    """Full view-generation pipeline settings.

    The pipeline order is fixed: resized crop, rotation, elastic warp,
    channel jitter, sensor noise (noise last, where it arises physically).
    """

    out_size: tuple[int, int] = (48, 48)
    patch_size: int = 8
    crop_scale: tuple[float, float] = (0.5, 1.0)
    rotate_prob: float = 0.5
    elastic: ElasticConfig = field(default_factory=ElasticConfig)
    jitter: ColorJitterConfig = field(default_factory=ColorJitterConfig)
    jitter_prob: float = 0.8
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    noise_prob: float = 0.5
    mask_ratio: tuple[float, float] = (0.1, 0.5)

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ValidationError("crop_scale must satisfy 0 < lo <= hi <= 1")
        for name in ("rotate_prob", "jitter_prob", "noise_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1]")
        if self.out_size[0] % self.patch_size or self.out_size[1] % self.patch_size:
            raise ValidationError("out_size must be divisible by patch_size")

    @property
    def mask_grid(self) -> tuple[int, int]:
        return (self.out_size[0] // self.patch_size, self.out_size[1] // self.patch_size)


@dataclass(frozen=True)
class ViewSet:
    """The augmented views for one training example.

    ``v1`` is the anchor view whose masked copy the student sees, ``v2``
    comes from a different site of the same well. ``v1_masked_tokens`` is a
    boolean mask over the patch grid of ``v1``.
    """

    v1: CellImage
    v1_masked_tokens: np.ndarray
    v2: CellImage
    provenance: tuple[tuple, tuple] | None = None


def apply_channel_jitter(image: CellImage, betas, gammas) -> CellImage:
    """Deterministic core of the jitter: brightness then mean-anchored contrast.

    For channel c: x = pixels_c * beta_c, mu = mean(x),
    out = (x - mu) * gamma_c + mu, clipped to [0, 1]. Factors of exactly
    1.0 leave the channel bit-identical.
    """
    pixels = image.pixels
    out = pixels.copy()
    for c in range(pixels.shape[2]):
        ch = out[:, :, c]
        beta = float(betas[c])
        gamma = float(gammas[c])
        if beta != 1.0:
            ch = ch * np.float32(beta)
        if gamma != 1.0:
            mu = np.float32(np.mean(ch, dtype=np.float64))
            ch = (ch - mu) * np.float32(gamma) + mu
        if beta != 1.0 or gamma != 1.0:
            out[:, :, c] = np.clip(ch, 0.0, 1.0)
    return CellImage(pixels=out, channel_kinds=image.channel_kinds)


def channel_color_jitter(
    image: CellImage, cfg: ColorJitterConfig, rng: np.random.Generator
) -> CellImage:
    """Per-channel brightness/contrast jitter with independent uniform draws."""
    image.validate()
    c = image.n_channels
    betas = rng.uniform(max(0.0, 1.0 - cfg.alpha_b), 1.0 + cfg.alpha_b, size=c)
    gammas = rng.uniform(max(0.0, 1.0 - cfg.alpha_c), 1.0 + cfg.alpha_c, size=c)
    if cfg.alpha_b == 0.0:
        betas = np.ones(c)
    if cfg.alpha_c == 0.0:
        gammas = np.ones(c)
    return apply_channel_jitter(image, betas, gammas)


def sensor_noise_raw(
    pixels: np.ndarray, cfg: NoiseConfig, rng: np.random.Generator
) -> np.ndarray:
    """Pre-clip noisy intensities (float64): poisson(I/s_shot)*s_shot + dark + read."""
    lam = np.asarray(pixels, dtype=np.float64) / cfg.sigma_shot
    noisy = rng.poisson(lam).astype(np.float64) * cfg.sigma_shot + cfg.sigma_dark
    if cfg.sigma_read > 0:
        noisy += rng.normal(0.0, cfg.sigma_read, size=pixels.shape)
    return noisy


def microscope_noise(
    image: CellImage, cfg: NoiseConfig, rng: np.random.Generator
) -> CellImage:
    image.validate()
    noisy = sensor_noise_raw(image.pixels, cfg, rng)
    out = np.clip(noisy, 0.0, 1.0).astype(np.float32)
    return CellImage(pixels=out, channel_kinds=image.channel_kinds)


def _gaussian_taps(sigma: float) -> np.ndarray:
    half = int(math.ceil(3.0 * sigma))
    xs = np.arange(-half, half + 1, dtype=np.float64)
    taps = np.exp(-0.5 * (xs / sigma) ** 2)
    return taps / taps.sum()


def elastic_deform(
    image: CellImage, cfg: ElasticConfig, rng: np.random.Generator
) -> CellImage:
    """Warp by two independent blurred-noise displacement fields.

    Applied with probability ``cfg.prob``; with prob == 0 the function
    returns immediately without consuming any RNG state.
    """
    image.validate()
    if cfg.prob <= 0.0:
        return image
    if cfg.prob < 1.0 and rng.uniform() >= cfg.prob:
        return image

    h, w, _ = image.pixels.shape
    taps = _gaussian_taps(cfg.sigma_smooth)
    dx = cfg.alpha_elastic * separable_blur(rng.standard_normal((h, w)), taps)
    dy = cfg.alpha_elastic * separable_blur(rng.standard_normal((h, w)), taps)
    rows = np.arange(h, dtype=np.float64)[:, None] + dy
    cols = np.arange(w, dtype=np.float64)[None, :] + dx
    out = bilinear_gather(image.pixels, rows, cols).astype(np.float32)
    return CellImage(pixels=out, channel_kinds=image.channel_kinds)


def random_rotate(
    image: CellImage, rng: np.random.Generator, angle_deg: float | None = None
) -> CellImage:
    """Rotate counter-clockwise about the image centre, border-clamped.

    The angle is drawn from U[0, 360) unless given. Exact multiples of 90
    degrees take an index-permutation path (requires a square image).
    """
    image.validate()
    if angle_deg is None:
        angle_deg = float(rng.uniform(0.0, 360.0))
    quarter = angle_deg / 90.0
    if quarter == round(quarter):
        k = int(round(quarter)) % 4
        if k == 0:
            return image
        if image.height != image.width:
            raise ValidationError("exact 90-degree rotation needs a square image")
        out = np.ascontiguousarray(np.rot90(image.pixels, k=k, axes=(0, 1)))
        return CellImage(pixels=out, channel_kinds=image.channel_kinds)

    h, w, _ = image.pixels.shape
    theta = math.radians(angle_deg)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    dr = np.arange(h, dtype=np.float64)[:, None] - cy
    dc = np.arange(w, dtype=np.float64)[None, :] - cx
    rows = cy + dc * math.sin(theta) + dr * math.cos(theta)
    cols = cx + dc * math.cos(theta) - dr * math.sin(theta)
    out = bilinear_gather(image.pixels, rows, cols).astype(np.float32)
    return CellImage(pixels=out, channel_kinds=image.channel_kinds)


def random_resized_crop(
    image: CellImage,
    out_size: tuple[int, int],
    scale_range: tuple[float, float],
    rng: np.random.Generator,
) -> CellImage:
    """Square crop of random area fraction, resized to ``out_size``.

    With scale_range (1, 1) the crop is the full image; when the source
    already has the target size the result is then bit-identical.
    """
    image.validate()
    h, w, _ = image.pixels.shape
    oh, ow = out_size
    s = float(rng.uniform(scale_range[0], scale_range[1]))
    side = max(2, int(round(math.sqrt(s) * min(h, w))))
    side = min(side, h, w)
    r0 = int(rng.integers(0, h - side + 1))
    c0 = int(rng.integers(0, w - side + 1))
    if side == h == oh and side == w == ow and r0 == 0 and c0 == 0:
        return image
    rows = np.linspace(r0, r0 + side - 1, oh)[:, None] * np.ones((1, ow))
    cols = np.ones((oh, 1)) * np.linspace(c0, c0 + side - 1, ow)[None, :]
    out = bilinear_gather(image.pixels, rows, cols).astype(np.float32)
    return CellImage(pixels=out, channel_kinds=image.channel_kinds)


def sample_block_mask(
    grid: tuple[int, int], ratio_range: tuple[float, float], rng: np.random.Generator
) -> np.ndarray:
    """Block-wise boolean mask over a patch grid.

    Rectangular blocks are placed until a target cell count, drawn from
    the ratio range, is reached exactly, so the masked fraction is within
    the range up to integer rounding.
    """
    rows, cols = grid
    lo, hi = ratio_range
    if not 0.0 <= lo <= hi <= 1.0:
        raise ValidationError("ratio_range must satisfy 0 <= lo <= hi <= 1")
    if rows < 1 or cols < 1:
        raise ValidationError("mask grid must be non-empty")
    n = rows * cols
    mask = np.zeros((rows, cols), dtype=bool)
    target = int(round(rng.uniform(lo, hi) * n))
    if target == 0:
        return mask

    masked = 0
    attempts = 0
    while masked < target and attempts < 10 * n:
        attempts += 1
        remaining = target - masked
        area = int(rng.integers(1, remaining + 1))
        aspect = math.exp(rng.uniform(math.log(0.3), math.log(1.0 / 0.3)))
        bh = max(1, min(rows, int(round(math.sqrt(area * aspect)))))
        bw = max(1, min(cols, int(round(math.sqrt(area / aspect)))))
        while bh * bw > remaining:
            if bh >= bw and bh > 1:
                bh -= 1
            elif bw > 1:
                bw -= 1
            else:
                break
        if bh * bw > remaining:
            continue
        r0 = int(rng.integers(0, rows - bh + 1))
        c0 = int(rng.integers(0, cols - bw + 1))
        mask[r0 : r0 + bh, c0 : c0 + bw] = True
        masked = int(mask.sum())

    if masked < target:  # fill the remainder cell by cell, still randomly
        open_cells = np.flatnonzero(~mask.ravel())
        picks = rng.permutation(open_cells)[: target - masked]
        mask.ravel()[picks] = True
    return mask


def sample_sibling_index(n_sites: int, anchor: int, rng: np.random.Generator) -> int:
    """Uniform choice among the well's other site indices."""
    if n_sites < 2:
        raise ValidationError("sibling sampling needs at least 2 sites")
    pick = int(rng.integers(0, n_sites - 1))
    return pick + 1 if pick >= anchor else pick


def _augment_one(image: CellImage, cfg: AugmentConfig, rng: np.random.Generator) -> CellImage:
    out = random_resized_crop(image, cfg.out_size, cfg.crop_scale, rng)
    if cfg.rotate_prob > 0 and rng.uniform() < cfg.rotate_prob:
        out = random_rotate(out, rng)
    out = elastic_deform(out, cfg.elastic, rng)
    if cfg.jitter_prob > 0 and rng.uniform() < cfg.jitter_prob:
        out = channel_color_jitter(out, cfg.jitter, rng)
    if cfg.noise_prob > 0 and rng.uniform() < cfg.noise_prob:
        out = microscope_noise(out, cfg.noise, rng)
    return out


def make_views(
    site: CellImage,
    sibling: CellImage,
    cfg: AugmentConfig,
    rng: np.random.Generator,
    site_key: tuple | None = None,
    sibling_key: tuple | None = None,
) -> ViewSet:
    """Build the anchor view, its patch mask, and the sibling-site view."""
    if site.pixels.shape != sibling.pixels.shape:
        raise ValidationError(
            f"site/sibling shape mismatch: {site.pixels.shape} vs {sibling.pixels.shape}"
        )
    if site.channel_kinds != sibling.channel_kinds:
        raise ValidationError("site/sibling channel kinds differ")
    if site_key is not None and sibling_key is not None:
        if site_key[:2] != sibling_key[:2] or site_key[2] == sibling_key[2]:
            raise ValidationError(
                f"sibling must be a different site of the same well: {site_key} vs {sibling_key}"
            )
    v1 = _augment_one(site, cfg, rng)
    v2 = _augment_one(sibling, cfg, rng)
    mask = sample_block_mask(cfg.mask_grid, cfg.mask_ratio, rng)
    provenance = (site_key, sibling_key) if site_key is not None else None
    return ViewSet(v1=v1, v1_masked_tokens=mask, v2=v2, provenance=provenance)
