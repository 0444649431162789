import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sslprof import augment
from sslprof.augment import (
    AugmentConfig,
    ColorJitterConfig,
    ElasticConfig,
    NoiseConfig,
    apply_channel_jitter,
    channel_color_jitter,
    elastic_deform,
    make_views,
    microscope_noise,
    random_resized_crop,
    random_rotate,
    sample_block_mask,
    sample_sibling_index,
    sensor_noise_raw,
)
from sslprof.dataio import FLUORESCENT, CellImage
from sslprof.errors import ValidationError

from conftest import random_image


def _single_channel(values) -> CellImage:
    pixels = np.asarray(values, dtype=np.float32)[:, :, None]
    return CellImage(pixels=pixels, channel_kinds=(FLUORESCENT,))


class TestColorJitter:
    def test_zero_strength_exact_identity(self, rng):
        img = random_image(rng)
        out = channel_color_jitter(img, ColorJitterConfig(0.0, 0.0), rng)
        assert np.array_equal(out.pixels, img.pixels)

    def test_forced_factors_arithmetic(self):
        # channel [0, 0.5, 1.0], beta 1.2 -> [0, .6, 1.2], mean .6,
        # gamma 0.8 -> [.12, .6, 1.08], clip -> [.12, .6, 1.0]
        img = _single_channel([[0.0, 0.5, 1.0]])
        out = apply_channel_jitter(img, [1.2], [0.8])
        np.testing.assert_allclose(
            out.pixels[0, :, 0], [0.12, 0.6, 1.0], atol=1e-6
        )

    def test_constant_channel_fixed_point(self, rng):
        img = _single_channel(np.full((4, 4), 0.4))
        beta, gamma = 1.7, 0.3
        out = apply_channel_jitter(img, [beta], [gamma])
        np.testing.assert_allclose(out.pixels, np.clip(0.4 * beta, 0, 1), atol=1e-6)

    def test_channels_use_independent_draws(self, rng):
        img = random_image(rng, kinds=(FLUORESCENT,) * 5)
        out = channel_color_jitter(img, ColorJitterConfig(0.5, 0.5), rng)
        deltas = [
            np.abs(out.pixels[..., c] - img.pixels[..., c]).mean() for c in range(5)
        ]
        assert len({round(d, 6) for d in deltas}) > 1

    @settings(max_examples=20, deadline=None)
    @given(
        alpha_b=st.floats(0, 1),
        alpha_c=st.floats(0, 1),
        seed=st.integers(0, 2**31),
    )
    def test_output_always_valid(self, alpha_b, alpha_c, seed):
        rng = np.random.default_rng(seed)
        img = random_image(rng, 8, 8)
        out = channel_color_jitter(img, ColorJitterConfig(alpha_b, alpha_c), rng)
        out.validate()


class TestMicroscopeNoise:
    def test_zero_image_gives_dark_level(self, rng):
        img = _single_channel(np.zeros((8, 8)))
        cfg = NoiseConfig(sigma_read=0.0)
        out = microscope_noise(img, cfg, rng)
        np.testing.assert_allclose(out.pixels, 0.05, atol=1e-7)

    def test_preclip_mean_matches_model(self, rng):
        # E[poisson(I/s)*s + dark] = I + dark = 0.55 at I = 0.5
        cfg = NoiseConfig()
        pixels = np.full(100_000, 0.5)
        raw = sensor_noise_raw(pixels, cfg, rng)
        var = 0.5 * cfg.sigma_shot + cfg.sigma_read**2
        stderr = np.sqrt(var / pixels.size)
        assert abs(raw.mean() - 0.55) < 3 * stderr

    def test_output_clipped(self, rng):
        img = random_image(rng)
        out = microscope_noise(img, NoiseConfig(), rng)
        assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0

    def test_bad_sigma_shot(self):
        with pytest.raises(ValidationError):
            NoiseConfig(sigma_shot=0.0)


class TestElastic:
    def test_zero_alpha_exact_identity(self, rng):
        img = random_image(rng)
        cfg = ElasticConfig(alpha_elastic=0.0, sigma_smooth=4.0, prob=1.0)
        out = elastic_deform(img, cfg, rng)
        assert np.array_equal(out.pixels, img.pixels)

    def test_prob_zero_consumes_no_rng(self, rng):
        img = random_image(rng)
        before = rng.bit_generator.state
        out = elastic_deform(img, ElasticConfig(prob=0.0), rng)
        assert rng.bit_generator.state == before
        assert out is img

    def test_constant_image_preserved(self, rng):
        img = _single_channel(np.full((12, 12), 0.6))
        cfg = ElasticConfig(alpha_elastic=50.0, sigma_smooth=3.0, prob=1.0)
        out = elastic_deform(img, cfg, rng)
        np.testing.assert_allclose(out.pixels, 0.6, atol=1e-6)

    def test_deforms_structure(self, rng):
        img = random_image(rng, 16, 16)
        cfg = ElasticConfig(alpha_elastic=100.0, sigma_smooth=3.0, prob=1.0)
        out = elastic_deform(img, cfg, rng)
        assert not np.array_equal(out.pixels, img.pixels)
        out.validate()


class TestRotation:
    def test_zero_angle_bitwise(self, rng):
        img = random_image(rng)
        out = random_rotate(img, rng, angle_deg=0.0)
        assert out.pixels is img.pixels

    def test_quarter_turn_permutation(self, rng):
        a, b, c, d = 1.0, 0.5, 0.25, 0.125
        img = _single_channel([[a, b], [c, d]])
        out = random_rotate(img, rng, angle_deg=90.0)
        np.testing.assert_array_equal(out.pixels[:, :, 0], [[b, d], [a, c]])

    def test_exact_multiples_match_rot90(self, rng):
        img = random_image(rng, 8, 8)
        for k in (1, 2, 3):
            out = random_rotate(img, rng, angle_deg=90.0 * k)
            expected = np.rot90(img.pixels, k=k, axes=(0, 1))
            np.testing.assert_array_equal(out.pixels, expected)

    def test_full_turn_near_identity(self, rng):
        img = random_image(rng, 8, 8)
        out = random_rotate(img, rng, angle_deg=360.0 - 1e-9)
        np.testing.assert_allclose(out.pixels, img.pixels, atol=1e-6)

    def test_continuous_angle_valid(self, rng):
        img = random_image(rng, 10, 10)
        out = random_rotate(img, rng, angle_deg=37.3)
        out.validate()


class TestBlockMask:
    def test_zero_range_empty(self, rng):
        mask = sample_block_mask((8, 8), (0.0, 0.0), rng)
        assert not mask.any()

    def test_full_range_full(self, rng):
        mask = sample_block_mask((8, 8), (1.0, 1.0), rng)
        assert mask.all()

    def test_ratio_within_bounds_monte_carlo(self, rng):
        fractions = [
            sample_block_mask((8, 8), (0.1, 0.5), rng).mean() for _ in range(10_000)
        ]
        assert min(fractions) >= 0.09
        assert max(fractions) <= 0.52

    def test_blocks_are_blocky(self, rng):
        # masked cells should have masked neighbours far more often than
        # an independent per-cell sampler would produce
        mask = sample_block_mask((16, 16), (0.4, 0.4), rng)
        shifted = np.zeros_like(mask)
        shifted[:, 1:] = mask[:, :-1]
        adjacency = (mask & shifted).sum() / max(mask.sum(), 1)
        assert adjacency > 0.45

    def test_invalid_range(self, rng):
        with pytest.raises(ValidationError):
            sample_block_mask((8, 8), (0.6, 0.5), rng)
        with pytest.raises(ValidationError):
            sample_block_mask((8, 8), (-0.1, 0.5), rng)


class TestMakeViews:
    def _cfg(self, **kw):
        defaults = dict(
            out_size=(16, 16),
            patch_size=8,
            crop_scale=(1.0, 1.0),
            rotate_prob=0.0,
            elastic=ElasticConfig(prob=0.0),
            jitter_prob=0.0,
            noise_prob=0.0,
            mask_ratio=(0.0, 0.0),
        )
        defaults.update(kw)
        return AugmentConfig(**defaults)

    def test_disabled_pipeline_is_resize_only(self, rng):
        site = random_image(rng, 16, 16)
        sibling = random_image(rng, 16, 16)
        views = make_views(site, sibling, self._cfg(), rng)
        assert np.array_equal(views.v1.pixels, site.pixels)
        assert np.array_equal(views.v2.pixels, sibling.pixels)
        assert not views.v1_masked_tokens.any()

    def test_same_seed_same_views(self, rng):
        site = random_image(rng, 24, 24)
        sibling = random_image(rng, 24, 24)
        cfg = self._cfg(
            crop_scale=(0.5, 1.0),
            rotate_prob=0.5,
            jitter_prob=0.8,
            noise_prob=0.5,
            elastic=ElasticConfig(50.0, 4.0, 0.5),
            mask_ratio=(0.1, 0.5),
        )
        a = make_views(site, sibling, cfg, np.random.default_rng(9))
        b = make_views(site, sibling, cfg, np.random.default_rng(9))
        assert np.array_equal(a.v1.pixels, b.v1.pixels)
        assert np.array_equal(a.v2.pixels, b.v2.pixels)
        assert np.array_equal(a.v1_masked_tokens, b.v1_masked_tokens)

    def test_mask_ratio_respected(self, rng):
        site = random_image(rng, 32, 32)
        cfg = self._cfg(out_size=(32, 32), mask_ratio=(0.25, 0.25))
        views = make_views(site, random_image(rng, 32, 32), cfg, rng)
        assert views.v1_masked_tokens.mean() == 0.25

    def test_shape_mismatch_rejected(self, rng):
        with pytest.raises(ValidationError):
            make_views(random_image(rng, 16, 16), random_image(rng, 24, 24), self._cfg(), rng)

    def test_provenance_same_site_rejected(self, rng):
        site = random_image(rng, 16, 16)
        with pytest.raises(ValidationError):
            make_views(
                site,
                site,
                self._cfg(),
                rng,
                site_key=("P", "A01", 0),
                sibling_key=("P", "A01", 0),
            )

    def test_outputs_valid_with_everything_on(self, rng):
        cfg = AugmentConfig(
            out_size=(16, 16),
            patch_size=8,
            elastic=ElasticConfig(60.0, 4.0, 1.0),
            rotate_prob=1.0,
            jitter_prob=1.0,
            noise_prob=1.0,
        )
        views = make_views(random_image(rng, 24, 24), random_image(rng, 24, 24), cfg, rng)
        views.v1.validate()
        views.v2.validate()


class TestSiblingSampling:
    def test_uniform_over_others(self):
        rng = np.random.default_rng(0)
        n, anchor, draws = 9, 3, 10_000
        counts = np.zeros(n)
        for _ in range(draws):
            idx = sample_sibling_index(n, anchor, rng)
            counts[idx] += 1
        assert counts[anchor] == 0
        p = 1 / (n - 1)
        sigma = np.sqrt(draws * p * (1 - p))
        expected = draws * p
        others = np.delete(counts, anchor)
        assert np.all(np.abs(others - expected) < 5 * sigma)

    def test_needs_two_sites(self, rng):
        with pytest.raises(ValidationError):
            sample_sibling_index(1, 0, rng)


class TestCrop:
    def test_full_scale_same_size_identity(self, rng):
        img = random_image(rng, 16, 16)
        out = random_resized_crop(img, (16, 16), (1.0, 1.0), rng)
        assert np.array_equal(out.pixels, img.pixels)

    def test_resize_changes_shape(self, rng):
        img = random_image(rng, 24, 24)
        out = random_resized_crop(img, (16, 16), (0.5, 1.0), rng)
        assert out.pixels.shape == (16, 16, 5)
        out.validate()


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_every_augmentation_preserves_validity(seed):
    rng = np.random.default_rng(seed)
    img = random_image(rng, 16, 16)
    for op in (
        lambda: channel_color_jitter(img, ColorJitterConfig(0.8, 0.8), rng),
        lambda: microscope_noise(img, NoiseConfig(), rng),
        lambda: elastic_deform(img, ElasticConfig(100.0, 3.0, 1.0), rng),
        lambda: random_rotate(img, rng),
        lambda: random_resized_crop(img, (8, 8), (0.3, 1.0), rng),
    ):
        out = op()
        out.validate()
        assert out.pixels.shape[2] == img.pixels.shape[2]
