import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_blob_mask
from dcpaseg.errors import GeometryError
from dcpaseg.sampler import (
    PatchSpec,
    SamplerConfig,
    SamplerWarning,
    centered_origin,
    corner_patches,
    disc_patch_count,
    extract,
    extract_mask,
    feasible_offsets,
    mask_stats,
    reflect_index,
    sample_disc_patches,
    sample_uniform_patches,
    tiling,
    training_patches,
)
from oracles import center_by_scan, feasible_origins, reflect_scalar


def disc_mask(size, cx, cy, r):
    yy, xx = np.mgrid[0:size[0], 0:size[1]]
    return ((xx - cx) ** 2 + (yy - cy) ** 2 <= r * r).astype(np.uint8)


@pytest.fixture
def small_cfg():
    return SamplerConfig(ratio=0.5, min_positive=10, patch_w=40, patch_h=40, margin=6)


class TestMaskStats:
    def test_four_corners(self):
        m = np.zeros((3, 3), np.uint8)
        m[0, 0] = m[0, 2] = m[2, 0] = m[2, 2] = 1
        s = mask_stats(m)
        assert s.center_of_mass == (1.0, 1.0)
        assert s.bbox == (0, 0, 2, 2)
        assert s.positive_count == 4

    def test_singleton(self):
        m = np.zeros((10, 10), np.uint8)
        m[7, 5] = 1
        assert mask_stats(m).center_of_mass == (5.0, 7.0)

    def test_empty(self):
        s = mask_stats(np.zeros((4, 4)))
        assert s.empty and s.bbox is None and s.center_of_mass is None

    def test_blob_matches_scan(self, rng):
        for _ in range(10):
            m = random_blob_mask(rng, size=32)
            if not m.any():
                continue
            (cx, cy), n = center_by_scan(m)
            s = mask_stats(m)
            assert s.positive_count == n
            assert s.center_of_mass == pytest.approx((cx, cy), abs=1e-12)
            x0, y0, x1, y1 = s.bbox
            assert x0 <= s.center_of_mass[0] <= x1 and y0 <= s.center_of_mass[1] <= y1


class TestConfig:
    @pytest.mark.parametrize("kwargs", [{"ratio": 0}, {"ratio": 1.5}, {"min_positive": -1}, {"patch_w": 0}, {"margin": -2}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            SamplerConfig(**kwargs)

    def test_defaults(self):
        cfg = SamplerConfig()
        assert (cfg.ratio, cfg.min_positive, cfg.include_corners) == (0.5, 500, True)


class TestDiscPatches:
    def test_half_of_ten(self, small_cfg, rng):
        mask = disc_mask((200, 200), 100, 100, 8)
        assert disc_patch_count(small_cfg, 10) == 5
        assert len(sample_disc_patches(mask, small_cfg, 10, rng)) == 5

    @pytest.mark.parametrize("r, P, n", [(0.5, 9, 5), (1.0, 4, 4), (0.3, 10, 3), (0.1, 1, 1)])
    def test_count_is_ceiling(self, r, P, n):
        assert disc_patch_count(SamplerConfig(ratio=r), P) == n

    def test_bbox_exactly_patch_sized(self, rng):
        cfg = SamplerConfig(min_positive=0, patch_w=10, patch_h=12, margin=0)
        mask = np.zeros((50, 50), np.uint8)
        mask[20:32, 15:25] = 1
        specs = [s for _ in range(50) for s in sample_disc_patches(mask, cfg, 2, rng)]
        assert {(s.x, s.y) for s in specs} == {(15, 20)}
        assert (15, 20) == centered_origin(mask_stats(mask), cfg)

    def test_below_floor_warns_and_returns_nothing(self, small_cfg, rng):
        mask = disc_mask((100, 100), 50, 50, 1)
        with pytest.warns(SamplerWarning, match="below the floor"):
            assert sample_disc_patches(mask, small_cfg, 4, rng) == []

    def test_oversized_disc_falls_back(self, rng):
        cfg = SamplerConfig(min_positive=0, patch_w=20, patch_h=20)
        mask = disc_mask((100, 100), 5, 50, 15)
        with pytest.warns(SamplerWarning, match="single centered"):
            specs = sample_disc_patches(mask, cfg, 10, rng)
        assert len(specs) == 1 and specs[0].kind == "fallback"
        assert specs[0].in_bounds(100, 100)
        assert specs[0].y == 40

    def test_empty_mask_rejected(self, small_cfg, rng):
        with pytest.raises(ValueError):
            sample_disc_patches(np.zeros((80, 80)), small_cfg, 4, rng)

    def test_reproducible(self, small_cfg):
        mask = disc_mask((120, 150), 60, 70, 6)
        a = sample_disc_patches(mask, small_cfg, 12, np.random.default_rng(5))
        b = sample_disc_patches(mask, small_cfg, 12, np.random.default_rng(5))
        assert a == b

    def test_feasible_set_matches_brute_force(self, rng):
        cfg = SamplerConfig(min_positive=0, patch_w=15, patch_h=11)
        for _ in range(20):
            mask = random_blob_mask(rng, size=40, blobs=2, max_r=4)
            if not mask.any():
                continue
            ranges = feasible_offsets(mask_stats(mask), mask.shape, cfg)
            brute = feasible_origins(mask, 15, 11)
            if ranges is None:
                assert not brute
            else:
                (xlo, xhi), (ylo, yhi) = ranges
                assert brute == {(x, y) for x in range(xlo, xhi + 1) for y in range(ylo, yhi + 1)}

    def test_coverage_of_feasible_offsets(self, rng):
        cfg = SamplerConfig(min_positive=0, patch_w=100, patch_h=100)
        mask = disc_mask((256, 256), 128, 128, 10)
        brute = np.array(sorted(feasible_origins(mask, 100, 100)))
        lo, hi = brute.min(axis=0), brute.max(axis=0)
        edges = [np.linspace(lo[k], hi[k] + 1, 9) for k in range(2)]
        feasible_cells, _, _ = np.histogram2d(brute[:, 0], brute[:, 1], bins=edges)
        draws = np.array([(s.x, s.y) for _ in range(1000) for s in sample_disc_patches(mask, cfg, 1, rng)])
        hit, _, _ = np.histogram2d(draws[:, 0], draws[:, 1], bins=edges)
        covered = np.count_nonzero((hit > 0) & (feasible_cells > 0)) / np.count_nonzero(feasible_cells)
        assert covered >= 0.9


class TestUniformAndCorners:
    def test_uniform_in_bounds(self, small_cfg, rng):
        specs = sample_uniform_patches((70, 90), small_cfg, 200, rng)
        assert all(s.in_bounds(70, 90) and s.kind == "uniform" for s in specs)

    def test_corner_positions(self):
        cfg = SamplerConfig()
        assert [(s.x, s.y) for s in corner_patches((1000, 1000), cfg)] == [(0, 0), (612, 0), (0, 612), (612, 612)]

    def test_patch_sized_image_dedups(self):
        assert len(corner_patches((388, 388), SamplerConfig())) == 1

    def test_small_image_rejected(self):
        with pytest.raises(GeometryError):
            corner_patches((300, 500), SamplerConfig())

    @settings(max_examples=50, deadline=None)
    @given(st.integers(388, 2000), st.integers(388, 2000))
    def test_corners_in_bounds(self, h, w):
        for s in corner_patches((h, w), SamplerConfig()):
            assert s.in_bounds(h, w)

    def test_training_patches_appends_corners(self, small_cfg, rng):
        mask = disc_mask((120, 120), 60, 60, 5)
        specs = training_patches(mask, small_cfg, rng)
        assert [s.kind for s in specs] == ["disc"] * 5 + ["corner"] * 4

    def test_uniform_mode_same_budget(self, small_cfg, rng):
        mask = disc_mask((120, 120), 60, 60, 5)
        specs = training_patches(mask, small_cfg, rng, mode="uniform")
        assert [s.kind for s in specs] == ["uniform"] * 5 + ["corner"] * 4

    def test_corners_can_be_disabled(self, rng):
        cfg = SamplerConfig(min_positive=0, patch_w=40, patch_h=40, include_corners=False)
        assert all(s.kind == "disc" for s in training_patches(disc_mask((120, 120), 60, 60, 5), cfg, rng))

    def test_unknown_mode(self, small_cfg, rng):
        with pytest.raises(ValueError):
            training_patches(disc_mask((120, 120), 60, 60, 5), small_cfg, rng, mode="grid")


class TestTiling:
    def test_exact_fit(self):
        tiles = tiling((776, 776), 388)
        assert len(tiles) == 4
        assert {(t.x, t.y) for t in tiles} == {(0, 0), (388, 0), (0, 388), (388, 388)}

    def test_flush_last_tile(self):
        tiles = tiling((800, 800), 388)
        assert len(tiles) == 9
        assert sorted({t.x for t in tiles}) == [0, 388, 412]

    def test_small_image_single_clamped_tile(self):
        assert tiling((50, 60), 100) == [PatchSpec(0, 0, 60, 50, 0, "tile")]

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 90), st.integers(1, 90), st.integers(1, 40), st.integers(1, 40))
    def test_covers_every_pixel(self, h, w, ph, pw):
        seen = np.zeros((h, w), int)
        for t in tiling((h, w), (pw, ph)):
            assert t.in_bounds(h, w)
            seen[t.y:t.y + t.h, t.x:t.x + t.w] += 1
        assert seen.min() >= 1


class TestExtraction:
    def test_reflection_definition(self):
        row = np.array([[[1, 2, 3]]])
        out = extract(row, PatchSpec(2, 0, 1, 1, margin=0))
        assert out.ravel().tolist() == [3]
        idx = reflect_index(np.arange(-2, 3), 3)
        assert row[0, 0, idx].tolist() == [3, 2, 1, 2, 3]

    def test_edge_mapping(self):
        assert reflect_index(-1, 10) == 1
        assert reflect_index(10, 10) == 8

    @settings(max_examples=200, deadline=None)
    @given(st.integers(-500, 500), st.integers(1, 12))
    def test_reflect_matches_scalar_oracle(self, i, n):
        assert int(reflect_index(i, n)) == reflect_scalar(i, n)

    def test_interior_is_plain_crop(self, rng):
        image = rng.random((3, 30, 30))
        spec = PatchSpec(10, 8, 6, 5, margin=4)
        np.testing.assert_array_equal(extract(image, spec), image[:, 4:17, 6:20])

    def test_corner_of_tiny_image_with_large_margin(self, rng):
        image = rng.random((3, 10, 10))
        spec = PatchSpec(0, 0, 10, 10, margin=92)
        out = extract(image, spec)
        assert out.shape == (3, 194, 194)
        assert set(np.unique(out)) <= set(np.unique(image))
        for r in range(0, 194, 7):
            for c in range(0, 194, 11):
                ri, ci = reflect_scalar(r - 92, 10), reflect_scalar(c - 92, 10)
                np.testing.assert_array_equal(out[:, r, c], image[:, ri, ci])

    def test_extract_mask_is_output_rect(self):
        mask = np.arange(100).reshape(10, 10)
        np.testing.assert_array_equal(extract_mask(mask, PatchSpec(2, 3, 4, 2, margin=5)), mask[3:5, 2:6])


class TestInvariants:
    def test_ten_thousand_draws(self):
        """Every disc patch holds the whole bbox, stays in bounds and meets the floor."""
        cfg = SamplerConfig(ratio=0.5, min_positive=30, patch_w=48, patch_h=40, margin=8)
        rng = np.random.default_rng(99)
        draws = 0
        while draws < 10_000:
            mask = random_blob_mask(rng, size=96, blobs=2, max_r=9)
            stats = mask_stats(mask)
            if stats.positive_count < cfg.min_positive or feasible_offsets(stats, mask.shape, cfg) is None:
                continue
            for spec in sample_disc_patches(mask, cfg, 40, rng):
                assert spec.contains(stats.bbox)
                assert spec.in_bounds(*mask.shape)
                assert extract_mask(mask, spec).sum() >= cfg.min_positive
                draws += 1

    def test_no_warning_on_regular_disc(self, small_cfg, rng):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            sample_disc_patches(disc_mask((150, 150), 70, 80, 6), small_cfg, 9, rng)
