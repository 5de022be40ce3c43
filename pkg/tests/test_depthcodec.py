from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from matplotlib import colormaps

from dualstream import depthcodec as codec
from dualstream.depthcodec import (
    ENV_PROFILE, SELF_PROFILE, ColorizationParams, Scheme, align_to_reference, build_lut, decode_bins,
    decode_depth, decode_depth_m, encode_depth, min_entry_distance, quantization_bound,
)
from dualstream.errors import CodecError, ConfigError, DuplicateEntryError, UncoverableAreaError
from dualstream.frames import ColorFrame, DepthFrame
from dualstream.geometry import Intrinsics, intrinsics_from_fov, unproject

GRAY2 = ColorizationParams(Scheme.LINEAR_GRAY, d_max=1.0, lut_bins=2)


def _mm_row(mm) -> DepthFrame:
    return DepthFrame(np.asarray(mm, dtype=np.uint16)[None, :])


class TestParams:
    def test_defaults(self):
        p = ColorizationParams()
        assert (p.scheme, p.lut_bins, p.invalid_color) == (Scheme.TURBO_HUE, 256, (0, 0, 0))

    @pytest.mark.parametrize("kw", [dict(d_max=0), dict(d_max=-1), dict(lut_bins=1), dict(invalid_color=(0, 0, 256))])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            ColorizationParams(**kw)

    def test_config_round_trip(self):
        p = ColorizationParams(Scheme.LINEAR_GRAY, 1.25, 64, (255, 0, 255))
        assert ColorizationParams.from_config(p.to_config()) == p

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            ColorizationParams.from_config({"dmax": "1"})

    def test_digest_distinguishes_profiles(self):
        assert SELF_PROFILE.digest() != ENV_PROFILE.digest()
        assert len(SELF_PROFILE.digest()) == 8
        assert codec.profile_for_digest(ENV_PROFILE.digest()) == ENV_PROFILE

    def test_unknown_digest(self):
        with pytest.raises(CodecError):
            codec.profile_for_digest(b"\x01" * 8)

    def test_scheme_aliases(self):
        assert Scheme.parse("Turbo") is Scheme.TURBO_HUE
        assert Scheme.parse("linear_gray") is Scheme.LINEAR_GRAY


class TestBuildLut:
    def test_linear_gray_two_bins(self):
        np.testing.assert_array_equal(build_lut(GRAY2).entries, [(0, 0, 0), (255, 255, 255)])

    def test_turbo_entry_zero_matches_reference(self):
        ref = np.rint(np.array(colormaps["turbo"](0.0)[:3]) * 255)
        np.testing.assert_array_equal(build_lut(ENV_PROFILE).entries[0], ref)

    def test_turbo_256_matches_reference_table(self):
        ref = np.rint(colormaps["turbo"](np.arange(256))[:, :3] * 255)
        np.testing.assert_array_equal(build_lut(ENV_PROFILE).entries, ref)

    def test_turbo_256_pairwise_distinct(self):
        e = build_lut(ENV_PROFILE).entries.astype(int)
        assert len({tuple(x) for x in e}) == 256
        for i, j in itertools.combinations(range(256), 2):
            assert (e[i] != e[j]).any()

    def test_duplicate_entries_rejected(self):
        with pytest.raises(DuplicateEntryError):
            build_lut(ColorizationParams(Scheme.LINEAR_GRAY, 1.0, lut_bins=300))

    def test_black_is_far_from_turbo(self):
        lut = build_lut(ENV_PROFILE)
        assert lut.usable.all()
        assert np.abs(lut.entries.astype(int)).sum(axis=1).min() >= codec.INVALID_SEPARATION

    def test_entries_near_invalid_colour_are_skipped(self):
        lut = build_lut(GRAY2)
        assert list(lut.usable) == [False, True]
        # depth that would land in the skipped bin is coded with its neighbour
        np.testing.assert_array_equal(encode_depth(_mm_row([100]), GRAY2).pixels[0, 0], [255, 255, 255])

    def test_min_entry_distance_turbo(self):
        assert min_entry_distance(ENV_PROFILE) == pytest.approx(2.0)


class TestQuantizationBound:
    def test_self(self):
        assert quantization_bound(SELF_PROFILE) == pytest.approx(0.8 / 510)
        assert quantization_bound(SELF_PROFILE) == pytest.approx(0.00157, abs=5e-6)

    def test_env(self):
        assert quantization_bound(ENV_PROFILE) == pytest.approx(0.00392, abs=5e-6)

    def test_two_bins(self):
        assert quantization_bound(ColorizationParams(d_max=1.0, lut_bins=2)) == 0.5


class TestEncode:
    def test_zero_depth_is_invalid_colour(self):
        c = encode_depth(DepthFrame(np.zeros((3, 4), np.uint16)), ENV_PROFILE)
        assert (c.pixels == 0).all()

    def test_custom_invalid_colour(self):
        p = ColorizationParams(d_max=2.0, invalid_color=(255, 255, 255))
        assert (encode_depth(DepthFrame(np.zeros((1, 2), np.uint16)), p).pixels == 255).all()

    def test_d_max_is_last_entry(self):
        c = encode_depth(DepthFrame(np.full((2, 2), 2000, np.uint16)), ENV_PROFILE)
        assert (c.pixels == build_lut(ENV_PROFILE).entries[-1]).all()

    def test_beyond_range_clamps(self):
        c = encode_depth(_mm_row([2000, 2500, 65535]), ENV_PROFILE)
        assert (c.pixels == build_lut(ENV_PROFILE).entries[-1]).all()

    def test_ramp_bins_follow_formula(self):
        mm = np.arange(1, 2001)
        bins = decode_bins(encode_depth(_mm_row(mm), ENV_PROFILE), ENV_PROFILE)[0]
        np.testing.assert_array_equal(bins, np.rint(mm / 2000 * 255).astype(int))
        assert (np.diff(bins) >= 0).all()
        assert bins[0] == 0 and bins[-1] == 255
        assert set(bins) == set(range(256))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 65535), st.integers(0, 65535))
    def test_monotone(self, a, b):
        lo, hi = sorted((a, b))
        bins = decode_bins(encode_depth(_mm_row([lo, hi]), SELF_PROFILE), SELF_PROFILE)[0]
        if lo > 0:
            assert bins[0] <= bins[1]

    def test_deterministic(self, rng):
        d = DepthFrame(rng.integers(0, 3000, (20, 30), dtype=np.uint16))
        assert encode_depth(d, ENV_PROFILE) == encode_depth(d, ENV_PROFILE)


class TestDecode:
    @pytest.mark.parametrize("params", [SELF_PROFILE, ENV_PROFILE], ids=["self", "env"])
    def test_exhaustive_round_trip_bound(self, params):
        mm = np.arange(1, int(round(params.d_max * 1000)) + 1)
        got = decode_depth_m(encode_depth(_mm_row(mm), params), params)[0]
        assert np.abs(got - mm / 1000).max() <= quantization_bound(params) + 1e-12

    def test_millimetre_frame_adds_rounding(self):
        mm = np.arange(1, 2001)
        got = decode_depth(encode_depth(_mm_row(mm), ENV_PROFILE), ENV_PROFILE).samples[0].astype(float)
        assert np.abs(got - mm).max() <= 1000 * quantization_bound(ENV_PROFILE) + 0.5

    def test_invalid_colour_decodes_to_zero(self):
        c = ColorFrame(np.zeros((2, 3, 3), np.uint8))
        assert (decode_depth(c, ENV_PROFILE).samples == 0).all()
        assert (decode_bins(c, ENV_PROFILE) == -1).all()

    def test_invalid_preserved_in_mixed_frame(self, rng):
        mm = rng.integers(0, 2000, (30, 40), dtype=np.uint16)
        mm[::3] = 0
        out = decode_depth_m(encode_depth(DepthFrame(mm), ENV_PROFILE), ENV_PROFILE)
        np.testing.assert_array_equal(out == 0, mm == 0)

    def test_plus_one_perturbation_stable_up_to_128_bins(self):
        for bins in (128, 64, 32):
            p = ColorizationParams(d_max=2.0, lut_bins=bins)
            clean = encode_depth(_mm_row(np.arange(0, 2001)), p)
            noisy = ColorFrame(np.minimum(clean.pixels.astype(int) + 1, 255).astype(np.uint8))
            np.testing.assert_array_equal(decode_bins(noisy, p), decode_bins(clean, p))

    def test_plus_one_perturbation_at_256_bins(self):
        # entries can sit 2 apart at 256 bins, so a +1 shift on all three
        # channels may move a colour closer to a neighbour (measured: 34 of 256)
        lut = build_lut(ENV_PROFILE)
        shifted = ColorFrame(np.minimum(lut.entries.astype(int) + 1, 255).astype(np.uint8)[None])
        moved = decode_bins(shifted, ENV_PROFILE)[0] != np.arange(256)
        assert moved.sum() == 34

    def test_decode_is_total(self):
        every = np.arange(1 << 24, dtype=np.int64)[::4099]
        rgb = np.stack([every >> 16, (every >> 8) & 255, every & 255], -1).astype(np.uint8)[None]
        bins = decode_bins(ColorFrame(rgb), ENV_PROFILE)
        assert ((bins >= -1) & (bins < 256)).all()

    def test_memo_matches_brute_force(self, rng):
        lut = build_lut(SELF_PROFILE)
        rgb = rng.integers(0, 256, (500, 3))
        first = lut.decode_slots(rgb.astype(np.uint8)[None])[0]
        again = lut.decode_slots(rgb.astype(np.uint8)[None])[0]
        cand = lut._cand_rgb
        d2 = ((rgb[:, None, :] - cand[None]) ** 2).sum(-1)
        np.testing.assert_array_equal(first, lut._cand_slot[d2.argmin(1)])
        np.testing.assert_array_equal(first, again)

    def test_gray_scheme_round_trip(self):
        p = ColorizationParams(Scheme.LINEAR_GRAY, d_max=1.0, lut_bins=256)
        mm = np.arange(100, 1001)
        got = decode_depth_m(encode_depth(_mm_row(mm), p), p)[0]
        assert np.abs(got - mm / 1000).max() <= quantization_bound(p) + 1e-12


class TestAlign:
    def test_same_intrinsics_is_copy(self, k_small, rng):
        d = DepthFrame(rng.integers(0, 2000, (48, 64), dtype=np.uint16))
        out = align_to_reference(d, k_small, k_small)
        assert out == d and out.samples is not d.samples

    def test_half_fov_is_central_crop_upscaled(self):
        src_k = Intrinsics(50.0, 50.0, 32.0, 24.0, 64, 48)
        dst_k = Intrinsics(100.0, 100.0, 32.0, 24.0, 64, 48)
        d = DepthFrame(np.arange(64 * 48, dtype=np.uint16).reshape(48, 64))
        out = align_to_reference(d, src_k, dst_k)
        # corner rays: destination pixel sees the source pixel on the same ray
        for u, v in [(0, 0), (63, 0), (0, 47), (63, 47), (32, 24)]:
            ray = unproject(u, v, 1.0, dst_k)
            su, sv = src_k.fx * ray[0] + src_k.cx, src_k.fy * ray[1] + src_k.cy
            assert out.samples[v, u] == d.samples[int(np.floor(sv + 0.5)), int(np.floor(su + 0.5))]
        # every output sample comes from the central half of the source
        crop = d.samples[12:37, 16:49]  # pixel centres round half up at the far edge
        assert set(np.unique(out.samples)) <= set(np.unique(crop))
        assert out.samples[0, 0] == crop[0, 0] and out.samples[-1, -1] == crop[-1, -1]

    def test_color_bilinear_constant(self):
        src_k = intrinsics_from_fov(80, 60, 40, 30)
        dst_k = intrinsics_from_fov(40, 30, 20, 16)
        out = align_to_reference(ColorFrame.filled(40, 30, (10, 20, 30)), src_k, dst_k)
        assert (out.pixels == (10, 20, 30)).all() and out.width == 20

    def test_idempotent_second_pass(self, rng):
        src_k = intrinsics_from_fov(80, 60, 64, 48)
        dst_k = intrinsics_from_fov(50, 35, 64, 48)
        d = DepthFrame(rng.integers(1, 2000, (48, 64), dtype=np.uint16))
        once = align_to_reference(d, src_k, dst_k)
        assert align_to_reference(once, dst_k, dst_k) == once

    def test_wider_destination_uncoverable(self, k_small):
        wider = intrinsics_from_fov(100, 60, 64, 48)
        with pytest.raises(UncoverableAreaError):
            align_to_reference(DepthFrame(np.zeros((48, 64), np.uint16)), k_small, wider)

    def test_size_mismatch(self, k_small):
        with pytest.raises(CodecError):
            align_to_reference(DepthFrame(np.zeros((4, 4), np.uint16)), k_small, k_small)
