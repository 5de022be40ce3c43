from __future__ import annotations

import struct
import zlib

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from dualstream import composite as comp
from dualstream.composite import ABSENT, HEADER_SIZE, NO_DIGEST, Quadrant, pack, parse, serialize, unpack
from dualstream.depthcodec import ENV_PROFILE, SELF_PROFILE
from dualstream.errors import BadMagicError, ChecksumError, LayoutError, TruncatedError, WireFormatError
from dualstream.frames import ColorFrame


def _frame(rng, w, h) -> ColorFrame:
    return ColorFrame(rng.integers(0, 256, (h, w, 3), dtype=np.uint8))


@pytest.fixture
def four(rng):
    return [_frame(rng, 8, 6), _frame(rng, 5, 4), _frame(rng, 7, 9), _frame(rng, 7, 9)]


def _pack(frames, ts=1000, seq=1):
    return pack(*frames, ts, seq, self_params=SELF_PROFILE, env_params=ENV_PROFILE)


class TestPack:
    def test_round_trip_four_distinct(self, four):
        up = unpack(_pack(four))
        for q, f in zip(Quadrant, four):
            assert up.frame(q) == f

    def test_layout_positions(self, four):
        f = _pack(four)
        cw, ch = f.cell
        assert (cw, ch) == (8, 9)
        assert f.payload.shape == (18, 16, 3)
        np.testing.assert_array_equal(f.payload[0:6, 0:8], four[0].pixels)     # TL self colour
        np.testing.assert_array_equal(f.payload[0:4, 8:13], four[1].pixels)    # TR self depth
        np.testing.assert_array_equal(f.payload[9:18, 0:7], four[2].pixels)    # BL env colour
        np.testing.assert_array_equal(f.payload[9:18, 8:15], four[3].pixels)   # BR env depth

    def test_padding_is_black(self, four):
        f = _pack(four)
        mask = np.ones(f.payload.shape[:2], bool)
        mask[0:6, 0:8] = mask[0:4, 8:13] = mask[9:18, 0:7] = mask[9:18, 8:15] = False
        assert (f.payload[mask] == 0).all()

    def test_env_colour_only(self, rng):
        env = _frame(rng, 6, 4)
        f = pack(None, None, env, None, 5, 7)
        assert [q.present for q in f.quadrants] == [False, False, True, False]
        assert f.quadrants[0] == f.quadrants[1] == f.quadrants[3] == ABSENT
        up = unpack(f)
        assert up.self_color is None and up.self_depth is None and up.env_depth is None
        assert up.env_color == env
        mask = np.ones(f.payload.shape[:2], bool)
        mask[4:8, 0:6] = False
        assert (f.payload[mask] == 0).all()

    def test_all_absent(self):
        with pytest.raises(LayoutError):
            pack(None, None, None, None, 0, 0)

    def test_oversize(self, rng):
        with pytest.raises(LayoutError):
            pack(_frame(rng, 9, 2), None, None, None, 0, 0, max_quadrant=(8, 8))

    def test_depth_digests_recorded(self, four):
        f = _pack(four)
        assert f.quadrants[Quadrant.SELF_DEPTH].params_digest == SELF_PROFILE.digest()
        assert f.quadrants[Quadrant.ENV_DEPTH].params_digest == ENV_PROFILE.digest()
        assert f.quadrants[Quadrant.SELF_COLOR].params_digest == NO_DIGEST

    def test_seq_increases(self, four):
        a, b = unpack(_pack(four, seq=10)), unpack(_pack(four, seq=11))
        assert b.seq > a.seq

    def test_metadata_fidelity(self, four):
        f = _pack(four, ts=123456789, seq=42)
        g = parse(serialize(f))
        up = unpack(g)
        assert (up.seq, up.timestamp_us) == (42, 123456789)
        for a, b in zip(f.quadrants, up.quadrants):
            assert (a.present, a.width, a.height, a.params_digest) == (b.present, b.width, b.height, b.params_digest)

    def test_shared_timestamp(self, four):
        up = unpack(_pack(four, ts=777))
        assert set(up.timestamps().values()) == {777}
        assert len(up.timestamps()) == 4


class TestWire:
    def test_round_trip(self, four):
        f = _pack(four)
        assert parse(serialize(f)) == f

    def test_layout_matches_documented_format(self, four):
        f = _pack(four, ts=9, seq=3)
        data = serialize(f)
        assert data[:4] == b"DSCF"
        assert struct.unpack_from("<HQQ", data, 4) == (1, 3, 9)
        off = 4 + 2 + 8 + 8
        recs = [struct.unpack_from("<BHH8s", data, off + 13 * i) for i in range(4)]
        assert recs[0] == (1, 8, 6, NO_DIGEST)
        assert recs[3] == (1, 7, 9, ENV_PROFILE.digest())
        (plen,) = struct.unpack_from("<I", data, off + 52)
        assert off + 56 == HEADER_SIZE
        assert plen == f.payload.size == len(data) - HEADER_SIZE - 4
        assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4])

    def test_flip_payload_byte(self, four):
        data = bytearray(serialize(_pack(four)))
        data[HEADER_SIZE + 10] ^= 0x01
        with pytest.raises(ChecksumError):
            parse(bytes(data))

    def test_flip_crc_byte(self, four):
        data = bytearray(serialize(_pack(four)))
        data[-1] ^= 0x80
        with pytest.raises(ChecksumError):
            parse(bytes(data))

    def test_empty(self):
        with pytest.raises(TruncatedError):
            parse(b"")

    def test_truncated_payload(self, four):
        data = serialize(_pack(four))
        with pytest.raises(TruncatedError):
            parse(data[:-10])

    def test_bad_magic(self, four):
        data = b"XSCF" + serialize(_pack(four))[4:]
        with pytest.raises(BadMagicError):
            parse(data)

    def test_trailing_bytes(self, four):
        with pytest.raises(LayoutError):
            parse(serialize(_pack(four)) + b"\0")

    def test_bad_version(self, four):
        data = bytearray(serialize(_pack(four)))
        data[4] = 2
        data[-4:] = struct.pack("<I", zlib.crc32(bytes(data[:-4])))
        with pytest.raises(WireFormatError):
            parse(bytes(data))

    def test_inconsistent_payload_length(self, four):
        data = bytearray(serialize(_pack(four)))
        # claim a wider self-colour quadrant without resizing the payload
        off = 4 + 2 + 8 + 8
        struct.pack_into("<H", data, off + 1, 30)
        data[-4:] = struct.pack("<I", zlib.crc32(bytes(data[:-4])))
        with pytest.raises(LayoutError):
            parse(bytes(data))

    def test_digest_on_colour_quadrant_rejected(self, four):
        data = bytearray(serialize(_pack(four)))
        off = 4 + 2 + 8 + 8
        data[off + 5] = 1
        data[-4:] = struct.pack("<I", zlib.crc32(bytes(data[:-4])))
        with pytest.raises(LayoutError):
            parse(bytes(data))

    @settings(max_examples=300, deadline=None)
    @given(st.binary(max_size=300))
    def test_fuzz_random_bytes(self, data):
        try:
            parse(data)
        except WireFormatError:
            pass

    @settings(max_examples=300, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
    @given(st.data())
    def test_fuzz_mutations(self, four, data):
        wire = bytearray(serialize(_pack(four)))
        for _ in range(data.draw(st.integers(1, 4))):
            i = data.draw(st.integers(0, len(wire) - 1))
            wire[i] = data.draw(st.integers(0, 255))
        cut = data.draw(st.integers(0, len(wire)))
        try:
            f = parse(bytes(wire[:cut]))
        except WireFormatError:
            return
        unpack(f)  # anything that parses must be structurally sound


class TestRandomizedRoundTrip:
    @settings(max_examples=100, deadline=None)
    @given(st.data())
    def test_random_layouts(self, data):
        rng = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1)))
        present = data.draw(st.lists(st.booleans(), min_size=4, max_size=4).filter(any))
        frames = [_frame(rng, int(rng.integers(1, 12)), int(rng.integers(1, 12))) if p else None for p in present]
        ts, seq = data.draw(st.integers(0, 2**64 - 1)), data.draw(st.integers(0, 2**64 - 1))
        f = pack(*frames, ts, seq, self_params=SELF_PROFILE, env_params=ENV_PROFILE)
        up = unpack(parse(serialize(f)))
        assert (up.seq, up.timestamp_us) == (seq, ts)
        for q, fr in zip(Quadrant, frames):
            assert up.frame(q) == fr if fr is not None else up.frame(q) is None


def test_unpack_returns_views(four):
    f = _pack(four)
    up = unpack(f)
    assert np.shares_memory(up.env_color.pixels, f.payload)
    assert not comp.unpack(f).env_color.pixels.flags.writeable
