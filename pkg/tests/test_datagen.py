import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dybm.core import BinarySequence, ConfigError, ShapeError
from dybm.datagen import (
    FRAMES_MAGIC,
    FrameFormatError,
    FrameSequence,
    MarkovSpec,
    VideoSpec,
    _glyphs,
    _render,
    binarize_frame,
    bouncing_sprites_generate,
    downsample_frame,
    export_frames,
    frames_from_array,
    ingest_frames,
    markov_dataset,
    markov_entropy_rate,
    markov_generate,
    markov_true_nll,
    parse_frames,
    preprocess_video,
    reflect,
    sequence_to_frames,
    sprite_video_dataset,
    video_to_sequence,
    write_sequence_csv,
)


def fold(y, upper):
    """Closed-form position of a point bouncing in [0, upper]: unfold, then mirror."""
    y = math.fmod(y, 2 * upper)
    if y < 0:
        y += 2 * upper
    return 2 * upper - y if y > upper else y


class TestMarkov:
    def test_absorbing(self):
        seq = markov_generate(MarkovSpec(5, 1.0, 50, 3))
        assert (seq.values == seq.values[:, :1]).all()

    def test_deterministic(self):
        a = markov_generate(MarkovSpec(7, 0.95, 40, 11))
        b = markov_generate(MarkovSpec(7, 0.95, 40, 11))
        assert a == b

    def test_dataset_members_differ(self):
        data = markov_dataset(MarkovSpec(7, 0.95, 40, 1), 3)
        assert len(data) == 3 and not data[0] == data[1]

    @pytest.mark.slow
    def test_long_run_statistics(self):
        x = markov_generate(MarkovSpec(1, 0.95, 1_000_000, 5)).values[0]
        assert abs(x.mean() - 0.5) <= 0.01
        assert abs(np.mean(x[1:] != x[:-1]) - 0.05) <= 0.002

    @pytest.mark.slow
    def test_nll_converges_to_entropy_rate(self):
        spec = MarkovSpec(1, 0.95, 1_000_000, 8)
        seq = markov_generate(spec)
        per_step = (markov_true_nll(seq, spec) - math.log(2)) / (spec.length - 1)
        h = markov_entropy_rate(0.95)
        assert h == pytest.approx(-(0.95 * math.log(0.95) + 0.05 * math.log(0.05)))
        assert abs(per_step - h) <= 0.01 * h

    def test_true_nll_examples(self):
        spec = MarkovSpec(1, 0.95)
        # reference values are quoted to five decimals
        assert markov_true_nll(BinarySequence(np.array([[0, 0, 0]])), spec) == \
            pytest.approx(0.79574, abs=1e-5)
        assert markov_true_nll(BinarySequence(np.array([[0, 1]])), spec) == \
            pytest.approx(3.68888, abs=1e-5)

    def test_uniform_chain_nll(self, rng):
        seq = BinarySequence((rng.random((3, 9)) < 0.5).astype(np.uint8))
        assert markov_true_nll(seq, MarkovSpec(3, 0.5)) == pytest.approx(27 * math.log(2))

    @pytest.mark.parametrize("kw", [dict(p_stay=0.0), dict(p_stay=1.2), dict(n_dims=0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            MarkovSpec(**kw)


class TestFrames:
    def test_uniform_downsample(self):
        out = downsample_frame(np.full((16, 16), 255, np.uint8), 4)
        assert out.shape == (4, 4) and (out == 255).all()

    def test_block_mean_rounds_half_up(self):
        block = np.tile(np.array([[0, 0, 0, 255]], np.uint8), (4, 1))  # mean 63.75
        assert downsample_frame(block, 4)[0, 0] == 64
        half = np.array([[0, 255], [0, 255]], np.uint8)  # mean 127.5
        assert downsample_frame(half, 2)[0, 0] == 128

    def test_factor_one_identity(self, rng):
        f = rng.integers(0, 256, (6, 6), dtype=np.uint8)
        np.testing.assert_array_equal(downsample_frame(f, 1), f)

    def test_downsample_shape_error(self):
        with pytest.raises(ShapeError):
            downsample_frame(np.zeros((10, 10)), 4)

    def test_binarize(self):
        np.testing.assert_array_equal(binarize_frame(np.array([0, 127, 128, 255]), 127),
                                      [0, 0, 1, 1])
        assert not binarize_frame(np.zeros((3, 3)), 127).any()

    def test_pipeline_golden(self):
        # four 4x4 blocks: uniform 130, half 255 / half 0, uniform 127, and
        # ten pixels of 100 with six of 255 (mean 158)
        frame = np.zeros((8, 8), np.uint8)
        frame[:4, :4] = 130
        frame[:4, 4:6] = 255
        frame[4:, :4] = 127
        mixed = np.full(16, 100, np.uint8)
        mixed[:6] = 255
        frame[4:, 4:] = mixed.reshape(4, 4)
        out = preprocess_video(FrameSequence([frame]), 4, 127).frames[0]
        np.testing.assert_array_equal(out, [[1, 1], [0, 1]])
        # the reverse order loses the mixed block
        reverse = downsample_frame(binarize_frame(frame) * 255, 4)
        assert binarize_frame(reverse)[1, 1] == 0

    def test_row_major_flatten(self):
        seq = video_to_sequence([np.array([[1, 0], [0, 1]])])
        np.testing.assert_array_equal(seq.values[:, 0], [1, 0, 0, 1])

    def test_video_shape(self):
        frames = [np.zeros((16, 16), np.uint8)] * 20
        assert video_to_sequence(frames, 15).values.shape == (256, 15)

    def test_round_trip(self, rng):
        frames = [(rng.random((4, 5)) < 0.5).astype(np.uint8) for _ in range(6)]
        back = sequence_to_frames(video_to_sequence(frames), 4, 5)
        for a, b in zip(frames, back):
            np.testing.assert_array_equal(a, b)

    def test_inconsistent_sizes(self):
        with pytest.raises(ShapeError):
            video_to_sequence([np.zeros((2, 2)), np.zeros((3, 3))])
        with pytest.raises(ShapeError):
            FrameSequence([np.zeros((2, 2)), np.zeros((3, 3))])

    def test_sequence_csv(self, tmp_path):
        path = tmp_path / "s.csv"
        write_sequence_csv(path, BinarySequence(np.array([[1, 0, 1], [0, 0, 1]])))
        assert path.read_text() == "1,0,1\n0,0,1\n"


class TestSprites:
    def test_reflect_examples(self):
        assert reflect(0.0, -2.0, 10.0) == (2.0, 2.0)
        assert reflect(9.0, 3.0, 10.0) == (8.0, -3.0)
        assert reflect(4.0, 1.5, 10.0) == (5.5, 1.5)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0, 48), st.floats(-3, 3))
    def test_reflection_matches_unfolded_motion(self, pos, vel):
        upper = 48.0
        p, v = pos, vel
        for t in range(1, 60):
            p, v = reflect(p, v, upper)
            assert 0.0 <= p <= upper
            assert p == pytest.approx(fold(pos + t * vel, upper), abs=1e-9)

    def test_zero_velocity_static(self):
        video = bouncing_sprites_generate(VideoSpec(speed_range=(0.0, 0.0), rng_seed=3))
        assert all((f == video.frames[0]).all() for f in video.frames)

    def test_overlap_is_pixelwise_max(self):
        spec = VideoSpec(patch_size=32, n_frames=2, sprite_size=16)
        disk, ring, plus, square = _glyphs(16)
        frames = _render([[plus, 5.0, 7.0, 0.0, 0.0], [square, 5.0, 7.0, 0.0, 0.0]], spec, 16.0)
        want = np.zeros((32, 32), np.uint8)
        want[5:21, 7:23] = np.maximum(plus, square)
        np.testing.assert_array_equal(frames[0], want)

    @pytest.mark.parametrize("seed", range(5))
    def test_sprite_stays_inside(self, seed):
        spec = VideoSpec(n_frames=200, n_sprites=1, speed_range=(3.0, 3.0), rng_seed=seed)
        video = bouncing_sprites_generate(spec)
        # a sprite poking out of the patch would be clipped and lose area
        areas = {int((f > 0).sum()) for f in video.frames}
        assert len(areas) == 1

    def test_deterministic_dataset(self):
        spec = VideoSpec(patch_size=16, downsample=4, sprite_size=8, rng_seed=2, n_frames=5)
        a, b = sprite_video_dataset(spec, 3), sprite_video_dataset(spec, 3)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.array(), y.array())
        assert a[0].array().shape == (5, 4, 4)

    def test_oversized_sprite(self):
        with pytest.raises(ConfigError):
            VideoSpec(patch_size=8, sprite_size=16)


class TestRawFrames:
    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.bin"
        path.write_bytes(b"")
        with pytest.raises(FrameFormatError) as err:
            ingest_frames(path)
        assert err.value.offset == 0

    def test_round_trip(self, tmp_path, rng):
        videos = [rng.integers(0, 256, (5, 8, 8), dtype=np.uint8) for _ in range(3)]
        path = tmp_path / "v.bin"
        export_frames(path, videos)
        back = ingest_frames(path)
        assert len(back) == 3
        for v, b in zip(videos, back):
            np.testing.assert_array_equal(v, b.array())

    def test_fixture_64x64x19(self, tmp_path):
        pixels = (np.arange(19 * 64 * 64) % 251).astype(np.uint8)
        data = struct.pack("<8sIIII", FRAMES_MAGIC, 1, 19, 64, 64) + pixels.tobytes()
        path = tmp_path / "one.bin"
        path.write_bytes(data)
        videos = ingest_frames(path, VideoSpec(n_frames=19))
        assert len(videos) == 1 and len(videos[0].frames) == 19
        assert videos[0].frames[1][0, 0] == (64 * 64) % 251

    @pytest.mark.parametrize("mutate,offset", [
        (lambda d: b"NOTFRAME" + d[8:], 0),
        (lambda d: d[:-1], None),
        (lambda d: d + b"\0", None),
        (lambda d: d[:10], 10),
        (lambda d: d[:8] + struct.pack("<I", 0) + d[12:24], 8),
    ])
    def test_malformed(self, mutate, offset):
        good = struct.pack("<8sIIII", FRAMES_MAGIC, 1, 2, 2, 2) + bytes(8)
        with pytest.raises(FrameFormatError) as err:
            parse_frames(mutate(good))
        if offset is not None:
            assert err.value.offset == offset

    def test_spec_mismatch(self, tmp_path):
        path = tmp_path / "v.bin"
        export_frames(path, [np.zeros((20, 32, 32), np.uint8)])
        with pytest.raises(FrameFormatError):
            ingest_frames(path, VideoSpec())

    def test_from_array(self):
        arr = np.zeros((2, 3, 4, 4), np.uint8)
        videos = frames_from_array(arr)
        assert len(videos) == 2 and len(videos[0].frames) == 3
