from fractions import Fraction

import numpy as np
import pytest
from conftest import paper_has

from tchash.errors import (
    BadMagic,
    TruncatedPayload,
    UnsupportedVersion,
    WindowOutOfRange,
)
from tchash.features import detect_scene_cuts
from tchash.media import (
    DegradeParams,
    MediaClip,
    TamperKind,
    TamperSpec,
    apply_tamper,
    degrade,
    keyframe_indices,
    read_media,
    sample_keyframes,
    scene_boundaries,
    synth_clip,
    write_media,
)


def blank_clip(seconds, fps, h=4, w=4, c=3, rate=8000, value=0):
    n = round(seconds * Fraction(fps))
    frames = np.full((n, h, w, c), value, dtype=np.uint8)
    frames[:, 0, 0, 0] = np.arange(n) % 256  # make frames distinguishable
    return MediaClip(frames, Fraction(fps), np.zeros(round(seconds * rate), np.int16), rate)


class TestContainer:
    def test_roundtrip(self):
        clip = synth_clip(2, 3, seed=1)
        data = write_media(clip)
        assert read_media(data) == clip
        assert write_media(read_media(data)) == data

    def test_roundtrip_grayscale_and_fractional_rate(self, rng):
        frames = rng.integers(0, 256, size=(7, 5, 3, 1), dtype=np.uint8)
        clip = MediaClip(frames, Fraction(30000, 1001), rng.integers(-3000, 3000, 1234), 44100)
        assert read_media(write_media(clip)) == clip

    def test_bad_magic(self):
        data = b"XXXX" + write_media(synth_clip(1, 1, 0))[4:]
        with pytest.raises(BadMagic):
            read_media(data)

    def test_truncated_frames(self):
        clip = blank_clip(1, 10)
        data = write_media(clip)
        frame_bytes = 4 * 4 * 3
        # drop one frame and the audio; header still declares 10 frames
        with pytest.raises(TruncatedPayload):
            read_media(data[:31 + 9 * frame_bytes])

    def test_unsupported_version(self):
        data = bytearray(write_media(blank_clip(1, 10)))
        data[4] = 2
        with pytest.raises(UnsupportedVersion):
            read_media(bytes(data))

    def test_header_layout_little_endian(self):
        clip = blank_clip(1, 10, h=2, w=3, c=1)
        data = write_media(clip)
        assert data[:4] == b"ARCV"
        assert int.from_bytes(data[6:8], "little") == 2
        assert int.from_bytes(data[8:10], "little") == 3
        assert data[10] == 1
        assert len(data) == 31 + 10 * 6 + 2 * 8000


class TestSynth:
    def test_deterministic(self):
        assert synth_clip(1, 60, 7) == synth_clip(1, 60, 7)

    def test_seed_changes_content(self):
        a, b = synth_clip(1, 60, 7), synth_clip(1, 60, 8)
        assert not np.array_equal(a.frames, b.frames)

    def test_defaults(self):
        clip = synth_clip(1, 5, 0)
        assert clip.frames.shape == (50, 64, 64, 3)
        assert clip.frame_rate == 10 and clip.sample_rate == 8000
        clip.check_alignment()

    def test_three_scenes_two_cuts_at_boundaries(self):
        clip = synth_clip(3, 90, 7)
        cuts = detect_scene_cuts(sample_keyframes(clip))
        assert cuts == scene_boundaries(clip.n_frames, 3)
        assert len(cuts) == 2

    def test_static_preset(self):
        clip = synth_clip(2, 4, 3, preset="static")
        first, last = scene_boundaries(clip.n_frames, 2)[0] - 1, 0
        assert np.array_equal(clip.frames[first], clip.frames[last])


class TestDegrade:
    def test_identity(self):
        clip = synth_clip(2, 6, 3)
        assert degrade(clip, DegradeParams(), seed=5) == clip
        same = DegradeParams(1, 0, 0.0, clip.frame_rate, 16, clip.sample_rate)
        assert degrade(clip, same) == clip

    def test_requantize_arithmetic(self):
        clip = blank_clip(1, 10, value=100)
        clip.frames[:] = 100
        out = degrade(clip, DegradeParams(visual_quant_step=64))
        assert np.all(out.frames == (100 // 64) * 64 + 32)
        assert np.all(out.frames == 96)

    def test_half_frame_rate(self):
        clip = blank_clip(60, 10)
        out = degrade(clip, DegradeParams(target_fps=Fraction(5)))
        assert out.n_frames == 300
        assert np.array_equal(out.frames, clip.frames[::2])

    def test_duration_preserved(self):
        clip = synth_clip(1, 12, 4)
        out = degrade(clip, DegradeParams(4, 1, 2.0, Fraction(24), 12, 22050), seed=1)
        assert abs(out.duration - clip.duration) <= 1 / 10
        out.check_alignment()

    def test_bit_crush(self):
        clip = synth_clip(1, 1, 0)
        out = degrade(clip, DegradeParams(audio_bits=8))
        assert np.all(out.audio.astype(np.int32) % 256 == 0)

    def test_seeded_noise_is_deterministic(self):
        clip = synth_clip(1, 2, 0)
        p = DegradeParams(noise_sigma=3.0)
        assert degrade(clip, p, seed=9) == degrade(clip, p, seed=9)
        assert degrade(clip, p, seed=9) != degrade(clip, p, seed=10)

    def test_rejects_bad_params(self):
        with pytest.raises(ValueError):
            DegradeParams(visual_quant_step=0)
        with pytest.raises(ValueError):
            DegradeParams(audio_bits=3)


class TestTamper:
    def test_temporal_cut_frame_count(self):
        clip = blank_clip(60, 10)
        out = apply_tamper(clip, TamperSpec(TamperKind.TEMPORAL_CUT, 10, 5))
        assert out.n_frames == 550
        assert out.audio.size == clip.audio.size - 5 * 8000
        assert np.array_equal(out.frames[100], clip.frames[150])

    def test_temporal_cut_keyframe_reduction(self):
        clip = blank_clip(30, 25)
        out = apply_tamper(clip, TamperSpec(TamperKind.TEMPORAL_CUT, 3, 2.4))
        assert len(sample_keyframes(clip)) - len(sample_keyframes(out)) == 24

    def test_spatial_noise_keeps_counts_and_audio(self):
        clip = synth_clip(1, 20, 2)
        out = apply_tamper(clip, TamperSpec(TamperKind.SPATIAL_NOISE, 4, 3))
        assert out.n_frames == clip.n_frames
        assert np.array_equal(out.audio, clip.audio)
        assert np.array_equal(out.frames[:40], clip.frames[:40])
        assert not np.array_equal(out.frames[40:70], clip.frames[40:70])
        assert np.array_equal(out.frames[70:], clip.frames[70:])

    def test_audio_noise_keeps_frames(self):
        clip = synth_clip(1, 20, 2)
        out = apply_tamper(clip, TamperSpec(TamperKind.AUDIO_NOISE, 4, 3))
        assert np.array_equal(out.frames, clip.frames)
        assert np.array_equal(out.audio[:32000], clip.audio[:32000])
        assert np.array_equal(out.audio[56000:], clip.audio[56000:])

    def test_window_out_of_range(self):
        with pytest.raises(WindowOutOfRange):
            apply_tamper(blank_clip(10, 10), TamperSpec(TamperKind.TEMPORAL_CUT, 8, 5))

    def test_duration_bounds(self):
        assert paper_has(r"chunk of 1-10 seconds")
        with pytest.raises(ValueError):
            TamperSpec(TamperKind.TEMPORAL_CUT, 0, 0.5)
        with pytest.raises(ValueError):
            TamperSpec(TamperKind.TEMPORAL_CUT, 0, 10.5)
        TamperSpec(TamperKind.TEMPORAL_CUT, 0, 1)
        TamperSpec(TamperKind.TEMPORAL_CUT, 0, 10)


class TestKeyframes:
    def test_rate_from_paper(self):
        assert paper_has(r"keyframes at 10 frames per second")

    def test_25fps(self):
        assert len(sample_keyframes(blank_clip(60, 25))) == 600

    def test_10fps_identity(self):
        clip = blank_clip(60, 10)
        assert np.array_equal(sample_keyframes(clip), clip.frames)

    def test_48fps_index_map(self):
        clip = blank_clip(30, 48)
        idx = keyframe_indices(clip)
        assert len(idx) == 300
        expected = [min(int(Fraction(i * 48, 10) + Fraction(1, 2)), clip.n_frames - 1) for i in range(300)]
        assert idx.tolist() == expected

    def test_length_is_ceiling(self):
        clip = blank_clip(Fraction(61, 25), 25)  # 2.44 s
        assert len(sample_keyframes(clip)) == 25
