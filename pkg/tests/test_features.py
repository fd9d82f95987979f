import itertools

import numpy as np
import pytest
from scipy.fft import dct

from tchash.errors import DimensionMismatch
from tchash.features import (
    ANALYSIS_RATE,
    DESCRIPTOR_DIM,
    HIST_BINS,
    LOG_FLOOR,
    N_MELS,
    FrameDescriptor,
    MeanShift,
    ScenePartition,
    assign_clip_clusters,
    audio_features,
    detect_scene_cuts,
    fft_size,
    frame_descriptor,
    hz_to_mel,
    meanshift,
    mel_energies,
    mel_filterbank,
    mel_to_hz,
    mfcc,
    modal_cluster,
    partition_clip,
    sad,
)
from tchash.media import sample_keyframes, scene_boundaries, synth_clip

HIST = slice(64, 64 + 3 * HIST_BINS)


def channel_hist(desc, k):
    start = 64 + k * HIST_BINS
    return desc[start:start + HIST_BINS]


class TestFrameDescriptor:
    def test_black(self):
        d = frame_descriptor(np.zeros((48, 48, 3), np.uint8))
        assert d.shape == (DESCRIPTOR_DIM,) == (160,)
        assert np.all(d[:64] == 0.0)
        for k in range(3):
            h = channel_hist(d, k)
            assert h[0] == 1.0 and h[1:].sum() == 0.0

    def test_white(self):
        d = frame_descriptor(np.full((48, 48, 3), 255, np.uint8))
        np.testing.assert_allclose(d[:64], 1.0, atol=1e-12)
        for k in range(3):
            assert channel_hist(d, k)[31] == pytest.approx(1.0)

    def test_checkerboard_against_pixel_count(self):
        yy, xx = np.mgrid[:64, :64]
        frame = np.repeat((((yy + xx) % 2) * 255).astype(np.uint8)[..., None], 3, axis=2)
        d = frame_descriptor(frame)
        # oracle: count white pixels per 8x8 cell directly
        white = frame[..., 0] == 255
        cells = np.array([[white[i * 8:(i + 1) * 8, j * 8:(j + 1) * 8].mean() for j in range(8)] for i in range(8)])
        np.testing.assert_allclose(d[:64], cells.ravel(), atol=1e-9)
        np.testing.assert_allclose(d[:64], 0.5, atol=1e-9)
        frac_white = white.mean()
        for k in range(3):
            h = channel_hist(d, k)
            assert h[0] == pytest.approx(1 - frac_white) and h[31] == pytest.approx(frac_white)

    def test_histogram_sums_to_three(self, rng):
        frames = rng.integers(0, 256, size=(5, 37, 23, 3), dtype=np.uint8)
        d = FrameDescriptor().fit_transform(frames)
        np.testing.assert_allclose(d[:, HIST].sum(axis=1), 3.0, atol=1e-6)
        assert np.all(np.isfinite(d))

    @pytest.mark.parametrize("factor", [2, 3])
    def test_upsampling_invariance(self, rng, factor):
        frame = rng.integers(0, 256, size=(24, 40, 3), dtype=np.uint8)
        big = frame.repeat(factor, axis=0).repeat(factor, axis=1)
        np.testing.assert_allclose(frame_descriptor(big), frame_descriptor(frame), atol=1e-6)

    def test_grayscale(self):
        d = frame_descriptor(np.full((16, 16, 1), 255, np.uint8))
        np.testing.assert_allclose(d[HIST].sum(), 3.0)


def naive_mel_energies(window, sample_rate):
    n = len(window)
    n_fft = fft_size(n)
    hann = np.array([0.5 - 0.5 * np.cos(2 * np.pi * i / n) for i in range(n)])
    x = np.zeros(n_fft)
    x[:n] = window * hann
    mags = []
    for k in range(n_fft // 2 + 1):
        re = sum(x[i] * np.cos(2 * np.pi * k * i / n_fft) for i in range(n_fft))
        im = sum(-x[i] * np.sin(2 * np.pi * k * i / n_fft) for i in range(n_fft))
        mags.append(np.hypot(re, im))
    edges = [700.0 * (10 ** (m / 2595.0) - 1) for m in
             np.linspace(0, 2595.0 * np.log10(1 + sample_rate / 2 / 700.0), N_MELS + 2)]
    out = []
    for j in range(N_MELS):
        lo, mid, hi = edges[j], edges[j + 1], edges[j + 2]
        total = 0.0
        for k, mag in enumerate(mags):
            f = k * sample_rate / n_fft
            if lo < f < mid:
                total += mag * (f - lo) / (mid - lo)
            elif mid <= f < hi:
                total += mag * (hi - f) / (hi - mid)
        out.append(total)
    return np.array(out)


class TestMfcc:
    def test_zero_window_is_dct_of_constant(self):
        c = mfcc(np.zeros(200), ANALYSIS_RATE)
        assert c.shape == (13,)
        assert c[0] == pytest.approx(np.sqrt(N_MELS) * np.log(LOG_FLOOR))
        np.testing.assert_allclose(c[1:], 0.0, atol=1e-9)
        np.testing.assert_allclose(c, dct(np.full(N_MELS, np.log(LOG_FLOOR)), norm="ortho")[:13])

    def test_deterministic(self, rng):
        w = rng.normal(size=200)
        assert np.array_equal(mfcc(w, ANALYSIS_RATE), mfcc(w.copy(), ANALYSIS_RATE))

    def test_window_length_checked(self):
        with pytest.raises(DimensionMismatch):
            mfcc(np.zeros(199), ANALYSIS_RATE)

    def test_mel_scale_inverse(self):
        f = np.array([0.0, 100.0, 1000.0, 3999.0])
        np.testing.assert_allclose(mel_to_hz(hz_to_mel(f)), f, atol=1e-9)

    @pytest.mark.parametrize("j", [8, 14, 20])
    def test_sinusoid_peaks_at_its_filter(self, j):
        edges = mel_to_hz(np.linspace(0, hz_to_mel(ANALYSIS_RATE / 2), N_MELS + 2))
        t = np.arange(200) / ANALYSIS_RATE
        window = np.sin(2 * np.pi * edges[j + 1] * t)
        energies = mel_energies(window, ANALYSIS_RATE)
        np.testing.assert_allclose(energies, naive_mel_energies(window, ANALYSIS_RATE), rtol=1e-9, atol=1e-9)
        assert int(np.argmax(energies)) == j

    def test_filterbank_spans_to_nyquist(self):
        fb = mel_filterbank(ANALYSIS_RATE, 256)
        assert fb.shape == (N_MELS, 129)
        assert fb[:, 0].max() == 0.0
        assert fb[-1].max() == pytest.approx(1.0, abs=0.2)

    def test_audio_rows_align_with_keyframes(self):
        rows = audio_features(np.zeros(8000 * 3, np.int16), 8000, 30)
        assert rows.shape == (30, 13)


def naive_sad(a, b):
    total = 0
    for idx in itertools.product(*(range(s) for s in a.shape)):
        total += abs(int(a[idx]) - int(b[idx]))
    return total / a.size


class TestSad:
    def test_identical(self, rng):
        f = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
        assert sad(f, f) == 0.0

    def test_plus_one(self):
        a = np.full((4, 4, 3), 7, np.uint8)
        assert sad(a, a + 1) == 1.0

    def test_brute_force(self, rng):
        a, b = rng.integers(0, 256, (2, 6, 5, 3), dtype=np.uint8)
        assert sad(a, b) == pytest.approx(naive_sad(a, b), abs=1e-12)

    def test_metric_properties(self, rng):
        for _ in range(20):
            a, b, c = rng.integers(0, 256, (3, 5, 5, 1), dtype=np.uint8)
            assert sad(a, b) == sad(b, a)
            assert sad(a, c) <= sad(a, b) + sad(b, c) + 1e-12
            assert (sad(a, b) == 0) == np.array_equal(a, b)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            sad(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


class TestSceneCuts:
    def test_constant_video(self):
        assert detect_scene_cuts(np.full((20, 8, 8, 3), 77, np.uint8)) == []

    def test_synthetic_boundaries(self):
        clip = synth_clip(3, 90, 7)
        assert detect_scene_cuts(sample_keyframes(clip)) == scene_boundaries(clip.n_frames, 3)

    def test_infinite_threshold(self):
        clip = synth_clip(3, 30, 1)
        assert detect_scene_cuts(sample_keyframes(clip), np.inf) == []

    def test_monotone_in_threshold(self, rng):
        frames = rng.integers(0, 256, (40, 6, 6, 3), dtype=np.uint8)
        frames[::3] //= 4
        previous = None
        for theta in np.linspace(0, 120, 25):
            cuts = set(detect_scene_cuts(frames, theta))
            if previous is not None:
                assert cuts <= previous
            previous = cuts

    def test_rule_matches_sad(self, rng):
        frames = rng.integers(0, 256, (12, 4, 4, 3), dtype=np.uint8)
        expected = [i for i in range(1, 12) if sad(frames[i - 1], frames[i]) > 80]
        assert detect_scene_cuts(frames, 80) == expected


def oracle_meanshift(points, bw, tol=1e-4, max_iter=300):
    modes = []
    for x in points:
        for _ in range(max_iter):
            nbrs = [p for p in points if np.sqrt(np.sum((p - x) ** 2)) <= bw]
            new = np.mean(nbrs, axis=0)
            moved = np.sqrt(np.sum((new - x) ** 2))
            x = new
            if moved < tol:
                break
        modes.append(x)
    merged = []
    for m in modes:
        if all(np.linalg.norm(m - k) >= bw / 2 for k in merged):
            merged.append(m)
    return merged


class TestMeanShift:
    def test_identical_points(self):
        pts = np.tile([1.5, -2.0, 3.0], (9, 1))
        modes = meanshift(pts, 1.0)
        np.testing.assert_allclose(modes, [[1.5, -2.0, 3.0]])

    def test_single_point(self):
        np.testing.assert_allclose(meanshift(np.array([[4.0, 2.0]]), 0.5), [[4.0, 2.0]])

    def test_two_groups(self, rng):
        bw = 1.0
        a = rng.normal(0, 0.05, (15, 3))
        b = rng.normal(0, 0.05, (12, 3)) + np.array([10 * bw, 0, 0])
        pts = np.vstack([a, b])
        modes = sorted(meanshift(pts, bw).tolist())
        oracle = sorted(m.tolist() for m in oracle_meanshift(pts, bw))
        assert len(modes) == len(oracle) == 2
        np.testing.assert_allclose(modes, oracle, atol=1e-6)
        np.testing.assert_allclose(modes[0], a.mean(axis=0), atol=1e-9)
        np.testing.assert_allclose(modes[1], b.mean(axis=0), atol=1e-9)

    def test_order_invariance(self, rng):
        pts = np.vstack([rng.normal(c, 0.4, (10, 2)) for c in (0, 3, 6)])
        k = len(meanshift(pts, 1.0))
        for _ in range(5):
            perm = rng.permutation(len(pts))
            assert len(meanshift(pts[perm], 1.0)) == k

    def test_default_bandwidth_is_median_distance(self, rng):
        pts = rng.normal(size=(20, 3))
        d = [np.linalg.norm(p - q) for p, q in itertools.combinations(pts, 2)]
        assert MeanShift().fit(pts).bandwidth_ == pytest.approx(np.median(d))


class TestClusterAssignment:
    def test_single_cluster(self):
        assert modal_cluster([2, 2, 2]) == 2

    def test_majority(self):
        assert modal_cluster([1] * 60 + [0] * 40) == 1

    def test_tie_goes_to_lower_id(self):
        assert modal_cluster([3] * 50 + [1] * 50) == 1

    def test_assign(self):
        part = ScenePartition.from_cuts([5], 10)
        assert assign_clip_clusters(part, [[0, 0, 1], [1, 1, 0, 0]]) == [0, 0]
        assert part.n_clusters == 1

    def test_partition_tiles_keyframes(self):
        clip = synth_clip(3, 60, 11)
        kf = sample_keyframes(clip)
        from tchash.features import frame_descriptors
        part = partition_clip(kf, frame_descriptors(kf))
        assert part.clips[0][0] == 0 and part.clips[-1][1] == len(kf)
        assert all(a[1] == b[0] for a, b in zip(part.clips, part.clips[1:]))
        assert len(part.cluster_of_clip) == len(part.clips) == 3
        assert part.cluster_of_clip[0] == 0
