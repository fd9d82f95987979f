"""Frame and audio descriptors, scene-cut detection and clip clustering.

Frame descriptor layout (``S = 160``)::

    [0:64]    8x8 area-averaged luma means, scaled to [0, 1]
    [64:160]  32-bin histogram per RGB channel, each L1-normalised

Histogram votes are split linearly between the two nearest bin centres, so
a small shift in pixel values moves a small amount of mass.

Grayscale frames are treated as three identical channels so the layout
does not depend on ``C``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import signal
from scipy.fft import dct, rfft
from scipy.spatial.distance import pdist
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import DimensionMismatch
from .media import KEYFRAME_RATE, MediaClip

GRID = 8
HIST_BINS = 32
DESCRIPTOR_DIM = GRID * GRID + 3 * HIST_BINS

ANALYSIS_RATE = 8000
WINDOW_S = 0.025
HOP_S = 0.010
N_MELS = 26
N_MFCC = 13
LOG_FLOOR = 1e-10

DEFAULT_CUT_THRESHOLD = 30.0
_LUMA = np.array([0.299, 0.587, 0.114])


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row i averages the input span [i*n_in/n_out, (i+1)*n_in/n_out)."""
    edges = np.arange(n_out + 1) * (n_in / n_out)
    lo = np.arange(n_in)[None, :]
    overlap = np.minimum(lo + 1, edges[1:, None]) - np.maximum(lo, edges[:-1, None])
    return np.clip(overlap, 0, None) / (n_in / n_out)


def _soft_bin_table() -> np.ndarray:
    # each 8-bit value splits linearly between the two nearest bin centres
    width = 256 // HIST_BINS
    x = np.clip(np.arange(256) / width - 0.5, 0.0, HIST_BINS - 1.0)
    lo = np.floor(x).astype(int)
    hi = np.minimum(lo + 1, HIST_BINS - 1)
    frac = x - lo
    table = np.zeros((256, HIST_BINS))
    np.add.at(table, (np.arange(256), lo), 1.0 - frac)
    np.add.at(table, (np.arange(256), hi), frac)
    return table


_SOFT_BINS = _soft_bin_table()


def frame_descriptors(frames: np.ndarray) -> np.ndarray:
    """Descriptors for a stack of frames ``(T, H, W, C)`` -> ``(T, 160)``."""
    frames = np.asarray(frames)
    if frames.ndim == 3:
        frames = frames[None]
    if frames.ndim != 4 or frames.shape[3] not in (1, 3):
        raise DimensionMismatch(f"expected (T, H, W, C) frames, got {frames.shape}")
    t, h, w, c = frames.shape
    if c == 1:
        luma = frames[..., 0].astype(np.float64)
        channels = [frames[..., 0]] * 3
    else:
        luma = frames.astype(np.float64) @ _LUMA
        channels = [frames[..., k] for k in range(3)]
    ay, ax = _area_weights(h, GRID), _area_weights(w, GRID)
    grid = np.einsum("ih,thw,jw->tij", ay, luma, ax, optimize=True).reshape(t, -1) / 255.0

    out = np.empty((t, DESCRIPTOR_DIM))
    out[:, : GRID * GRID] = grid
    offsets = (np.arange(t) * 256)[:, None]
    for k, ch in enumerate(channels):
        vals = ch.reshape(t, -1).astype(np.int64) + offsets
        counts = np.bincount(vals.ravel(), minlength=t * 256).reshape(t, 256)
        start = GRID * GRID + k * HIST_BINS
        out[:, start:start + HIST_BINS] = counts @ _SOFT_BINS / (h * w)
    return out


def frame_descriptor(frame: np.ndarray) -> np.ndarray:
    return frame_descriptors(np.asarray(frame)[None])[0]


# ------------------------------------------------------------------- audio

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=float) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=float) / 2595.0) - 1.0)


def fft_size(window_len: int) -> int:
    return 1 << max(0, int(window_len - 1).bit_length())


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int = N_MELS) -> np.ndarray:
    """Triangular filters evenly spaced on the mel scale from 0 Hz to Nyquist."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.clip(np.minimum(rising, falling), 0.0, None)


def _hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def mel_energies(windows: np.ndarray, sample_rate: int) -> np.ndarray:
    """Mel filter-bank outputs for windows of shape ``(..., L)``."""
    windows = np.asarray(windows, dtype=float)
    n = windows.shape[-1]
    n_fft = fft_size(n)
    spectrum = np.abs(rfft(windows * _hann(n), n=n_fft, axis=-1))
    return spectrum @ mel_filterbank(sample_rate, n_fft).T


def mfcc(audio_window: np.ndarray, sample_rate: int) -> np.ndarray:
    """13 MFCCs of one 25 ms window (or of a stack of windows along axis 0).

    Hann window, magnitude FFT, 26 mel filters, ``log(x + 1e-10)``,
    orthonormal DCT-II keeping coefficients 0..12.
    """
    audio_window = np.asarray(audio_window, dtype=float)
    expected = round(WINDOW_S * sample_rate)
    if audio_window.shape[-1] != expected:
        raise DimensionMismatch(f"window holds {audio_window.shape[-1]} samples, expected {expected}")
    logmel = np.log(mel_energies(audio_window, sample_rate) + LOG_FLOOR)
    return dct(logmel, type=2, norm="ortho", axis=-1)[..., :N_MFCC]


def resample_audio(x: np.ndarray, src: int, dst: int) -> np.ndarray:
    """Anti-aliased polyphase resampling, length ``round(len(x) * dst / src)``."""
    x = np.asarray(x, dtype=float)
    if src == dst or x.size == 0:
        return x
    r = Fraction(dst, src)
    out = signal.resample_poly(x, r.numerator, r.denominator)
    return out[: round(x.size * dst / src)]


def audio_features(audio: np.ndarray, sample_rate: int, n_rows: int, pool: int = 10) -> np.ndarray:
    """MFCC rows aligned with keyframes.

    Audio is resampled to 8 kHz, analysed with 25 ms windows every 10 ms and
    the ``pool`` hops belonging to each 100 ms keyframe period are averaged,
    giving ``(n_rows, 13)``.
    """
    x = np.asarray(audio, dtype=float) / 32768.0
    if sample_rate != ANALYSIS_RATE:
        x = resample_audio(x, sample_rate, ANALYSIS_RATE)
    win = round(WINDOW_S * ANALYSIS_RATE)
    hop = round(HOP_S * ANALYSIS_RATE)
    n_hops = n_rows * pool
    need = (n_hops - 1) * hop + win
    if x.size < need:
        x = np.concatenate([x, np.zeros(need - x.size)])
    windows = np.lib.stride_tricks.sliding_window_view(x[:need], win)[::hop][:n_hops]
    coeffs = mfcc(windows, ANALYSIS_RATE)
    return coeffs.reshape(n_rows, pool, N_MFCC).mean(axis=1)


def cepstral_mean_normalize(rows: np.ndarray, pad_row: np.ndarray | None = None):
    """Subtract the per-coefficient mean of ``rows``.

    A fixed linear filter on the audio (a codec's band limit, say) adds a
    constant to every cepstral row, so removing the mean cancels it. Returns
    the normalised rows and, if given, ``pad_row`` shifted by the same mean.
    """
    rows = np.asarray(rows, dtype=float)
    mean = rows.mean(axis=0) if len(rows) else np.zeros(rows.shape[-1])
    if pad_row is None:
        return rows - mean
    return rows - mean, np.asarray(pad_row, dtype=float) - mean


def silent_audio_row() -> np.ndarray:
    return audio_features(np.zeros(0), ANALYSIS_RATE, 1)[0]


def black_frame_row() -> np.ndarray:
    return frame_descriptor(np.zeros((GRID, GRID, 3), dtype=np.uint8))


class FrameDescriptor(TransformerMixin, BaseEstimator):
    """Stateless transformer mapping frames ``(T, H, W, C)`` to ``(T, 160)``."""

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return frame_descriptors(X)


class MfccFeatures(TransformerMixin, BaseEstimator):
    """Stateless transformer mapping a clip to keyframe-aligned MFCC rows.

    Parameters
    ----------
    pool : int, default=10
        Number of 10 ms hops averaged into one row.
    """

    def __init__(self, pool: int = 10):
        self.pool = pool

    def fit(self, X, y=None):
        return self

    def transform(self, X: MediaClip, n_rows: int | None = None):
        if n_rows is None:
            from .media import keyframe_count

            n_rows = keyframe_count(X, KEYFRAME_RATE)
        return audio_features(X.audio, X.sample_rate, n_rows, self.pool)


# --------------------------------------------------------------- scene cuts

def sad(frame_a: np.ndarray, frame_b: np.ndarray) -> float:
    """Mean absolute difference over all samples."""
    a, b = np.asarray(frame_a), np.asarray(frame_b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    return float(np.abs(a.astype(np.int32) - b.astype(np.int32)).mean())


def consecutive_sad(frames: np.ndarray) -> np.ndarray:
    f = np.asarray(frames)
    out = np.empty(max(0, f.shape[0] - 1))
    for i in range(0, out.size, 256):
        a = f[i:i + 257].astype(np.int16)
        out[i:i + a.shape[0] - 1] = np.abs(np.diff(a, axis=0)).mean(axis=tuple(range(1, a.ndim)))
    return out


def detect_scene_cuts(keyframes: np.ndarray, threshold: float = DEFAULT_CUT_THRESHOLD) -> list[int]:
    """Indices ``i`` where ``sad(f[i-1], f[i]) > threshold``."""
    if len(keyframes) < 2:
        return []
    diffs = consecutive_sad(keyframes)
    return [int(i) + 1 for i in np.flatnonzero(diffs > threshold)]


@dataclass
class ScenePartition:
    cut_indices: list[int]
    clips: list[tuple[int, int]]
    cluster_of_clip: list[int] = field(default_factory=list)

    @classmethod
    def from_cuts(cls, cuts, n_frames: int) -> ScenePartition:
        bounds = [0, *cuts, n_frames]
        return cls(list(cuts), [(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)])

    @property
    def n_clusters(self) -> int:
        return max(self.cluster_of_clip) + 1 if self.cluster_of_clip else 0


# --------------------------------------------------------------- mean shift

def _shift_to_mode(x, points, bandwidth, tol, max_iter):
    for _ in range(max_iter):
        near = points[np.linalg.norm(points - x, axis=1) <= bandwidth]
        new = near.mean(axis=0)
        if np.linalg.norm(new - x) < tol:
            return new
        x = new
    return x


class MeanShift(BaseEstimator):
    """Flat-kernel mean shift.

    Every point is shifted to the mean of its ``bandwidth`` neighbourhood until
    the move is below ``tol`` (or ``max_iter`` steps). Converged modes closer
    than ``bandwidth / 2`` are merged, keeping the mode with the most
    neighbours (ties to the lexicographically smallest), so the result does
    not depend on point order.

    Parameters
    ----------
    bandwidth : float or None
        Kernel radius. ``None`` uses the median pairwise distance.
    """

    def __init__(self, bandwidth: float | None = None, tol: float = 1e-4, max_iter: int = 300):
        self.bandwidth = bandwidth
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[0] == 0:
            raise ValueError("MeanShift needs at least one point")
        bw = self.bandwidth
        if bw is None:
            d = pdist(X)
            bw = float(np.median(d)) if d.size and np.median(d) > 0 else 1.0
        if bw <= 0:
            raise ValueError("bandwidth must be positive")
        self.bandwidth_ = bw
        modes = np.array([_shift_to_mode(x, X, bw, self.tol, self.max_iter) for x in X])
        support = np.array([(np.linalg.norm(X - m, axis=1) <= bw).sum() for m in modes])
        order = sorted(range(len(modes)), key=lambda i: (-support[i], *np.round(modes[i], 9)))
        kept: list[np.ndarray] = []
        for i in order:
            if all(np.linalg.norm(modes[i] - k) >= bw / 2 for k in kept):
                kept.append(modes[i])
        self.cluster_centers_ = np.array(kept)
        self.labels_ = self.predict(X)
        return self

    def predict(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        d = np.linalg.norm(X[:, None, :] - self.cluster_centers_[None], axis=2)
        return d.argmin(axis=1)

    def fit_predict(self, X, y=None):
        return self.fit(X).labels_


def meanshift(points, bandwidth: float | None = None) -> np.ndarray:
    return MeanShift(bandwidth).fit(points).cluster_centers_


def sample_clip_frames(start: int, end: int, max_samples: int = 100) -> np.ndarray:
    n = end - start
    if n <= max_samples:
        return np.arange(start, end)
    return np.unique(np.round(np.linspace(start, end - 1, max_samples)).astype(int))


def modal_cluster(labels) -> int:
    """Most frequent label; ties go to the lowest cluster id."""
    labels = np.asarray(labels, dtype=int)
    counts = np.bincount(labels)
    return int(np.argmax(counts))


def assign_clip_clusters(partition: ScenePartition, frame_labels) -> list[int]:
    """Cluster of each clip from the labels of its sampled frames.

    ``frame_labels`` holds one label array per clip, in clip order.
    """
    out = [modal_cluster(lbl) for lbl in frame_labels]
    partition.cluster_of_clip = out
    return out


def partition_clip(
    keyframes: np.ndarray,
    descriptors: np.ndarray,
    threshold: float = DEFAULT_CUT_THRESHOLD,
    bandwidth: float | None = None,
    max_samples: int = 100,
) -> ScenePartition:
    """Split keyframes at scene cuts, then cluster clips with mean shift."""
    cuts = detect_scene_cuts(keyframes, threshold)
    part = ScenePartition.from_cuts(cuts, len(keyframes))
    picks = [sample_clip_frames(a, b, max_samples) for a, b in part.clips]
    sampled = descriptors[np.concatenate(picks)]
    ms = MeanShift(bandwidth).fit(sampled)
    labels, pos = [], 0
    for p in picks:
        labels.append(ms.labels_[pos:pos + len(p)])
        pos += len(p)
    assign_clip_clusters(part, labels)
    # renumber clusters densely in order of first appearance
    remap: dict[int, int] = {}
    part.cluster_of_clip = [remap.setdefault(c, len(remap)) for c in part.cluster_of_clip]
    return part
