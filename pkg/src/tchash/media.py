"""Raw media container, synthetic clips, degradation and tamper operators.

Frames are stored as a single ``uint8`` array of shape ``(T, H, W, C)`` and
audio as mono ``int16`` PCM. The ARCV byte layout (little-endian)::

    magic "ARCV" | version u16 | H u16 | W u16 | C u8 | fps_num u16 |
    fps_den u16 | frame_count u32 | sample_rate u32 | sample_count u64 |
    frames (frame-major, row-major, channel-interleaved u8) | audio (i16)
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import ndimage

from .errors import (
    BadMagic,
    MediaInvalid,
    TruncatedPayload,
    UnsupportedVersion,
    WindowOutOfRange,
)

ARCV_MAGIC = b"ARCV"
ARCV_VERSION = 1
_HEADER = struct.Struct("<4sHHHBHHIIQ")

KEYFRAME_RATE = 10


@dataclass(eq=False)
class MediaClip:
    frames: np.ndarray
    frame_rate: Fraction
    audio: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.uint8)
        if self.frames.ndim != 4 or self.frames.shape[3] not in (1, 3):
            raise MediaInvalid(f"frames must be (T, H, W, C) with C in {{1, 3}}, got {self.frames.shape}")
        self.frame_rate = Fraction(self.frame_rate).limit_denominator(65535)
        if self.frame_rate <= 0:
            raise MediaInvalid("frame_rate must be positive")
        self.audio = np.ascontiguousarray(self.audio, dtype=np.int16).reshape(-1)
        self.sample_rate = int(self.sample_rate)
        if self.sample_rate <= 0:
            raise MediaInvalid("sample_rate must be positive")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def duration(self) -> float:
        return float(self.n_frames / self.frame_rate)

    @property
    def audio_duration(self) -> float:
        return self.audio.size / self.sample_rate

    def check_alignment(self) -> None:
        if abs(self.duration - self.audio_duration) > float(1 / self.frame_rate) + 1e-9:
            raise MediaInvalid(
                f"video lasts {self.duration:.3f}s but audio lasts {self.audio_duration:.3f}s"
            )

    def __eq__(self, other):
        if not isinstance(other, MediaClip):
            return NotImplemented
        return (
            self.frame_rate == other.frame_rate
            and self.sample_rate == other.sample_rate
            and self.frames.shape == other.frames.shape
            and np.array_equal(self.frames, other.frames)
            and np.array_equal(self.audio, other.audio)
        )

    def copy(self) -> MediaClip:
        return MediaClip(self.frames.copy(), self.frame_rate, self.audio.copy(), self.sample_rate)


def write_media(clip: MediaClip) -> bytes:
    t, h, w, c = clip.frames.shape
    fps = clip.frame_rate
    header = _HEADER.pack(
        ARCV_MAGIC, ARCV_VERSION, h, w, c, fps.numerator, fps.denominator,
        t, clip.sample_rate, clip.audio.size,
    )
    return header + clip.frames.tobytes() + clip.audio.astype("<i2").tobytes()


def read_media(data: bytes) -> MediaClip:
    if len(data) < 4 or data[:4] != ARCV_MAGIC:
        raise BadMagic(f"expected {ARCV_MAGIC!r}, got {bytes(data[:4])!r}")
    if len(data) < _HEADER.size:
        raise TruncatedPayload(f"header shorter than {_HEADER.size} bytes")
    _, version, h, w, c, fps_num, fps_den, t, sample_rate, n_samples = _HEADER.unpack_from(data)
    if version != ARCV_VERSION:
        raise UnsupportedVersion(f"ARCV version {version}")
    if fps_den == 0:
        raise MediaInvalid("zero frame-rate denominator")
    n_frame_bytes = t * h * w * c
    need = _HEADER.size + n_frame_bytes + 2 * n_samples
    if len(data) < need:
        raise TruncatedPayload(f"payload holds {len(data)} bytes, header declares {need}")
    offset = _HEADER.size
    frames = np.frombuffer(data, dtype=np.uint8, count=n_frame_bytes, offset=offset).reshape(t, h, w, c)
    audio = np.frombuffer(data, dtype="<i2", count=n_samples, offset=offset + n_frame_bytes)
    return MediaClip(frames.copy(), Fraction(fps_num, fps_den), audio.astype(np.int16), sample_rate)


def load_media(path) -> MediaClip:
    with open(path, "rb") as fh:
        return read_media(fh.read())


def save_media(clip: MediaClip, path) -> None:
    with open(path, "wb") as fh:
        fh.write(write_media(clip))


# ---------------------------------------------------------------- synthesis

def _palette(rng: np.random.Generator, n: int, min_dist: float = 90.0) -> np.ndarray:
    colors: list[np.ndarray] = []
    while len(colors) < n:
        cand = rng.integers(20, 236, size=3).astype(float)
        if all(np.abs(cand - c).mean() >= min_dist for c in colors):
            colors.append(cand)
        elif len(colors) and rng.random() < 0.002:
            min_dist *= 0.95  # palette too crowded for many scenes
    return np.array(colors)


def scene_boundaries(n_frames: int, scene_count: int) -> list[int]:
    """Frame indices at which each synthetic scene after the first starts."""
    return [round(k * n_frames / scene_count) for k in range(1, scene_count)]


def _smooth_field(rng, h, w, amplitude, cells=6):
    coarse = rng.uniform(-1, 1, size=(cells, cells))
    return amplitude * ndimage.zoom(coarse, (h / cells, w / cells), order=1, mode="nearest")[:h, :w]


def _render_scene(rng, n, h, w, bg, dynamic):
    ramp = np.linspace(-1, 1, h)[:, None] * rng.uniform(-20, 20) + np.linspace(-1, 1, w)[None, :] * rng.uniform(-20, 20)
    texture = (ramp + _smooth_field(rng, h, w, 25.0))[..., None] + _smooth_field(rng, h, w, 10.0)[..., None] * rng.uniform(-1, 1, 3)
    background = np.clip(bg + texture, 0, 255).astype(np.uint8)
    frames = np.empty((n, h, w, 3), dtype=np.uint8)
    frames[:] = background
    n_rect = 3
    sizes = rng.integers(max(4, h // 8), max(6, h // 4), size=(n_rect, 2))
    pos = rng.uniform(0, 1, size=(n_rect, 2)) * (np.array([h, w]) - sizes)
    vel = rng.uniform(0.8, 2.5, size=(n_rect, 2)) * rng.choice([-1, 1], size=(n_rect, 2))
    if not dynamic:
        vel[:] = 0.0
    cols = [np.clip(bg + rng.choice([-1, 1], 3) * rng.uniform(60, 110, 3), 0, 255) for _ in range(n_rect)]
    patches = []
    for r in range(n_rect):
        sh = np.linspace(-15, 15, sizes[r, 0])[:, None, None] + _smooth_field(rng, sizes[r, 0], sizes[r, 1], 8.0, 3)[..., None]
        patches.append(np.clip(cols[r] + sh, 0, 255).astype(np.uint8))
    limit = np.array([h, w]) - sizes
    for i in range(n):
        for r in range(n_rect):
            y, x = pos[r].astype(int)
            frames[i, y:y + sizes[r, 0], x:x + sizes[r, 1]] = patches[r]
        pos += vel
        over = (pos < 0) | (pos > limit)
        vel[over] *= -1
        pos = np.clip(pos, 0, limit)
    return frames


def _render_audio(rng, n_samples, sample_rate):
    """Speech-like bursts: syllables of varying pitch over a faint scene tone."""
    t = np.arange(n_samples) / sample_rate
    base = rng.uniform(150, 400)
    partials = rng.uniform(1.5, 6.0, size=2)
    tone_f = rng.uniform(300, 1500)
    out = 0.08 * np.sin(2 * np.pi * tone_f * t + rng.uniform(0, 2 * np.pi))
    out += 0.02 * rng.standard_normal(n_samples)
    pitch = np.full(n_samples, base)
    env = np.zeros(n_samples)
    pos = 0
    while pos < n_samples:
        length = int(rng.uniform(0.08, 0.35) * sample_rate)
        gap = int(rng.uniform(0.02, 0.15) * sample_rate)
        seg = slice(pos, min(pos + length, n_samples))
        m = seg.stop - seg.start
        if m > 0:
            pitch[seg] = base * rng.uniform(0.7, 1.6)
            env[seg] = rng.uniform(0.3, 1.0) * np.sin(np.pi * np.arange(m) / max(length, 1))
        pos += length + gap
    phase = 2 * np.pi * np.cumsum(pitch) / sample_rate
    voice = np.sin(phase) + 0.5 * np.sin(partials[0] * phase) + 0.25 * np.sin(partials[1] * phase)
    out += 0.5 * env * voice
    return out


def synth_clip(
    scene_count: int,
    duration_s: float,
    seed: int,
    preset: str = "dynamic",
    size: tuple[int, int] = (64, 64),
    fps: int = 10,
    sample_rate: int = 8000,
) -> MediaClip:
    """Generate a deterministic multi-scene clip.

    Scenes have distinct background colours carrying rectangles (moving for
    ``preset="dynamic"``, fixed for ``"static"``) and distinct speech-like
    audio. Scene ``k`` starts at frame ``scene_boundaries(T, scene_count)[k-1]``.
    """
    if duration_s <= 0:
        raise ValueError("duration_s must be positive")
    if scene_count < 1:
        raise ValueError("scene_count must be >= 1")
    if preset not in ("dynamic", "static"):
        raise ValueError(f"unknown preset {preset!r}")
    rng = np.random.default_rng(seed)
    h, w = size
    n_frames = max(1, round(duration_s * fps))
    n_samples = round(n_frames * sample_rate / fps)
    cuts = [0, *scene_boundaries(n_frames, scene_count), n_frames]
    colors = _palette(rng, scene_count)
    frames = np.empty((n_frames, h, w, 3), dtype=np.uint8)
    audio = np.empty(n_samples)
    for k in range(scene_count):
        a, b = cuts[k], cuts[k + 1]
        frames[a:b] = _render_scene(rng, b - a, h, w, colors[k], preset == "dynamic")
        sa, sb = round(a * sample_rate / fps), round(b * sample_rate / fps)
        audio[sa:sb] = _render_audio(rng, sb - sa, sample_rate)
    pcm = np.clip(np.round(audio * 20000), -32768, 32767).astype(np.int16)
    return MediaClip(frames, Fraction(fps), pcm, sample_rate)


# -------------------------------------------------------------- degradation

@dataclass(frozen=True)
class DegradeParams:
    visual_quant_step: int = 1
    blur_radius: int = 0
    noise_sigma: float = 0.0
    target_fps: Fraction | None = None
    audio_bits: int = 16
    audio_rate: int | None = None

    def __post_init__(self):
        if self.visual_quant_step < 1:
            raise ValueError("visual_quant_step must be >= 1")
        if self.blur_radius < 0 or self.noise_sigma < 0:
            raise ValueError("blur_radius and noise_sigma must be non-negative")
        if not 4 <= self.audio_bits <= 16:
            raise ValueError("audio_bits must lie in [4, 16]")
        if self.target_fps is not None and Fraction(self.target_fps) <= 0:
            raise ValueError("target_fps must be positive")
        if self.audio_rate is not None and self.audio_rate <= 0:
            raise ValueError("audio_rate must be positive")


def resample_frames(frames: np.ndarray, src_fps: Fraction, dst_fps: Fraction) -> np.ndarray:
    """Nearest-frame resampling; output length is ``round(T * dst / src)``."""
    src_fps, dst_fps = Fraction(src_fps), Fraction(dst_fps)
    n = frames.shape[0]
    ratio = src_fps / dst_fps
    m = max(1, _round_half_up(n / ratio))
    idx = np.array([min(n - 1, _round_half_up(i * ratio)) for i in range(m)], dtype=np.int64)
    return frames[idx]


def _round_half_up(x) -> int:
    return math.floor(Fraction(x) + Fraction(1, 2))


def _resample_audio(audio: np.ndarray, src: int, dst: int) -> np.ndarray:
    if src == dst or audio.size == 0:
        return audio.astype(float)
    m = round(audio.size * dst / src)
    t_dst = np.arange(m) * (src / dst)
    return np.interp(t_dst, np.arange(audio.size), audio.astype(float))


def degrade(clip: MediaClip, params: DegradeParams, seed: int = 0) -> MediaClip:
    """Simulated transcode: requantize, blur, add noise, resample, crush audio."""
    rng = np.random.default_rng(seed)
    frames = clip.frames
    q = params.visual_quant_step
    if q > 1:
        v = (frames.astype(np.int32) // q) * q + q // 2
        frames = np.clip(v, 0, 255).astype(np.uint8)
    if params.blur_radius > 0:
        k = 2 * params.blur_radius + 1
        blurred = ndimage.uniform_filter(frames.astype(np.float64), size=(1, k, k, 1), mode="nearest")
        frames = np.clip(np.round(blurred), 0, 255).astype(np.uint8)
    if params.noise_sigma > 0:
        noisy = frames + rng.normal(0.0, params.noise_sigma, size=frames.shape)
        frames = np.clip(np.round(noisy), 0, 255).astype(np.uint8)
    fps = clip.frame_rate
    if params.target_fps is not None and Fraction(params.target_fps) != fps:
        frames = resample_frames(frames, fps, params.target_fps)
        fps = Fraction(params.target_fps)

    rate = params.audio_rate or clip.sample_rate
    audio = clip.audio
    if rate != clip.sample_rate:
        audio = np.clip(np.round(_resample_audio(audio, clip.sample_rate, rate)), -32768, 32767).astype(np.int16)
    if params.audio_bits < 16:
        shift = 16 - params.audio_bits
        audio = ((audio.astype(np.int32) >> shift) << shift).astype(np.int16)
    return MediaClip(frames, fps, audio, rate)


# ------------------------------------------------------------------ tamper

class TamperKind(str, enum.Enum):
    TEMPORAL_CUT = "TemporalCut"
    SPATIAL_NOISE = "SpatialNoise"
    AUDIO_NOISE = "AudioNoise"


MIN_TAMPER_S = 1.0
MAX_TAMPER_S = 10.0


@dataclass(frozen=True)
class TamperSpec:
    kind: TamperKind
    start_s: float
    duration_s: float
    seed: int = field(default=0, compare=True)

    def __post_init__(self):
        object.__setattr__(self, "kind", TamperKind(self.kind))
        if not MIN_TAMPER_S <= self.duration_s <= MAX_TAMPER_S:
            raise ValueError(f"tamper duration {self.duration_s}s outside [1, 10]s")
        if self.start_s < 0:
            raise ValueError("tamper start must be non-negative")


def apply_tamper(clip: MediaClip, spec: TamperSpec) -> MediaClip:
    fps = clip.frame_rate
    if spec.start_s + spec.duration_s > clip.duration + 1e-9:
        raise WindowOutOfRange(
            f"window [{spec.start_s}, {spec.start_s + spec.duration_s}]s exceeds clip of {clip.duration}s"
        )
    f0 = _round_half_up(Fraction(spec.start_s) * fps)
    nf = _round_half_up(Fraction(spec.duration_s) * fps)
    s0 = round(spec.start_s * clip.sample_rate)
    ns = round(spec.duration_s * clip.sample_rate)
    rng = np.random.default_rng(spec.seed)
    if spec.kind is TamperKind.TEMPORAL_CUT:
        frames = np.concatenate([clip.frames[:f0], clip.frames[f0 + nf:]])
        audio = np.concatenate([clip.audio[:s0], clip.audio[s0 + ns:]])
        return MediaClip(frames, fps, audio, clip.sample_rate)
    out = clip.copy()
    if spec.kind is TamperKind.SPATIAL_NOISE:
        window = out.frames[f0:f0 + nf]
        window[:] = rng.integers(0, 256, size=window.shape, dtype=np.uint8)
    else:
        span = out.audio[s0:s0 + ns]
        span[:] = rng.integers(-32768, 32768, size=span.shape).astype(np.int16)
    return out


# --------------------------------------------------------------- keyframes

def keyframe_count(clip: MediaClip, rate: int = KEYFRAME_RATE) -> int:
    fps = clip.frame_rate
    # ceil(T / fps * rate) in exact arithmetic
    return -(-clip.n_frames * fps.denominator * rate // fps.numerator)


def keyframe_indices(clip: MediaClip, rate: int = KEYFRAME_RATE) -> np.ndarray:
    fps = clip.frame_rate
    num, den = fps.numerator, fps.denominator
    i = np.arange(keyframe_count(clip, rate), dtype=np.int64)
    # round(i * fps / rate), halves rounded up
    idx = (2 * i * num + den * rate) // (2 * den * rate)
    return np.minimum(idx, clip.n_frames - 1)


def sample_keyframes(clip: MediaClip, rate: int = KEYFRAME_RATE) -> np.ndarray:
    """Resample frames to ``rate`` fps by nearest frame."""
    if clip.frame_rate < 1:
        raise MediaInvalid("frame_rate must be at least 1 fps")
    return clip.frames[keyframe_indices(clip, rate)]
