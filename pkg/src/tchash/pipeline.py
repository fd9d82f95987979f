"""Ingest and verification of archived media.

Ingest samples keyframes, cuts the keyframe sequence into scene clips,
clusters the clips and trains one visual and one audio sequence model per
cluster on transcoded copies of the media. Every block of ``N`` keyframes is
then hashed to a product-quantised code, and each code gets a threshold wide
enough to cover all of the block's transcodes. The codes, thresholds, clip
ranges and the digests of the model and codebook files form a
:class:`TchBundle`, which is what goes on the ledger.

Verification recomputes the block embeddings of a candidate file with the
archived models and fails every block whose distance to its stored code
exceeds the stored threshold.
"""

from __future__ import annotations

import enum
import json
import math
import struct
import time
import uuid
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .errors import (
    BadMagic,
    DimensionMismatch,
    ModelHashMismatch,
    RecordTooLarge,
    TruncatedPayload,
    UnsupportedVersion,
)
from .features import (
    DEFAULT_CUT_THRESHOLD,
    audio_features,
    black_frame_row,
    cepstral_mean_normalize,
    frame_descriptors,
    partition_clip,
    silent_audio_row,
)
from .ledger import MAX_RECORD_BYTES, ChainRecord, Credential, record_overhead, sha256
from .media import (
    KEYFRAME_RATE,
    DegradeParams,
    MediaClip,
    TamperKind,
    TamperSpec,
    apply_tamper,
    degrade,
    keyframe_count,
    load_media,
    sample_keyframes,
    save_media,
)
from .pq import ProductQuantizer
from .seqmodel import (
    BLOCK_FRAMES,
    SequenceAutoencoder,
    dump_models,
    load_models,
    n_blocks,
    segment_blocks,
)

VISUAL, AUDIO = "visual", "audio"
MODALITIES = (VISUAL, AUDIO)
ARTIFACTS = {"model_v": "model_v.arcm", "model_a": "model_a.arcm", "pq_v": "pq_v.arcq", "pq_a": "pq_a.arcq"}
MEDIA_FILE = "media.arcv"

THRESHOLD_SCALE = 1 << 16
U32_MAX = (1 << 32) - 1

# Transcode grids. Control values are disjoint from the training values but
# lie inside the range the training copies span.
TRAIN_GRID = {
    "visual_quant_step": (1, 2, 4, 6, 8, 12, 14, 16),
    "blur_radius": (0, 0, 1, 2),
    "noise_sigma": (0.0, 1.0, 2.0, 3.0, 4.0),
    "target_fps": (10, 12, 15, 20, 25),
    "audio_bits": (10, 12, 14, 16),
    "audio_rate": (8000, 11025, 12000, 22050, 44100, 48000),
}
CONTROL_GRID = {
    "visual_quant_step": (3, 5, 7, 9, 10, 11, 13),
    "blur_radius": (0, 0, 1),
    "noise_sigma": (0.5, 1.5, 2.5, 3.5),
    "target_fps": (26, 48, 60),
    "audio_bits": (11, 13, 15),
    "audio_rate": (16000, 24000, 32000),
}
# harshest setting of every knob, always the first training copy
ENVELOPE = DegradeParams(16, 2, 4.0, Fraction(25), 10, 12000)


def _params_from(values) -> DegradeParams:
    return DegradeParams(
        visual_quant_step=int(values["visual_quant_step"]),
        blur_radius=int(values["blur_radius"]),
        noise_sigma=float(values["noise_sigma"]),
        target_fps=Fraction(int(values["target_fps"])),
        audio_bits=int(values["audio_bits"]),
        audio_rate=int(values["audio_rate"]),
    )


def augmentation_params(n: int, seed: int = 0) -> list[DegradeParams]:
    """Training transcodes: the envelope, then every grid value in turn.

    Each knob walks through a seeded permutation of its grid so a dozen
    copies cover every value at least once in varied combinations.
    """
    if n < 1:
        return []
    rng = np.random.default_rng(seed)
    perms = {k: rng.permutation(len(v)) for k, v in TRAIN_GRID.items()}
    out = [ENVELOPE]
    for i in range(n - 1):
        out.append(_params_from({k: v[perms[k][i % len(v)]] for k, v in TRAIN_GRID.items()}))
    return out


def control_params(n: int, seed: int = 0) -> list[DegradeParams]:
    """Held-out transcodes drawn from the control grid."""
    rng = np.random.default_rng([seed, 1])
    return [_params_from({k: v[rng.integers(len(v))] for k, v in CONTROL_GRID.items()}) for _ in range(n)]


def compression_factor(params: DegradeParams) -> float:
    """Approximate size reduction of a transcode against 8-bit video and 16-bit audio."""
    levels = math.ceil(256 / params.visual_quant_step)
    visual = 8.0 / max(math.log2(levels), 1.0)
    audio = 16.0 / params.audio_bits
    return round(0.5 * (visual + audio), 3)


def encode_threshold(value: float) -> int:
    """u32 fixed point with scale 2^-16, rounded strictly up, saturating."""
    if not value >= 0:
        raise ValueError(f"threshold must be non-negative, got {value}")
    return min(math.floor(value * THRESHOLD_SCALE) + 1, U32_MAX)


def decode_threshold(raw) -> np.ndarray | float:
    return np.asarray(raw, dtype=np.float64) / THRESHOLD_SCALE


# ------------------------------------------------------------------ config

@dataclass
class IngestConfig:
    seed: int = 0
    n_augment: int = 12
    cut_threshold: float = DEFAULT_CUT_THRESHOLD
    bandwidth: float | None = None
    max_scene_samples: int = 100
    hidden_encoder: int = 128
    hidden_decoder: int = 256
    bottleneck_visual: int = 256
    bottleneck_audio: int = 128
    max_epochs: int = 2
    learning_rate: float = 0.05
    margin: float = 0.2
    input_gain: float = 0.005
    max_timescale: float = 10.0 * BLOCK_FRAMES
    pq_subspaces: int = 32
    pq_centroids: int = 256
    keyframe_slack: int = 1

    def __post_init__(self):
        if self.n_augment < 2:
            raise ValueError("n_augment must be at least 2")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.keyframe_slack < 0:
            raise ValueError("keyframe_slack must be non-negative")

    @classmethod
    def from_mapping(cls, values: dict) -> IngestConfig:
        """Build from string values (a key=value file); unknown keys are ignored."""
        kw = {}
        for f in fields(cls):
            if f.name not in values:
                continue
            raw = values[f.name]
            if raw is None or (isinstance(raw, str) and raw.lower() in ("", "none")):
                kw[f.name] = None
            elif f.name in ("cut_threshold", "bandwidth", "learning_rate", "margin", "input_gain", "max_timescale"):
                kw[f.name] = float(raw)
            else:
                kw[f.name] = int(raw)
        return cls(**kw)

    def model_params(self, modality: str) -> dict:
        return dict(
            hidden_encoder=self.hidden_encoder,
            bottleneck=self.bottleneck_visual if modality == VISUAL else self.bottleneck_audio,
            hidden_decoder=self.hidden_decoder,
            margin=self.margin,
            learning_rate=self.learning_rate,
            max_epochs=self.max_epochs,
            input_gain=self.input_gain,
            max_timescale=self.max_timescale,
            random_state=self.seed,
        )


# ------------------------------------------------------------------ bundle

@dataclass(frozen=True)
class ClipSpan:
    start: int  # keyframe index, inclusive
    end: int  # exclusive
    cluster: int

    @property
    def n_blocks(self) -> int:
        return n_blocks(self.end - self.start)


_BUNDLE_MAGIC = b"TCHB"
_BUNDLE_VERSION = 1
_BUNDLE_HEAD = struct.Struct("<4sHIIHBB")
_CLIP = struct.Struct("<IIH")
_DIGEST_ORDER = ("model_v", "model_a", "pq_v", "pq_a")


@dataclass
class TchBundle:
    """Everything the ledger stores about one archived media file."""

    n_keyframes: int
    clips: list[ClipSpan]
    codes: dict[str, np.ndarray]  # modality -> (B, M) uint8
    thresholds: dict[str, np.ndarray]  # modality -> (B,) uint32 fixed point
    digests: dict[str, bytes]

    def __post_init__(self):
        B = sum(c.n_blocks for c in self.clips)
        for m in MODALITIES:
            if len(self.codes[m]) != B or len(self.thresholds[m]) != B:
                raise DimensionMismatch(f"{m}: {len(self.codes[m])} codes for {B} blocks")

    @property
    def n_blocks(self) -> int:
        return len(self.codes[VISUAL])

    @property
    def tch_bits(self) -> int:
        """Size of the code payload in bits."""
        return sum(int(self.codes[m].size) * 8 for m in MODALITIES)

    def block_clips(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.clips)), [c.n_blocks for c in self.clips])

    def to_bytes(self) -> bytes:
        mv, ma = self.codes[VISUAL].shape[1], self.codes[AUDIO].shape[1]
        parts = [_BUNDLE_HEAD.pack(_BUNDLE_MAGIC, _BUNDLE_VERSION, self.n_keyframes, self.n_blocks,
                                   len(self.clips), mv, ma)]
        parts += [self.digests[k] for k in _DIGEST_ORDER]
        parts += [_CLIP.pack(c.start, c.end, c.cluster) for c in self.clips]
        cv = self.codes[VISUAL].astype(np.uint8)
        ca = self.codes[AUDIO].astype(np.uint8)
        tv = self.thresholds[VISUAL].astype("<u4")
        ta = self.thresholds[AUDIO].astype("<u4")
        for t in range(self.n_blocks):
            parts += [cv[t].tobytes(), ca[t].tobytes(), tv[t:t + 1].tobytes(), ta[t:t + 1].tobytes()]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> TchBundle:
        if len(data) < _BUNDLE_HEAD.size:
            raise TruncatedPayload("bundle header is truncated")
        magic, version, n_kf, B, n_clips, mv, ma = _BUNDLE_HEAD.unpack_from(data)
        if magic != _BUNDLE_MAGIC:
            raise BadMagic(f"expected {_BUNDLE_MAGIC!r}, got {magic!r}")
        if version != _BUNDLE_VERSION:
            raise UnsupportedVersion(f"bundle version {version}")
        per_block = mv + ma + 8
        need = _BUNDLE_HEAD.size + 32 * len(_DIGEST_ORDER) + n_clips * _CLIP.size + B * per_block
        if len(data) != need:
            raise TruncatedPayload(f"bundle needs {need} bytes, got {len(data)}")
        pos = _BUNDLE_HEAD.size
        digests = {}
        for k in _DIGEST_ORDER:
            digests[k] = data[pos:pos + 32]
            pos += 32
        clips = []
        for _ in range(n_clips):
            clips.append(ClipSpan(*_CLIP.unpack_from(data, pos)))
            pos += _CLIP.size
        raw = np.frombuffer(data, dtype=np.uint8, offset=pos, count=B * per_block).reshape(B, per_block)
        codes = {VISUAL: raw[:, :mv].copy(), AUDIO: raw[:, mv:mv + ma].copy()}
        thr = raw[:, mv + ma:].copy().view("<u4").reshape(B, 2).astype(np.uint32)
        return cls(n_kf, clips, codes, {VISUAL: thr[:, 0].copy(), AUDIO: thr[:, 1].copy()}, digests)

    def to_json(self) -> str:
        """Readable dump for debugging; not a normative format."""
        return json.dumps({
            "n_keyframes": self.n_keyframes,
            "clips": [asdict(c) for c in self.clips],
            "codes": {m: [bytes(c).hex() for c in self.codes[m]] for m in MODALITIES},
            "thresholds": {m: decode_threshold(self.thresholds[m]).tolist() for m in MODALITIES},
            "digests": {k: v.hex() for k, v in self.digests.items()},
        }, indent=2)


# ------------------------------------------------------------- fragments

_FRAGMENT = struct.Struct("<4sHH16s")
_FRAGMENT_MAGIC = b"TCHF"


def fragment_uid(uid: bytes, index: int) -> bytes:
    """Record uid of fragment ``index``; fragment 0 keeps the package uid."""
    if index == 0:
        return bytes(uid)
    return sha256(bytes(uid) + b"/fragment/" + index.to_bytes(2, "little"))[:16]


def split_bundle(uid: bytes, data: bytes, submitter: str = "", limit: int = MAX_RECORD_BYTES):
    """Cut serialized bundle bytes into record payloads that each fit ``limit``.

    Returns ``[(record_uid, payload), ...]``; every payload starts with a
    fragment header naming its index, the fragment count and the package uid.
    """
    room = limit - record_overhead(submitter) - _FRAGMENT.size
    if room <= 0:
        raise RecordTooLarge("record limit leaves no room for payload")
    chunks = [data[i:i + room] for i in range(0, len(data), room)] or [b""]
    if len(chunks) > 0xFFFF:
        raise RecordTooLarge("bundle needs more than 65535 fragments")
    return [(fragment_uid(uid, i), _FRAGMENT.pack(_FRAGMENT_MAGIC, i, len(chunks), bytes(uid)) + c)
            for i, c in enumerate(chunks)]


def fragment_header(payload: bytes) -> tuple[int, int, bytes]:
    if len(payload) < _FRAGMENT.size:
        raise TruncatedPayload("fragment header is truncated")
    magic, index, count, uid = _FRAGMENT.unpack_from(payload)
    if magic != _FRAGMENT_MAGIC:
        raise BadMagic(f"expected {_FRAGMENT_MAGIC!r}, got {magic!r}")
    return index, count, uid


def join_fragments(payloads) -> bytes:
    parts = {}
    count = uid = None
    for p in payloads:
        i, n, u = fragment_header(p)
        if count is None:
            count, uid = n, u
        elif (n, u) != (count, uid):
            raise ValueError("fragments belong to different bundles")
        parts[i] = p[_FRAGMENT.size:]
    if count is None or sorted(parts) != list(range(count)):
        raise TruncatedPayload("bundle fragments are missing")
    return b"".join(parts[i] for i in range(count))


def bundle_records(uid: bytes, bundle: TchBundle | bytes, submitter: str = "",
                   credential: Credential | None = None, time_ms: int = 0) -> list[ChainRecord]:
    data = bundle.to_bytes() if isinstance(bundle, TchBundle) else bytes(bundle)
    cred = credential or Credential(0, bytes(32))
    return [ChainRecord(u, p, submitter, time_ms, cred) for u, p in split_bundle(uid, data, submitter)]


def fetch_bundle(fetch, uid: bytes) -> TchBundle:
    """Reassemble a bundle with ``fetch(uid) -> ChainRecord``."""
    first = fetch(bytes(uid)).payload
    _, count, _ = fragment_header(first)
    payloads = [first] + [fetch(fragment_uid(uid, i)).payload for i in range(1, count)]
    return TchBundle.from_bytes(join_fragments(payloads))


# -------------------------------------------------------------- features

def _fit_length(kf: np.ndarray, n: int) -> np.ndarray:
    """Truncate, or pad by repeating the last keyframe, to exactly ``n``."""
    if len(kf) >= n:
        return kf[:n]
    if len(kf) == 0:
        raise DimensionMismatch("media has no keyframes")
    return np.concatenate([kf, np.repeat(kf[-1:], n - len(kf), axis=0)])


def keyframe_rows(clip: MediaClip, n_keyframes: int | None = None):
    """Keyframes plus aligned visual and raw audio descriptor rows."""
    kf = sample_keyframes(clip)
    if n_keyframes is not None:
        kf = _fit_length(kf, n_keyframes)
    vis = np.concatenate([frame_descriptors(kf[s:s + 512]) for s in range(0, len(kf), 512)])
    aud = audio_features(clip.audio, clip.sample_rate, len(kf))
    return kf, vis, aud


def clip_blocks(rows: dict, clips) -> dict[str, list[np.ndarray]]:
    """Per-modality list of ``(B_c, N, S)`` blocks, one entry per clip."""
    out = {VISUAL: [], AUDIO: []}
    black, silent = black_frame_row(), silent_audio_row()
    for c in clips:
        out[VISUAL].append(segment_blocks(rows[VISUAL][c.start:c.end], black))
        aud, pad = cepstral_mean_normalize(rows[AUDIO][c.start:c.end], silent)
        out[AUDIO].append(segment_blocks(aud, pad))
    return out


def _successors(clips, members) -> np.ndarray:
    succ, pos = [], 0
    for ci in members:
        b = clips[ci].n_blocks
        succ += [pos + i + 1 if i + 1 < b else -1 for i in range(b)]
        pos += b
    return np.array(succ, dtype=int)


# ---------------------------------------------------------------- verify

class Verdict(str, enum.Enum):
    INTACT = "Intact"
    TAMPERED = "Tampered"

    def __str__(self):
        return self.value


TEMPORAL_STRUCTURE = "TemporalStructure"


@dataclass(frozen=True)
class BlockResult:
    clip: int
    block: int
    modality: str
    distance: float
    threshold: float
    passed: bool
    start_s: float
    end_s: float


@dataclass
class VerifyReport:
    verdict: Verdict
    results: list[BlockResult] = field(default_factory=list)
    reason: str | None = None

    @property
    def tampered(self) -> bool:
        return self.verdict is Verdict.TAMPERED

    @property
    def failures(self) -> list[BlockResult]:
        return [r for r in self.results if not r.passed]

    def to_dict(self) -> dict:
        return {"verdict": str(self.verdict), "reason": self.reason,
                "blocks": [asdict(r) for r in self.results]}

    def format(self) -> str:
        lines = [f"verdict: {self.verdict}" + (f" ({self.reason})" if self.reason else "")]
        for r in self.results:
            mark = "ok  " if r.passed else "FAIL"
            lines.append(f"{mark} clip {r.clip} block {r.block} {r.modality:6s} "
                         f"[{r.start_s:7.1f}s, {r.end_s:7.1f}s) distance {r.distance:.6f} threshold {r.threshold:.6f}")
        return "\n".join(lines)


def _embed(models, pqs, clips, blocks):
    """Per-modality ``(B, D)`` embeddings, one batch per cluster as at ingest."""
    B = sum(len(b) for b in blocks[VISUAL])
    starts = np.cumsum([0] + [len(b) for b in blocks[VISUAL]])
    Z = {}
    for m in MODALITIES:
        Z[m] = np.zeros((B, pqs[m].n_features_in_))
        for k, model in enumerate(models[m]):
            members = [i for i, c in enumerate(clips) if c.cluster == k]
            if not members:
                continue
            batch = np.concatenate([blocks[m][i] for i in members])
            z = model.transform(batch)
            rows = np.concatenate([np.arange(starts[i], starts[i + 1]) for i in members])
            Z[m][rows] = z
    return Z


def _verify(clip: MediaClip, bundle: TchBundle, models, pqs, slack: int = 1) -> VerifyReport:
    n = keyframe_count(clip)
    if n > bundle.n_keyframes + slack:
        return VerifyReport(Verdict.TAMPERED, reason=TEMPORAL_STRUCTURE)
    n_use = bundle.n_keyframes if n >= bundle.n_keyframes - slack else n
    spans = [ClipSpan(c.start, min(c.end, n_use), c.cluster) for c in bundle.clips]
    if any(s.end <= s.start for s in spans) or sum(s.n_blocks for s in spans) != bundle.n_blocks:
        return VerifyReport(Verdict.TAMPERED, reason=TEMPORAL_STRUCTURE)
    _, vis, aud = keyframe_rows(clip, n_use)
    blocks = clip_blocks({VISUAL: vis, AUDIO: aud}, spans)
    Z = _embed(models, pqs, bundle.clips, blocks)
    owner = bundle.block_clips()
    local = np.concatenate([np.arange(s.n_blocks) for s in spans])
    results = []
    for m in MODALITIES:
        dist = pqs[m].asym_dist(Z[m], bundle.codes[m])
        thr = decode_threshold(bundle.thresholds[m])
        for t in range(bundle.n_blocks):
            span = bundle.clips[owner[t]]
            a = span.start + local[t] * BLOCK_FRAMES
            b = min(a + BLOCK_FRAMES, span.end)
            results.append(BlockResult(int(owner[t]), int(local[t]), m, float(dist[t]), float(thr[t]),
                                       bool(dist[t] <= thr[t]), a / KEYFRAME_RATE, b / KEYFRAME_RATE))
    verdict = Verdict.TAMPERED if any(not r.passed for r in results) else Verdict.INTACT
    return VerifyReport(verdict, results)


# ----------------------------------------------------------------- hasher

class TemporalContentHasher(BaseEstimator):
    """Train per-cluster models on one media file and verify candidates against it.

    ``fit`` runs the whole ingest computation and leaves the bundle in
    ``bundle_``; ``predict`` returns a verdict string per candidate clip.
    """

    def __init__(self, config: IngestConfig | None = None):
        self.config = config

    def fit(self, X: MediaClip, y=None):
        cfg = self.config or IngestConfig()
        clip = X
        kf, vis, aud = keyframe_rows(clip)
        n_kf = len(kf)
        part = partition_clip(kf, vis, cfg.cut_threshold, cfg.bandwidth, cfg.max_scene_samples)
        clips = [ClipSpan(a, b, k) for (a, b), k in zip(part.clips, part.cluster_of_clip)]
        anchor = clip_blocks({VISUAL: vis, AUDIO: aud}, clips)

        params = augmentation_params(cfg.n_augment, cfg.seed)
        versions = []
        for i, p in enumerate(params):
            _, v, a = keyframe_rows(degrade(clip, p, seed=cfg.seed * 1000 + i), n_kf)
            versions.append(clip_blocks({VISUAL: v, AUDIO: a}, clips))

        n_clusters = max(c.cluster for c in clips) + 1
        B = sum(c.n_blocks for c in clips)
        starts = np.cumsum([0] + [c.n_blocks for c in clips])
        models = {m: [] for m in MODALITIES}
        Z, ZP = {}, {}
        for m in MODALITIES:
            D = cfg.model_params(m)["bottleneck"]
            Z[m] = np.zeros((B, D))
            ZP[m] = np.zeros((B, len(params), D))
            for k in range(n_clusters):
                members = [i for i, c in enumerate(clips) if c.cluster == k]
                X_k = np.concatenate([anchor[m][i] for i in members])
                P_k = np.stack([np.concatenate([v[m][i] for i in members]) for v in versions], axis=1)
                model = SequenceAutoencoder(**cfg.model_params(m))
                model.fit(X_k, positives=P_k, successor=_successors(clips, members))
                models[m].append(model)
                rows = np.concatenate([np.arange(starts[i], starts[i + 1]) for i in members])
                Z[m][rows] = model.transform(X_k)
                for j in range(len(params)):
                    ZP[m][rows, j] = model.transform(P_k[:, j])

        pqs, codes, thresholds, eps = {}, {}, {}, {}
        for m in MODALITIES:
            pq = ProductQuantizer(cfg.pq_subspaces, cfg.pq_centroids, random_state=cfg.seed)
            pq.fit(np.concatenate([Z[m], ZP[m].reshape(-1, Z[m].shape[1])]))
            codes[m] = pq.transform(Z[m])
            exact = np.linalg.norm(ZP[m] - Z[m][:, None], axis=2)
            asym = np.stack([pq.asym_dist(ZP[m][:, j], codes[m]) for j in range(len(params))], axis=1)
            eps[m] = exact.max(axis=1)
            gap = np.abs(asym - exact).max(axis=1)
            # same bound as eps + gap, but immune to rounding in the sum
            inflated = np.maximum(eps[m] + gap, np.maximum(asym.max(axis=1), pq.asym_dist(Z[m], codes[m])))
            thresholds[m] = np.array([encode_threshold(x) for x in inflated], dtype=np.uint32)
            pqs[m] = pq

        self.artifacts_ = {
            "model_v": dump_models(models[VISUAL]),
            "model_a": dump_models(models[AUDIO]),
            "pq_v": pqs[VISUAL].to_bytes(),
            "pq_a": pqs[AUDIO].to_bytes(),
        }
        digests = {k: sha256(v) for k, v in self.artifacts_.items()}
        self.bundle_ = TchBundle(n_kf, clips, codes, thresholds, digests)
        self.partition_ = part
        self.models_ = models
        self.pq_ = pqs
        self.epsilon_ = eps
        self.augmentations_ = params
        return self

    def verify(self, clip: MediaClip) -> VerifyReport:
        check_is_fitted(self, "bundle_")
        cfg = self.config or IngestConfig()
        return _verify(clip, self.bundle_, self.models_, self.pq_, cfg.keyframe_slack)

    def predict(self, X) -> np.ndarray:
        clips = [X] if isinstance(X, MediaClip) else list(X)
        return np.array([str(self.verify(c).verdict) for c in clips])


# --------------------------------------------------------- package layer

@dataclass
class ArchivePackage:
    uid: bytes
    directory: Path
    title: str = ""
    ingest_time: float = 0.0
    files: dict[str, Path] = field(default_factory=dict)


def _as_clip(media) -> MediaClip:
    return media if isinstance(media, MediaClip) else load_media(media)


def ingest(media, config: IngestConfig | None = None, out_dir=None, uid: bytes | None = None,
           title: str = "") -> tuple[ArchivePackage, TchBundle]:
    """Hash ``media`` (a clip or ARCV path) and write off-chain artifacts under ``out_dir/<uid>``."""
    clip = _as_clip(media)
    clip.check_alignment()
    hasher = TemporalContentHasher(config).fit(clip)
    uid = bytes(uid) if uid is not None else uuid.uuid4().bytes
    if len(uid) != 16:
        raise ValueError("uid must be 16 bytes")
    pkg = ArchivePackage(uid, Path(out_dir or ".") / uid.hex(), title, time.time())
    if out_dir is not None:
        pkg.directory.mkdir(parents=True, exist_ok=True)
        for key, name in ARTIFACTS.items():
            path = pkg.directory / name
            path.write_bytes(hasher.artifacts_[key])
            pkg.files[key] = path
        save_media(clip, pkg.directory / MEDIA_FILE)
        pkg.files["media"] = pkg.directory / MEDIA_FILE
        (pkg.directory / "bundle.tchb").write_bytes(hasher.bundle_.to_bytes())
        (pkg.directory / "record.json").write_text(hasher.bundle_.to_json())
    return pkg, hasher.bundle_


def load_artifacts(directory) -> dict[str, bytes]:
    directory = Path(directory)
    return {key: (directory / name).read_bytes() for key, name in ARTIFACTS.items()}


class Verifier:
    """Checks artifact digests and loads the models once, then verifies many files.

    ``artifacts`` is a package directory or a mapping of artifact name to
    bytes. Any artifact whose digest differs from the record refuses
    verification with :class:`ModelHashMismatch`.
    """

    def __init__(self, record: TchBundle | bytes, artifacts, keyframe_slack: int = 1):
        self.bundle = record if isinstance(record, TchBundle) else TchBundle.from_bytes(bytes(record))
        blobs = artifacts if isinstance(artifacts, dict) else load_artifacts(artifacts)
        for key in _DIGEST_ORDER:
            if sha256(blobs[key]) != self.bundle.digests[key]:
                raise ModelHashMismatch(f"{ARTIFACTS[key]} does not match the recorded digest")
        self.models = {VISUAL: load_models(blobs["model_v"]), AUDIO: load_models(blobs["model_a"])}
        self.pqs = {VISUAL: ProductQuantizer.from_bytes(blobs["pq_v"]),
                    AUDIO: ProductQuantizer.from_bytes(blobs["pq_a"])}
        self.keyframe_slack = keyframe_slack

    def verify(self, media) -> VerifyReport:
        return _verify(_as_clip(media), self.bundle, self.models, self.pqs, self.keyframe_slack)


def verify(media, record: TchBundle | bytes, artifacts, keyframe_slack: int = 1) -> VerifyReport:
    """Check ``media`` against an on-chain bundle using archived models."""
    return Verifier(record, artifacts, keyframe_slack).verify(media)


class IngestQueue:
    """Background ingest jobs, one package per job."""

    def __init__(self, workers: int = 1):
        self._pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="ingest")

    def submit(self, media, config=None, out_dir=None, uid=None, title="") -> Future:
        return self._pool.submit(ingest, media, config, out_dir, uid, title)

    def shutdown(self, wait: bool = True):
        self._pool.shutdown(wait=wait)


# ---------------------------------------------------------- test corpora

@dataclass(frozen=True)
class CorpusItem:
    name: str
    kind: str  # control | temporal | spatial
    params: DegradeParams | None = None
    tamper: TamperSpec | None = None

    @property
    def tampered(self) -> bool:
        return self.tamper is not None

    def apply(self, clip: MediaClip, seed: int = 0) -> MediaClip:
        if self.params is not None:
            return degrade(clip, self.params, seed=seed)
        return apply_tamper(clip, self.tamper)

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind}
        if self.params is not None:
            d["params"] = {k: (str(v) if isinstance(v, Fraction) else v) for k, v in asdict(self.params).items()}
        if self.tamper is not None:
            d["tamper"] = {"kind": self.tamper.kind.value, "start_s": self.tamper.start_s,
                           "duration_s": self.tamper.duration_s, "seed": self.tamper.seed}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> CorpusItem:
        params = tamper = None
        if "params" in d:
            p = dict(d["params"])
            if p.get("target_fps") is not None:
                p["target_fps"] = Fraction(p["target_fps"])
            params = DegradeParams(**p)
        if "tamper" in d:
            t = d["tamper"]
            tamper = TamperSpec(TamperKind(t["kind"]), t["start_s"], t["duration_s"], t.get("seed", 0))
        return cls(d["name"], d["kind"], params, tamper)


def build_control_and_tamper_sets(media, counts=(10, 100, 100), seed: int = 0) -> list[CorpusItem]:
    """Control transcodes plus temporal and spatial tamper specs, deterministic per seed.

    Items are recipes; ``item.apply(clip)`` materialises one. Spatial items
    alternate between frame noise and audio noise.
    """
    clip = _as_clip(media)
    n_control, n_temporal, n_spatial = counts
    dur = min(clip.duration, clip.audio_duration)
    items = [CorpusItem(f"control-{i:03d}", "control", params=p)
             for i, p in enumerate(control_params(n_control, seed))]
    rng = np.random.default_rng([seed, 2])

    def spec(kind, i):
        length = float(rng.uniform(1.0, min(10.0, dur)))
        start = float(rng.uniform(0.0, max(dur - length, 0.0)))
        # truncate to milliseconds so the window stays inside the clip
        return TamperSpec(kind, math.floor(start * 1000) / 1000, math.floor(length * 1000) / 1000,
                          seed=seed * 100000 + i)

    for i in range(n_temporal):
        items.append(CorpusItem(f"temporal-{i:03d}", "temporal", tamper=spec(TamperKind.TEMPORAL_CUT, i)))
    for i in range(n_spatial):
        kind = TamperKind.SPATIAL_NOISE if i % 2 == 0 else TamperKind.AUDIO_NOISE
        items.append(CorpusItem(f"spatial-{i:03d}", "spatial", tamper=spec(kind, n_temporal + i)))
    return items


__all__ = [
    "ArchivePackage", "BlockResult", "ClipSpan", "CorpusItem", "IngestConfig", "IngestQueue", "TchBundle",
    "TemporalContentHasher", "Verdict", "Verifier", "VerifyReport", "augmentation_params", "build_control_and_tamper_sets",
    "bundle_records", "compression_factor", "control_params", "decode_threshold", "encode_threshold",
    "fetch_bundle", "fragment_uid", "ingest", "join_fragments", "split_bundle", "verify",
]
