import itertools
from fractions import Fraction

import numpy as np
import pytest
from conftest import paper_has

from tchash.errors import ModelHashMismatch, TruncatedPayload
from tchash.ledger import MAX_RECORD_BYTES, AuthoritySet, ChainStore
from tchash.media import (
    DegradeParams,
    MediaClip,
    TamperKind,
    TamperSpec,
    apply_tamper,
    degrade,
    synth_clip,
)
from tchash.pipeline import (
    ARTIFACTS,
    AUDIO,
    CONTROL_GRID,
    ENVELOPE,
    TEMPORAL_STRUCTURE,
    TRAIN_GRID,
    VISUAL,
    ClipSpan,
    CorpusItem,
    IngestConfig,
    IngestQueue,
    TchBundle,
    TemporalContentHasher,
    Verifier,
    augmentation_params,
    build_control_and_tamper_sets,
    bundle_records,
    compression_factor,
    control_params,
    decode_threshold,
    encode_threshold,
    fetch_bundle,
    fragment_uid,
    ingest,
    join_fragments,
    load_artifacts,
    split_bundle,
    verify,
)

SMALL = IngestConfig(hidden_encoder=16, hidden_decoder=16, n_augment=4, max_epochs=1)


def fake_bundle(n_blocks, seed=0):
    rng = np.random.default_rng(seed)
    clips = [ClipSpan(0, 300 * n_blocks, 0)]
    codes = {VISUAL: rng.integers(0, 256, (n_blocks, 32), dtype=np.uint8),
             AUDIO: rng.integers(0, 256, (n_blocks, 32), dtype=np.uint8)}
    thr = {m: rng.integers(0, 1 << 32, n_blocks, dtype=np.uint64).astype(np.uint32) for m in (VISUAL, AUDIO)}
    digests = {k: bytes([i]) * 32 for i, k in enumerate(ARTIFACTS)}
    return TchBundle(300 * n_blocks, clips, codes, thr, digests)


class TestThresholdEncoding:
    @pytest.mark.parametrize("x", [0.0, 1e-9, 0.5, 1 / 3, 2.0, 123.456789, 65535.9])
    def test_strictly_above(self, x):
        raw = encode_threshold(x)
        assert decode_threshold(raw) > x
        assert decode_threshold(raw) - x <= 2 ** -16

    def test_saturates(self):
        assert encode_threshold(1e12) == 2 ** 32 - 1

    def test_rejects_negative_and_nan(self):
        with pytest.raises(ValueError):
            encode_threshold(-1.0)
        with pytest.raises(ValueError):
            encode_threshold(float("nan"))


class TestBundle:
    def test_roundtrip(self):
        b = fake_bundle(5)
        again = TchBundle.from_bytes(b.to_bytes())
        assert again.to_bytes() == b.to_bytes()
        assert again.clips == b.clips and again.digests == b.digests
        assert b.tch_bits == 5 * 2 * 256

    def test_layout_size(self):
        b = fake_bundle(3)
        assert len(b.to_bytes()) == 18 + 4 * 32 + 10 + 3 * (32 + 32 + 8)

    def test_truncated(self):
        with pytest.raises(TruncatedPayload):
            TchBundle.from_bytes(fake_bundle(2).to_bytes()[:-1])

    def test_fragments_for_oversized_bundle(self):
        data = fake_bundle(600).to_bytes()
        assert len(data) > MAX_RECORD_BYTES
        uid = bytes(range(16))
        frags = split_bundle(uid, data, "alice")
        assert len(frags) == 2
        assert frags[0][0] == uid and frags[1][0] == fragment_uid(uid, 1) != uid
        records = bundle_records(uid, data, "alice")
        assert all(r.size <= MAX_RECORD_BYTES for r in records)
        assert join_fragments([p for _, p in reversed(frags)]) == data
        with pytest.raises(TruncatedPayload):
            join_fragments([frags[0][1]])

    def test_fragments_commit_and_reassemble(self):
        auth = AuthoritySet.generate(1)
        store = ChainStore(auth)
        uid = b"u" * 16
        bundle = fake_bundle(1000)
        cred = auth.issue_credential(0, "alice")
        records = bundle_records(uid, bundle, "alice", cred)
        assert len(records) == 3
        store.import_block(store.seal(records, 0, 1))
        assert fetch_bundle(store.fetch, uid).to_bytes() == bundle.to_bytes()

    def test_small_bundle_is_one_record(self):
        assert len(split_bundle(b"u" * 16, fake_bundle(4).to_bytes())) == 1


class TestGrids:
    def test_envelope_first(self):
        params = augmentation_params(12, seed=3)
        assert params[0] == ENVELOPE and len(params) == 12

    def test_training_copies_cover_grid(self):
        params = augmentation_params(12, seed=0)
        for knob, values in TRAIN_GRID.items():
            used = {getattr(p, knob) for p in params}
            assert {Fraction(v) if knob == "target_fps" else v for v in values} <= used

    def test_control_disjoint_from_training(self):
        for knob in ("visual_quant_step", "noise_sigma", "audio_bits", "audio_rate"):
            assert not set(TRAIN_GRID[knob]) & set(CONTROL_GRID[knob])
        train = {tuple(v) for v in itertools.product(*TRAIN_GRID.values())}
        for p in control_params(200, seed=1):
            key = (p.visual_quant_step, p.blur_radius, p.noise_sigma, int(p.target_fps), p.audio_bits,
                   p.audio_rate)
            assert key not in train
            assert p.visual_quant_step in CONTROL_GRID["visual_quant_step"]

    def test_compression_factor(self):
        assert compression_factor(DegradeParams()) == 1.0
        assert compression_factor(DegradeParams(visual_quant_step=16, audio_bits=8)) == 2.0


class TestCorpus:
    def test_counts_from_paper(self):
        assert paper_has(r"10 duplicates") and paper_has(r"100 videos")
        clip = synth_clip(1, 30, 0)
        items = build_control_and_tamper_sets(clip, (10, 100, 100), seed=4)
        kinds = [i.kind for i in items]
        assert kinds.count("control") == 10 and kinds.count("temporal") == 100 and kinds.count("spatial") == 100

    def test_properties(self):
        clip = synth_clip(1, 30, 0)
        items = build_control_and_tamper_sets(clip, (10, 100, 100), seed=4)
        for it in items:
            if it.kind == "control":
                assert it.tamper is None and not it.tampered
            else:
                assert 1.0 <= it.tamper.duration_s <= 10.0
                assert it.tamper.start_s + it.tamper.duration_s <= clip.duration
            if it.kind == "temporal":
                assert it.tamper.kind is TamperKind.TEMPORAL_CUT
        assert {i.tamper.kind for i in items if i.kind == "spatial"} == {TamperKind.SPATIAL_NOISE,
                                                                         TamperKind.AUDIO_NOISE}
        again = build_control_and_tamper_sets(clip, (10, 100, 100), seed=4)
        assert [i.to_dict() for i in again] == [i.to_dict() for i in items]
        assert [CorpusItem.from_dict(i.to_dict()) for i in items] == items

    def test_items_apply(self):
        clip = synth_clip(1, 12, 0)
        for it in build_control_and_tamper_sets(clip, (2, 2, 2), seed=1):
            out = it.apply(clip, seed=3)
            assert isinstance(out, MediaClip)


@pytest.fixture(scope="module")
def hashed():
    clip = synth_clip(2, 40, seed=5)
    return clip, TemporalContentHasher(IngestConfig()).fit(clip)


class TestIngestAndVerify:
    def test_structure(self, hashed):
        _, h = hashed
        b = h.bundle_
        assert b.n_keyframes == 400
        assert [(c.start, c.end) for c in b.clips] == [(0, 200), (200, 400)]
        assert b.n_blocks == 2
        assert len(b.to_bytes()) <= MAX_RECORD_BYTES

    def test_original_is_intact(self, hashed):
        clip, h = hashed
        report = h.verify(clip)
        assert str(report.verdict) == "Intact"
        assert all(r.distance <= r.threshold for r in report.results)
        assert len(report.results) == 2 * h.bundle_.n_blocks

    def test_training_transcodes_are_intact(self, hashed):
        clip, h = hashed
        cfg = IngestConfig()
        for i, p in enumerate(h.augmentations_):
            assert not h.verify(degrade(clip, p, seed=cfg.seed * 1000 + i)).tampered, p

    def test_thresholds_cover_training_positives(self, hashed):
        _, h = hashed
        for m in (VISUAL, AUDIO):
            assert np.all(decode_threshold(h.bundle_.thresholds[m]) > h.epsilon_[m])

    def test_spatial_noise_fails_an_overlapping_block(self, hashed):
        clip, h = hashed
        spec = TamperSpec(TamperKind.SPATIAL_NOISE, 24.0, 5.0, seed=2)
        report = h.verify(apply_tamper(clip, spec))
        assert report.tampered
        assert any(r.start_s < 29.0 and r.end_s > 24.0 for r in report.failures)

    def test_extended_clip_is_temporal_structure(self, hashed):
        clip, h = hashed
        longer = MediaClip(np.concatenate([clip.frames, clip.frames[:20]]), clip.frame_rate,
                           np.concatenate([clip.audio, clip.audio[:16000]]), clip.sample_rate)
        report = h.verify(longer)
        assert report.tampered and report.reason == TEMPORAL_STRUCTURE

    def test_block_sized_cut_changes_structure(self, hashed):
        clip, h = hashed
        short = MediaClip(clip.frames[:100], clip.frame_rate, clip.audio[:80000], clip.sample_rate)
        report = h.verify(short)
        assert report.tampered and report.reason == TEMPORAL_STRUCTURE

    def test_predict(self, hashed):
        clip, h = hashed
        assert h.predict(clip).tolist() == ["Intact"]

    def test_model_hash_mismatch(self, hashed):
        clip, h = hashed
        artifacts = dict(h.artifacts_)
        Verifier(h.bundle_, artifacts)
        blob = bytearray(artifacts["pq_a"])
        blob[-1] ^= 1
        artifacts["pq_a"] = bytes(blob)
        with pytest.raises(ModelHashMismatch):
            verify(clip, h.bundle_.to_bytes(), artifacts)


class TestIngest:
    def test_deterministic_and_package_layout(self, tmp_path):
        clip = synth_clip(1, 10, seed=2)
        uid = b"k" * 16
        pkg, b1 = ingest(clip, SMALL, tmp_path / "a", uid=uid)
        _, b2 = ingest(clip, SMALL, tmp_path / "b", uid=uid)
        assert b1.to_bytes() == b2.to_bytes()
        assert b1.n_blocks == 1
        assert b1.codes[VISUAL].shape == b1.codes[AUDIO].shape == (1, 32)
        names = sorted(p.name for p in pkg.directory.iterdir())
        assert names == sorted([*ARTIFACTS.values(), "media.arcv", "bundle.tchb", "record.json"])
        assert pkg.directory.name == uid.hex()
        report = verify(pkg.files["media"], (pkg.directory / "bundle.tchb").read_bytes(),
                        load_artifacts(pkg.directory))
        assert not report.tampered

    def test_single_scene_minute_is_1024_bits(self):
        assert paper_has(r"approximately 1024 bits per minute")
        _, bundle = ingest(synth_clip(1, 60, seed=7), SMALL)
        assert bundle.n_blocks == 2
        assert bundle.tch_bits == 1024

    def test_queue(self, tmp_path):
        queue = IngestQueue(workers=1)
        fut = queue.submit(synth_clip(1, 5, 1), SMALL, tmp_path, uid=b"q" * 16)
        pkg, bundle = fut.result(timeout=300)
        queue.shutdown()
        assert bundle.n_blocks == 1 and pkg.directory.exists()

    def test_config_from_mapping(self):
        cfg = IngestConfig.from_mapping({"seed": "3", "margin": "0.3", "bandwidth": "none", "other": "x"})
        assert cfg.seed == 3 and cfg.margin == 0.3 and cfg.bandwidth is None
        with pytest.raises(ValueError):
            IngestConfig(n_augment=1)
