"""Detection metrics over control and tamper sets.

A true positive is a tampered item reported as Tampered; a false positive is
a control transcode reported as Tampered. Ratios with an empty denominator
are ``None`` and print as ``n/a``.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import asdict, dataclass

from .pipeline import CorpusItem, TchBundle, Verifier, compression_factor

LENGTH_BUCKETS = tuple(range(1, 11))


@dataclass(frozen=True)
class ItemResult:
    clip: str
    item: str
    kind: str  # control | temporal | spatial
    tamper_kind: str | None
    tampered: bool
    detected: bool
    clip_duration_s: float
    tamper_s: float | None = None
    compression: float | None = None
    reason: str | None = None

    @property
    def correct(self) -> bool:
        return self.tampered == self.detected

    def to_dict(self):
        return asdict(self)


def evaluate_items(clip_name: str, clip, bundle: TchBundle, artifacts, items, seed: int = 0,
                   keyframe_slack: int = 1) -> list[ItemResult]:
    """Verify every corpus item built from ``clip`` against its record."""
    verifier = artifacts if isinstance(artifacts, Verifier) else Verifier(bundle, artifacts, keyframe_slack)
    out = []
    for k, item in enumerate(items):
        report = verifier.verify(item.apply(clip, seed=seed * 1000 + k))
        out.append(result_for(clip_name, clip.duration, item, report.tampered, report.reason))
    return out


def result_for(clip_name: str, clip_duration: float, item: CorpusItem, detected: bool,
               reason: str | None = None) -> ItemResult:
    return ItemResult(
        clip=clip_name,
        item=item.name,
        kind=item.kind,
        tamper_kind=item.tamper.kind.value if item.tamper else None,
        tampered=item.tampered,
        detected=bool(detected),
        clip_duration_s=float(clip_duration),
        tamper_s=item.tamper.duration_s if item.tamper else None,
        compression=compression_factor(item.params) if item.params else None,
        reason=reason,
    )


def _ratio(num, den):
    return None if den == 0 else num / den


def length_bucket(seconds: float) -> int:
    """Bucket ``k`` holds tamper lengths in ``(k-1, k]`` seconds."""
    return min(max(math.ceil(round(seconds, 6)), 1), LENGTH_BUCKETS[-1])


def summarize(results) -> dict:
    results = list(results)
    tp = sum(r.tampered and r.detected for r in results)
    fn = sum(r.tampered and not r.detected for r in results)
    fp = sum(not r.tampered and r.detected for r in results)
    tn = sum(not r.tampered and not r.detected for r in results)
    precision, recall = _ratio(tp, tp + fp), _ratio(tp, tp + fn)
    f1 = None
    if precision is not None and recall is not None:
        f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)

    by_len = defaultdict(list)
    for r in results:
        if r.tampered:
            by_len[length_bucket(r.tamper_s)].append(r.correct)
    by_clip = defaultdict(list)
    clip_len = {}
    for r in results:
        by_clip[r.clip].append(r.correct)
        clip_len[r.clip] = r.clip_duration_s
    by_comp = defaultdict(list)
    for r in results:
        if not r.tampered:
            by_comp[r.compression].append(not r.detected)
    by_kind = defaultdict(list)
    for r in results:
        by_kind[r.tamper_kind or "control"].append(r.correct)

    return {
        "counts": {"tp": tp, "fp": fp, "tn": tn, "fn": fn, "items": len(results)},
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "tnr": _ratio(tn, tn + fp),
        "accuracy": _ratio(tp + tn, len(results)),
        "accuracy_by_tamper_length": [
            {"bucket_s": k, "n": len(by_len[k]), "accuracy": _ratio(sum(by_len[k]), len(by_len[k]))}
            for k in LENGTH_BUCKETS],
        "accuracy_by_video_length": [
            {"clip": c, "duration_s": clip_len[c], "n": len(v), "accuracy": _ratio(sum(v), len(v))}
            for c, v in sorted(by_clip.items(), key=lambda kv: (clip_len[kv[0]], kv[0]))],
        "tnr_by_compression": [
            {"compression": c, "n": len(v), "tnr": _ratio(sum(v), len(v))}
            for c, v in sorted(by_comp.items(), key=lambda kv: kv[0] or 0.0)],
        "accuracy_by_kind": {k: _ratio(sum(v), len(v)) for k, v in sorted(by_kind.items())},
    }


def _fmt(x, digits=3):
    return "n/a" if x is None else f"{x:.{digits}f}"


def format_summary(report: dict) -> str:
    c = report["counts"]
    lines = [
        f"items {c['items']}  tp {c['tp']}  fp {c['fp']}  tn {c['tn']}  fn {c['fn']}",
        f"precision {_fmt(report['precision'])}  recall {_fmt(report['recall'])}  f1 {_fmt(report['f1'])}"
        f"  tnr {_fmt(report['tnr'])}  accuracy {_fmt(report['accuracy'])}",
        "",
        "accuracy by tamper length",
    ]
    for row in report["accuracy_by_tamper_length"]:
        lines.append(f"  <= {row['bucket_s']:2d} s  n {row['n']:4d}  accuracy {_fmt(row['accuracy'])}")
    lines += ["", "accuracy by video length"]
    for row in report["accuracy_by_video_length"]:
        lines.append(f"  {row['clip']:<24} {row['duration_s']:7.1f} s  n {row['n']:4d}"
                     f"  accuracy {_fmt(row['accuracy'])}")
    lines += ["", "true-negative rate by compression factor"]
    for row in report["tnr_by_compression"]:
        lines.append(f"  {_fmt(row['compression'], 2):>6}  n {row['n']:4d}  tnr {_fmt(row['tnr'])}")
    lines += ["", "accuracy by kind"]
    for k, v in report["accuracy_by_kind"].items():
        lines.append(f"  {k:<14} {_fmt(v)}")
    return "\n".join(lines)
