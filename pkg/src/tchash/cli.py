"""Command-line entry points.

Exit codes: 0 success, 1 user error, 2 media verified as tampered, 3 internal
error. Every subcommand accepts ``--json`` for machine-readable output carrying
the same facts as the human text.

A local archive root (``--out``) holds one directory per package uid plus
``chain/chain.log`` when records are committed without ``--node-addr``, and
``index.json`` mapping media file names to package uids.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import signal
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    LedgerError,
    MediaError,
    MissingRecord,
    ModelHashMismatch,
    NotFound,
    TchError,
)
from .evaluate import evaluate_items, format_summary, summarize
from .ledger import ChainRecord, ChainStore, sha256
from .media import load_media, save_media, synth_clip
from .node import (
    NodeConfig,
    batch_bench,
    fetch_remote,
    format_report,
    load_key_values,
    run_node,
    submit_remote,
)
from .node.core import Node
from .node.sim import SimNetwork
from .pipeline import (
    CorpusItem,
    IngestConfig,
    TchBundle,
    Verifier,
    build_control_and_tamper_sets,
    bundle_records,
    fetch_bundle,
    ingest,
)

EXIT_OK, EXIT_USER, EXIT_TAMPERED, EXIT_INTERNAL = 0, 1, 2, 3
SUBMITTER = "tchash-cli"
TAMPERSET_SUFFIX = ".tamperset.json"


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USER, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------ helpers

def _config_values(args) -> dict:
    return load_key_values(args.config) if args.config else {}


def _node_config(args) -> NodeConfig:
    return NodeConfig.from_mapping(_config_values(args))


def _ingest_config(args) -> IngestConfig:
    values = _config_values(args)
    if args.seed is not None:
        values["seed"] = str(args.seed)
    return IngestConfig.from_mapping(values)


def _uid(text: str | None) -> bytes | None:
    if text is None:
        return None
    try:
        uid = bytes.fromhex(text)
    except ValueError:
        raise UserError(f"uid must be 32 hex digits, got {text!r}") from None
    if len(uid) != 16:
        raise UserError(f"uid must be 32 hex digits, got {text!r}")
    return uid


def _require(args, *names):
    for n in names:
        if getattr(args, n) is None:
            raise UserError(f"--{n.replace('_', '-')} is required for {args.command}")


def _emit(args, facts: dict, text: str):
    if args.json:
        print(json.dumps(facts, indent=2, sort_keys=True, default=str))
    else:
        print(text)


class _WallClock:
    def now_ms(self) -> int:
        return int(time.time() * 1000)

    def call_later(self, delay_ms, fn, *args):
        raise RuntimeError("the local committer does not schedule work")


def _local_node(root: Path, cfg: NodeConfig) -> Node:
    cfg.data_dir = str(root / "chain")
    if cfg.sealer_index is None:
        cfg.sealer_index = 0
    net = SimNetwork(None)
    node = Node(cfg, _WallClock(), net.transport(cfg.node_id))
    net.add(node)
    return node


def _index_path(root: Path) -> Path:
    return root / "index.json"


def _read_index(root: Path) -> dict:
    p = _index_path(root)
    return json.loads(p.read_text()) if p.exists() else {}


def _package_dir(root: Path, uid: bytes) -> Path:
    d = root / uid.hex()
    if not d.is_dir():
        raise UserError(f"no package {uid.hex()} under {root}")
    return d


def _load_bundle(args, root: Path, uid: bytes) -> TchBundle:
    cfg = _node_config(args)
    try:
        if args.node_addr:
            async def remote(u):
                return await fetch_remote(args.node_addr, u)

            return fetch_bundle(lambda u: asyncio.run(remote(u)), uid)
        log = root / "chain" / "chain.log"
        if not log.exists():
            raise MissingRecord(f"no local chain under {root}; commit first or pass --node-addr")
        store = ChainStore(cfg.authorities(), log)
        try:
            return fetch_bundle(store.fetch, uid)
        finally:
            store.close()
    except NotFound as exc:
        raise MissingRecord(f"record {uid.hex()} is not committed: {exc}") from None


# -------------------------------------------------------------- subcommands

def cmd_gen(args) -> int:
    _require(args, "out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed or 0)
    clips = []
    for i in range(args.count):
        duration = float(args.duration) if args.duration else float(rng.integers(60, 301))
        preset = "static" if i % 2 else "dynamic"
        scenes = int(rng.integers(1, 5))
        seed = int(rng.integers(2**31))
        clip = synth_clip(scenes, duration, seed, preset)
        name = f"clip_{i:02d}.arcv"
        save_media(clip, out / name)
        clips.append({"file": name, "duration_s": duration, "preset": preset, "scenes": scenes, "seed": seed})
    (out / "corpus.json").write_text(json.dumps({"clips": clips}, indent=2) + "\n")
    _emit(args, {"out": str(out), "clips": clips},
          "\n".join(f"{c['file']}  {c['duration_s']:.0f} s  {c['preset']}  {c['scenes']} scenes" for c in clips))
    return EXIT_OK


def cmd_ingest(args) -> int:
    _require(args, "media", "out")
    root = Path(args.out)
    media = Path(args.media)
    clip = load_media(media)
    cfg = _ingest_config(args)
    uid = _uid(args.uid) or sha256(b"tchash-uid:%d:" % cfg.seed + media.read_bytes())[:16]
    pkg, bundle = ingest(clip, cfg, out_dir=root, uid=uid, title=media.name)
    index = _read_index(root)
    index[media.name] = uid.hex()
    _index_path(root).write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    facts = {"uid": uid.hex(), "directory": str(pkg.directory), "blocks": bundle.n_blocks,
             "clips": len(bundle.clips), "tch_bits": bundle.tch_bits, "bundle_bytes": len(bundle.to_bytes())}
    _emit(args, facts, f"uid {uid.hex()}\n{bundle.n_blocks} blocks in {len(bundle.clips)} clips, "
                       f"{bundle.tch_bits} code bits, {facts['bundle_bytes']} bundle bytes\n"
                       f"package {pkg.directory}")
    return EXIT_OK


def cmd_commit(args) -> int:
    """Commit a package bundle (split into fragments) or a raw payload file (one record)."""
    _require(args, "uid")
    uid = _uid(args.uid)
    cfg = _node_config(args)
    auth = cfg.authorities()
    cred = auth.issue_credential(cfg.sealer_index or 0, SUBMITTER)
    stamp = 0 if args.seed is not None else int(time.time() * 1000)
    if args.media and Path(args.media).is_file():
        records = [ChainRecord(uid, Path(args.media).read_bytes(), SUBMITTER, stamp, cred)]
    else:
        root = Path(args.out or ".")
        pkg = Path(args.media) if args.media else _package_dir(root, uid)
        data = (pkg / "bundle.tchb").read_bytes()
        records = bundle_records(uid, data, SUBMITTER, cred, stamp)

    heights = []
    if args.node_addr:
        async def submit_all():
            return [await submit_remote(args.node_addr, r) for r in records]

        receipts = asyncio.run(submit_all())
        heights = [r.accepted_at_height for r in receipts]
    else:
        root = Path(args.out or ".")
        node = _local_node(root, cfg)
        try:
            for r in records:
                node.submit(r)
            block = node.seal_now()
            heights = [block.height] * len(records)
        finally:
            node.store.close()
    facts = {"uid": uid.hex(), "records": [r.uid.hex() for r in records], "sizes": [r.size for r in records],
             "heights": heights, "node": args.node_addr}
    text = "\n".join(f"record {r.uid.hex()}  {r.size} bytes  height {h if h is not None else 'pending'}"
                     for r, h in zip(records, heights))
    _emit(args, facts, text)
    return EXIT_OK


def cmd_verify(args) -> int:
    _require(args, "media", "uid")
    uid = _uid(args.uid)
    root = Path(args.out or ".")
    bundle = _load_bundle(args, root, uid)
    report = Verifier(bundle, _package_dir(root, uid)).verify(load_media(args.media))
    _emit(args, {"uid": uid.hex(), **report.to_dict()}, report.format())
    return EXIT_TAMPERED if report.tampered else EXIT_OK


def cmd_tamperset(args) -> int:
    _require(args, "media")
    media = Path(args.media)
    seed = args.seed or 0
    items = build_control_and_tamper_sets(load_media(media), (args.controls, args.temporal, args.spatial), seed)
    out = Path(args.out) if args.out else media.with_name(media.stem + TAMPERSET_SUFFIX)
    if out.suffix != ".json":
        out.mkdir(parents=True, exist_ok=True)
        out = out / (media.stem + TAMPERSET_SUFFIX)
    doc = {"media": media.name, "seed": seed, "items": [it.to_dict() for it in items]}
    out.write_text(json.dumps(doc, indent=2) + "\n")
    if args.materialize:
        clip = load_media(media)
        for k, it in enumerate(items):
            save_media(it.apply(clip, seed=seed * 1000 + k), out.parent / f"{media.stem}.{it.name}.arcv")
    _emit(args, {"tamperset": str(out), "items": len(items)}, f"{len(items)} items written to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    _require(args, "media")
    corpus = Path(args.media)
    root = Path(args.out or ".")
    index = _read_index(root)
    media_files = [corpus] if corpus.is_file() else [m for m in sorted(corpus.glob("*.arcv")) if m.name in index]
    if not media_files:
        raise UserError(f"no ingested media found in {corpus}")
    results = []
    for m in media_files:
        if m.name not in index:
            raise MissingRecord(f"{m.name} has no package in {root}")
        ts = m.with_name(m.stem + TAMPERSET_SUFFIX)
        if not ts.exists():
            raise UserError(f"{ts} is missing; run tamperset first")
        doc = json.loads(ts.read_text())
        items = [CorpusItem.from_dict(d) for d in doc["items"]]
        uid = bytes.fromhex(index[m.name])
        bundle = _load_bundle(args, root, uid)
        verifier = Verifier(bundle, _package_dir(root, uid))
        results += evaluate_items(m.name, load_media(m), bundle, verifier, items, seed=doc.get("seed", 0))
    report = summarize(results)
    _emit(args, {"summary": report, "items": [r.to_dict() for r in results]}, format_summary(report))
    return EXIT_OK


def cmd_node(args) -> int:
    cfg = _node_config(args)
    if args.node_addr:
        cfg.listen = args.node_addr
    if args.out:
        cfg.data_dir = args.out
    metrics = Path(cfg.data_dir or ".") / f"{cfg.node_id}.metrics"

    async def main():
        stop = asyncio.Event()
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            loop.add_signal_handler(sig, stop.set)
        await run_node(cfg, stop, metrics_path=metrics)

    asyncio.run(main())
    text = metrics.read_text() if metrics.exists() else ""
    _emit(args, dict(line.split(" ", 1) for line in text.splitlines()), text.rstrip())
    return EXIT_OK


def cmd_bench(args) -> int:
    rows = batch_bench(n_records=args.records, seed=args.seed or 0)
    facts = {"rows": [r.to_dict() for r in rows]}
    if args.out:
        Path(args.out).write_text(json.dumps(facts, indent=2) + "\n")
    _emit(args, facts, format_report(rows))
    return EXIT_OK


COMMANDS = {
    "gen": (cmd_gen, "generate a synthetic media corpus"),
    "ingest": (cmd_ingest, "train models and hash a media file into an archive package"),
    "commit": (cmd_commit, "commit a package bundle to the ledger"),
    "verify": (cmd_verify, "verify media against its committed record"),
    "tamperset": (cmd_tamperset, "build control and tamper sets for a media file"),
    "node": (cmd_node, "run an archive node"),
    "bench": (cmd_bench, "measure commit and fetch throughput"),
    "evaluate": (cmd_evaluate, "run verification over tamper sets and report metrics"),
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--media", help="media file or corpus directory")
    common.add_argument("--out", help="output file or directory (archive root for ingest/commit/verify)")
    common.add_argument("--seed", type=int, help="seed for reproducible outputs")
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--uid", help="package uid as 32 hex digits")
    common.add_argument("--node-addr", help="host:port of an archive node")
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="tchash", description="Temporal content hashing for archived media.")
    parser.add_argument("--version", action="version", version=f"tchash {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    subs = {name: sub.add_parser(name, parents=[common], help=help_) for name, (_, help_) in COMMANDS.items()}
    subs["gen"].add_argument("--count", type=int, default=12, help="number of clips")
    subs["gen"].add_argument("--duration", type=float, help="clip length in seconds (default: 60 to 300)")
    subs["tamperset"].add_argument("--controls", type=int, default=10)
    subs["tamperset"].add_argument("--temporal", type=int, default=100)
    subs["tamperset"].add_argument("--spatial", type=int, default=100)
    subs["tamperset"].add_argument("--materialize", action="store_true", help="also write every item as media")
    subs["bench"].add_argument("--records", type=int, default=100_000, help="largest store size")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)
    try:
        return COMMANDS[args.command][0](args)
    except (UserError, MissingRecord, ModelHashMismatch, MediaError, LedgerError, TchError,
            FileNotFoundError, ValueError) as exc:
        print(f"tchash {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USER
    except KeyboardInterrupt:
        return EXIT_USER
    except Exception as exc:
        logging.getLogger("tchash").exception("internal error")
        print(f"tchash {args.command}: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
