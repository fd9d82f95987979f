"""Commit and fetch throughput at growing store sizes."""

from __future__ import annotations

import random
import time
from dataclasses import asdict, dataclass

from ..ledger import AuthoritySet, ChainRecord
from .config import NodeConfig
from .core import Node
from .sim import SimClock, SimNetwork


@dataclass(frozen=True)
class BenchRow:
    store_size: int
    commit_tps: float
    fetch_tps: float
    fetch_latency_us: float

    def to_dict(self):
        return asdict(self)


def _decades(n_records: int) -> list[int]:
    sizes, s = [], 10
    while s <= n_records:
        sizes.append(s)
        s *= 10
    return sizes


def batch_bench(n_records: int = 100_000, batch_size: int = 1000, fetch_reads: int = 20_000,
                payload_bytes: int = 64, repeats: int = 3, seed: int = 0) -> list[BenchRow]:
    """Grow one store through every decade ``10 .. n_records``.

    Records go through the node's submit path in batches of ``batch_size``,
    each batch sealed into one block. Commit throughput is records per second
    over the growth to each size; fetch throughput is random reads of stored
    uids at that size, best of ``repeats`` passes.
    """
    rng = random.Random(seed)
    authorities = AuthoritySet.generate(1, seed)
    clock = SimClock()
    net = SimNetwork(clock, seed=seed)
    cfg = NodeConfig(node_id="bench", sealer_index=0, max_block_records=max(batch_size, 1))
    node = Node(cfg, clock, net.transport("bench"), authorities)
    net.add(node)
    cred = authorities.issue_credential(0, "bench")
    payload = bytes(payload_bytes)

    rows, uids = [], []
    for size in _decades(n_records):
        start = time.perf_counter()
        while len(uids) < size:
            step = min(batch_size, size - len(uids))
            for _ in range(step):
                uid = rng.randbytes(16)
                node.submit(ChainRecord(uid, payload, "bench", clock.now_ms(), cred))
                uids.append(uid)
            clock.advance(1)
            node.seal_now()
        commit = time.perf_counter() - start
        added = size - (rows[-1].store_size if rows else 0)
        picks = [uids[rng.randrange(len(uids))] for _ in range(fetch_reads)]
        read = min(_time_reads(node, picks) for _ in range(repeats))
        rows.append(BenchRow(size, added / commit, fetch_reads / read, read / fetch_reads * 1e6))
    return rows


def _time_reads(node, picks) -> float:
    start = time.perf_counter()
    for uid in picks:
        node.fetch(uid)
    return time.perf_counter() - start


def format_report(rows) -> str:
    lines = [f"{'records':>8}  {'commit tx/s':>12}  {'fetch tx/s':>12}  {'fetch us':>9}"]
    for r in rows:
        lines.append(f"{r.store_size:>8}  {r.commit_tps:>12.0f}  {r.fetch_tps:>12.0f}  {r.fetch_latency_us:>9.2f}")
    return "\n".join(lines)
