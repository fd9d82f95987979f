"""Discrete-event network simulation with virtual time and scripted partitions.

Everything is deterministic for a given seed: timers and deliveries are
ordered by ``(time, sequence number)`` and message latencies come from a
seeded generator. Messages cross the simulated wire as encoded ARCP frames.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import random
from dataclasses import dataclass, field

from ..errors import FrameError
from ..ledger import AuthoritySet, ChainRecord, fork_choice
from . import wire
from .config import NodeConfig
from .core import Node

log = logging.getLogger(__name__)


class _Timer:
    __slots__ = ("cancelled",)

    def __init__(self):
        self.cancelled = False

    def cancel(self):
        self.cancelled = True


class SimClock:
    def __init__(self, start_ms: int = 0):
        self._now = start_ms
        self._queue: list = []
        self._seq = itertools.count()

    def now_ms(self) -> int:
        return self._now

    def call_later(self, delay_ms, fn, *args) -> _Timer:
        t = _Timer()
        heapq.heappush(self._queue, (self._now + max(0, int(round(delay_ms))), next(self._seq), t, fn, args))
        return t

    def run_until(self, t_ms: int):
        while self._queue and self._queue[0][0] <= t_ms:
            when, _, timer, fn, args = heapq.heappop(self._queue)
            self._now = when
            if not timer.cancelled:
                fn(*args)
        self._now = max(self._now, t_ms)

    def advance(self, delta_ms: int):
        self.run_until(self._now + delta_ms)


class SimTransport:
    def __init__(self, network: SimNetwork, node_id: str):
        self.network = network
        self.node_id = node_id

    def send(self, peer, msg):
        self.network.deliver(self.node_id, peer, msg)

    def broadcast(self, msg, exclude=None):
        for peer in self.network.neighbours(self.node_id):
            if peer != exclude:
                self.network.deliver(self.node_id, peer, msg)


class SimNetwork:
    """Full mesh whose links can be cut by partitioning nodes into groups."""

    def __init__(self, clock: SimClock, latency_ms=(5, 50), seed: int = 0):
        self.clock = clock
        self.latency_ms = latency_ms
        self.rng = random.Random(seed)
        self.nodes: dict[str, Node] = {}
        self._group: dict[str, int] = {}
        self.dropped = 0

    def transport(self, node_id: str) -> SimTransport:
        return SimTransport(self, node_id)

    def add(self, node: Node):
        self.nodes[node.config.node_id] = node
        self._group[node.config.node_id] = 0

    def connected(self, a: str, b: str) -> bool:
        return a != b and self._group[a] == self._group[b]

    def neighbours(self, node_id: str):
        return [p for p in self.nodes if self.connected(node_id, p)]

    def deliver(self, src: str, dst: str, msg: wire.WireMessage):
        if not self.connected(src, dst):
            self.dropped += 1
            return
        lo, hi = self.latency_ms
        self.clock.call_later(self.rng.uniform(lo, hi), self._arrive, src, dst, msg.encode())

    def _arrive(self, src, dst, frame: bytes):
        if not self.connected(src, dst):
            self.dropped += 1
            return
        node = self.nodes[dst]
        try:
            for msg in wire.decode_frames(frame):
                node.handle(src, msg)
        except FrameError as exc:
            node.metrics["frames_dropped"] += 1
            log.warning("%s dropped a frame from %s: %s", dst, src, exc)

    def partition(self, *groups):
        """Split into the given groups; unlisted nodes join the first group."""
        where = {n: 0 for n in self.nodes}
        for g, members in enumerate(groups):
            for m in members:
                where[m] = g
        self._group = where

    def heal(self):
        before = dict(self._group)
        self._group = {n: 0 for n in self.nodes}
        for a, b in itertools.combinations(sorted(self.nodes), 2):
            if before[a] != before[b]:
                self.nodes[a].on_connect(b)
                self.nodes[b].on_connect(a)


class Simulation:
    """``n`` sealer nodes (plus optional archive-only nodes) on a simulated mesh."""

    def __init__(self, n_sealers: int, seal_interval_ms: int = 1000, seed: int = 0,
                 latency_ms=(5, 50), n_observers: int = 0):
        self.clock = SimClock()
        self.network = SimNetwork(self.clock, latency_ms, seed)
        self.authorities = AuthoritySet.generate(n_sealers, seed)
        self.interval = seal_interval_ms
        for i in range(n_sealers + n_observers):
            cfg = NodeConfig(node_id=f"n{i}", sealer_index=i if i < n_sealers else None,
                             authority_count=n_sealers, authority_seed=str(seed),
                             seal_interval=seal_interval_ms / 1000)
            node = Node(cfg, self.clock, self.network.transport(cfg.node_id), self.authorities)
            self.network.add(node)
        for node in self.nodes:
            node.start()

    @property
    def nodes(self) -> list[Node]:
        return list(self.network.nodes.values())

    def node(self, i: int) -> Node:
        return self.network.nodes[f"n{i}"]

    def run(self, intervals: float):
        self.clock.advance(int(intervals * self.interval))

    def settle(self, phase: float = 0.4):
        """Advance to ``phase`` of the next slot, after in-turn blocks land and before out-of-turn timers fire."""
        now = self.clock.now_ms()
        target = (now // self.interval + 1) * self.interval + int(phase * self.interval)
        self.clock.advance(target - now)

    def credential(self, submitter: str = "client"):
        return self.authorities.issue_credential(0, submitter)

    def record(self, uid: bytes, payload: bytes = b"", submitter: str = "client") -> ChainRecord:
        return ChainRecord(uid, payload, submitter, self.clock.now_ms(), self.credential(submitter))

    def tips(self) -> set[bytes]:
        return {n.store.tip.hash for n in self.nodes}

    def converged(self) -> bool:
        return len(self.tips()) == 1

    def stop(self):
        for n in self.nodes:
            n.stop()


@dataclass
class PartitionOutcome:
    seed: int
    minority: tuple[int, ...]
    partition_intervals: int
    majority_height: int
    minority_height: int
    majority_wins: bool
    converged: bool
    records_kept: bool
    notes: list[str] = field(default_factory=list)

    @property
    def violation(self) -> bool:
        return not (self.majority_wins and self.converged and self.records_kept)


def partition_scenario(seed: int, n_sealers: int = 7, minority_size: int = 3, interval_ms: int = 1000,
                       min_partition: int | None = None) -> PartitionOutcome:
    """Split the sealers, let both sides run, heal, and check who wins.

    The partition lasts between ``2n`` and ``4n`` intervals unless
    ``min_partition`` says otherwise. Records submitted on either side must
    all be on the converged chain afterwards.
    """
    rng = random.Random(seed)
    sim = Simulation(n_sealers, interval_ms, seed=seed, latency_ms=(1, rng.randint(5, 60)))
    minority = tuple(sorted(rng.sample(range(n_sealers), minority_size)))
    majority = tuple(i for i in range(n_sealers) if i not in minority)
    lo = min_partition if min_partition is not None else 2 * n_sealers
    length = rng.randint(lo, max(lo, 4 * n_sealers))

    sim.run(rng.randint(2, 2 * n_sealers) + rng.random())
    sim.network.partition([f"n{i}" for i in majority], [f"n{i}" for i in minority])
    uids = []
    for step in range(length):
        if step % 3 == 0:
            for side in (majority, minority):
                uid = rng.randbytes(16)
                sim.node(rng.choice(side)).submit(sim.record(uid, b"payload"))
                uids.append(uid)
        sim.run(1)
    maj_chain = sim.node(majority[0]).store.canonical_chain()
    min_chain = sim.node(minority[0]).store.canonical_chain()
    wins = fork_choice(maj_chain, min_chain, sim.authorities) is maj_chain
    sim.network.heal()
    sim.run(3 * n_sealers)
    sim.settle()
    maj_tip = maj_chain[-1].hash
    converged = sim.converged() and all(
        n.store.height >= maj_chain[-1].height and n.store.block_at(maj_chain[-1].height).hash == maj_tip
        for n in sim.nodes)
    kept = all(all(u in n.store for u in uids) for n in sim.nodes)
    sim.stop()
    return PartitionOutcome(seed, minority, length, maj_chain[-1].height, min_chain[-1].height,
                            wins, converged, kept)
