"""Node state machine, independent of how time passes and bytes move.

A :class:`Node` is driven by three entry points: ``start`` (arms the sealing
timer), ``on_connect`` (a peer link came up) and ``handle`` (a decoded frame
arrived). It talks back through a transport with ``send(peer, msg)`` and
``broadcast(msg, exclude)``, and schedules work through a clock with
``now_ms()`` and ``call_later(delay_ms, fn)``. The simulator and the TCP
runtime each supply their own pair.

Sealing runs on fixed slots of ``seal_interval``. The in-turn authority seals
at the slot boundary; the others wait a rank-dependent delay and seal out of
turn only if no block for the slot has arrived by then.
"""

from __future__ import annotations

import logging
from collections import Counter, deque
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

from ..errors import (
    DuplicateUid,
    FrameError,
    LedgerError,
    NotFound,
    Oversize,
    Unauthorized,
)
from ..ledger import (
    AuthoritySet,
    ChainRecord,
    ChainStore,
    LedgerBlock,
    check_record_size,
)
from . import wire
from .config import NodeConfig

log = logging.getLogger(__name__)


class Clock(Protocol):
    def now_ms(self) -> int: ...

    def call_later(self, delay_ms: float, fn, *args): ...


class Transport(Protocol):
    def send(self, peer, msg: wire.WireMessage) -> None: ...

    def broadcast(self, msg: wire.WireMessage, exclude=None) -> None: ...


@dataclass(frozen=True)
class Receipt:
    uid: bytes
    accepted_at_height: int | None = None


class Node:
    def __init__(self, config: NodeConfig, clock: Clock, transport: Transport,
                 authorities: AuthoritySet | None = None, store: ChainStore | None = None):
        self.config = config
        self.clock = clock
        self.transport = transport
        self.authorities = authorities or config.authorities()
        if store is None:
            path = Path(config.data_dir) / "chain.log" if config.data_dir else None
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
            store = ChainStore(self.authorities, path)
        self.store = store
        self.sealer = config.sealer_index
        self.pool: dict[bytes, ChainRecord] = {}
        self.metrics: Counter = Counter()
        self._orphans: dict[bytes, list[LedgerBlock]] = {}
        self._timers = deque(maxlen=8)  # at most a slot timer and an out-of-turn timer are live
        self._running = False

    # ------------------------------------------------------------ lifecycle

    def start(self):
        self._running = True
        if self.sealer is not None:
            self._schedule_slot()

    def stop(self):
        self._running = False
        for t in self._timers:
            t.cancel()
        self._timers.clear()

    def _later(self, delay_ms, fn, *args):
        self._timers.append(self.clock.call_later(delay_ms, fn, *args))

    def _schedule_slot(self):
        interval = self.config.seal_interval_ms
        now = self.clock.now_ms()
        nxt = (now // interval + 1) * interval
        self._later(nxt - now, self._on_slot, nxt)

    def _on_slot(self, slot_start):
        if not self._running:
            return
        self._schedule_slot()
        n = len(self.authorities)
        rank = (self.sealer - self.authorities.in_turn(self.store.height + 1)) % n
        if rank == 0:
            self._try_seal(slot_start, out_of_turn=False)
        else:
            interval = self.config.seal_interval_ms
            self._later(interval * (0.5 + 0.4 * rank / n), self._try_seal, slot_start, True)

    def _try_seal(self, slot_start, out_of_turn):
        if not self._running or self.store.tip.timestamp_ms >= slot_start:
            return None
        window = self.authorities.recent_window
        if window and self.sealer in self.store.recent_sealers(self.store.tip.hash)[-window:]:
            return None
        if not out_of_turn and self.authorities.in_turn(self.store.height + 1) != self.sealer:
            out_of_turn = True
        return self.seal_now(out_of_turn=out_of_turn)

    def seal_now(self, out_of_turn: bool = False) -> LedgerBlock:
        """Seal the pool on top of the current tip and broadcast the block."""
        if self.sealer is None:
            raise Unauthorized(f"{self.config.node_id} holds no authority key")
        pending = [r for u, r in self.pool.items() if u not in self.store][: self.config.max_block_records]
        block = self.store.seal(pending, self.sealer, self.clock.now_ms(), out_of_turn=out_of_turn)
        self.metrics["blocks_sealed"] += 1
        self._import(block, origin=None)
        return block

    # ---------------------------------------------------------- client API

    def submit(self, record: ChainRecord, origin=None) -> Receipt:
        check_record_size(record, Oversize)
        self.authorities.check_credential(record.submitter, record.credential)
        if record.uid in self.store or record.uid in self.pool:
            raise DuplicateUid(f"uid {record.uid.hex()} already submitted")
        self.pool[record.uid] = record
        self.metrics["records_accepted"] += 1
        self.transport.broadcast(wire.submit_record(record), exclude=origin)
        return Receipt(record.uid)

    def receipt(self, uid: bytes) -> Receipt:
        h = self.store.height_of(uid)
        if h is None and uid not in self.pool:
            raise NotFound(f"uid {bytes(uid).hex()} is unknown")
        return Receipt(uid, h)

    def fetch(self, uid: bytes) -> ChainRecord:
        return self.store.fetch(uid)

    # ------------------------------------------------------------ messages

    def on_connect(self, peer):
        tip = self.store.tip
        self.transport.send(peer, wire.peer_hello(self.config.node_id, tip.height, tip.hash))

    def handle(self, peer, msg: wire.WireMessage):
        """Process one frame; malformed payloads raise :class:`FrameError`."""
        self.metrics["messages_in"] += 1
        kind = msg.kind
        if kind == wire.Kind.SUBMIT_RECORD:
            self._on_submit(peer, msg.payload)
        elif kind == wire.Kind.PROPOSE_BLOCK:
            try:
                block = LedgerBlock.from_bytes(msg.payload)
            except LedgerError as exc:
                raise FrameError(str(exc)) from None
            self._receive_block(block, peer)
        elif kind == wire.Kind.CHAIN_REQUEST:
            self._on_chain_request(peer, msg.payload)
        elif kind == wire.Kind.CHAIN_RESPONSE:
            mode, body = wire.parse_chain_response(msg.payload)
            if mode == 0:
                for block in body:
                    self._receive_block(block, peer)
        elif kind == wire.Kind.PEER_HELLO:
            _, _, tip = wire.parse_peer_hello(msg.payload)
            if not self.store.has_block(tip):
                self.transport.send(peer, wire.chain_request(tip))
        # RecordAck is for clients; nodes ignore it

    def _on_submit(self, peer, payload):
        try:
            record = ChainRecord.from_bytes(payload)
        except LedgerError as exc:
            raise FrameError(str(exc)) from None
        status, detail = wire.AckStatus.ACCEPTED, ""
        try:
            self.submit(record, origin=peer)
        except Oversize as exc:
            status, detail = wire.AckStatus.OVERSIZE, str(exc)
        except DuplicateUid as exc:
            # mostly gossip echoes of records already pooled
            status, detail = wire.AckStatus.DUPLICATE_UID, str(exc)
            self.metrics["records_duplicate"] += 1
        except Unauthorized as exc:
            status, detail = wire.AckStatus.UNAUTHORIZED, str(exc)
        if status not in (wire.AckStatus.ACCEPTED, wire.AckStatus.DUPLICATE_UID):
            self.metrics["records_rejected"] += 1
        height = self.store.height_of(record.uid) or 0
        self.transport.send(peer, wire.record_ack(record.uid, status, height, detail))

    def _on_chain_request(self, peer, payload):
        mode, key, limit = wire.parse_chain_request(payload)
        if mode == 1:
            try:
                rec = self.store.fetch(key)
            except NotFound:
                rec = None
            self.transport.send(peer, wire.record_response(rec))
            return
        blocks = []
        if self.store.has_block(key):
            b = self.store.block(key)
            while b.height > 0 and len(blocks) < max(limit, 1):
                blocks.append(b)
                b = self.store.block(b.parent_hash)
        self.transport.send(peer, wire.chain_response(blocks[::-1]))

    # -------------------------------------------------------------- blocks

    def _receive_block(self, block: LedgerBlock, peer):
        if self.store.has_block(block.hash):
            return
        if not self.store.has_block(block.parent_hash):
            waiting = self._orphans.setdefault(block.parent_hash, [])
            if all(b.hash != block.hash for b in waiting):
                waiting.append(block)
            self.transport.send(peer, wire.chain_request(block.parent_hash))
            return
        self._import(block, origin=peer)

    def _import(self, block: LedgerBlock, origin):
        try:
            result = self.store.import_block(block)
        except LedgerError as exc:
            self.metrics["blocks_invalid"] += 1
            log.warning("%s rejected block %d: %s", self.config.node_id, block.height, exc)
            return
        self.metrics["blocks_imported"] += 1
        if result.reorged:
            self.metrics["reorgs"] += 1
            for r in result.dropped:
                self.pool.setdefault(r.uid, r)
        if result.canonical:
            for uid in [u for u in self.pool if u in self.store]:
                del self.pool[uid]
        self.transport.broadcast(wire.propose_block(block), exclude=origin)
        for child in self._orphans.pop(block.hash, []):
            self._import(child, origin)

    # ------------------------------------------------------------- metrics

    def metrics_dump(self) -> str:
        values = dict(self.metrics)
        values.update(height=self.store.height, total_difficulty=self.store.total_difficulty,
                      records=len(self.store), pool=len(self.pool),
                      orphans=sum(len(v) for v in self._orphans.values()))
        return "\n".join(f"{k} {values[k]}" for k in sorted(values)) + "\n"
