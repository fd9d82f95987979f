"""TCP runtime: asyncio connections around a :class:`~tchash.node.core.Node`.

All node state is touched from the event loop thread only, so imports and
sealing are serialised without locks. Outbound links to configured peers
reconnect with exponential backoff.
"""

from __future__ import annotations

import asyncio
import itertools
import logging
import time

from ..errors import (
    DuplicateUid,
    FrameError,
    NotFound,
    Oversize,
    TchError,
    Unauthorized,
)
from ..ledger import ChainRecord
from . import wire
from .config import NodeConfig, parse_addr
from .core import Node, Receipt

log = logging.getLogger(__name__)

BACKOFF_BASE_S = 1.0
BACKOFF_CAP_S = 60.0


def backoff_delays(base: float = BACKOFF_BASE_S, cap: float = BACKOFF_CAP_S):
    """1, 2, 4, ... seconds, capped."""
    delay = base
    while True:
        yield delay
        delay = min(delay * 2, cap)


class AsyncClock:
    """Wall-clock milliseconds, so sealing slots line up across processes."""

    def __init__(self, loop: asyncio.AbstractEventLoop):
        self.loop = loop

    def now_ms(self) -> int:
        return int(time.time() * 1000)

    def call_later(self, delay_ms, fn, *args):
        return self.loop.call_later(max(delay_ms, 0) / 1000.0, fn, *args)


class _Conn:
    def __init__(self, cid: int, writer: asyncio.StreamWriter):
        self.cid = cid
        self.writer = writer
        self.is_peer = False


class TcpTransport:
    def __init__(self):
        self.conns: dict[int, _Conn] = {}

    def send(self, peer, msg):
        conn = self.conns.get(peer)
        if conn is not None and not conn.writer.is_closing():
            conn.writer.write(msg.encode())

    def broadcast(self, msg, exclude=None):
        frame = msg.encode()
        for cid, conn in self.conns.items():
            if conn.is_peer and cid != exclude and not conn.writer.is_closing():
                conn.writer.write(frame)


class NodeServer:
    """One node listening on ``config.listen`` and dialling ``config.peers``."""

    def __init__(self, config: NodeConfig, authorities=None):
        self.config = config
        self.authorities = authorities or config.authorities()
        self.transport = TcpTransport()
        self.node: Node | None = None
        self._server = None
        self._tasks: set[asyncio.Task] = set()
        self._ids = itertools.count(1)

    @property
    def address(self) -> str:
        host, port = self._server.sockets[0].getsockname()[:2]
        return f"{host}:{port}"

    async def start(self):
        loop = asyncio.get_running_loop()
        self.node = Node(self.config, AsyncClock(loop), self.transport, self.authorities)
        host, port = parse_addr(self.config.listen)
        self._server = await asyncio.start_server(self._inbound, host, port)
        for addr in self.config.peers:
            self.connect(addr)
        self.node.start()
        return self

    def connect(self, addr: str):
        task = asyncio.get_running_loop().create_task(self._dial(addr))
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)

    async def _dial(self, addr: str):
        host, port = parse_addr(addr)
        delays = backoff_delays()
        while True:
            try:
                reader, writer = await asyncio.open_connection(host, port)
            except OSError as exc:
                delay = next(delays)
                log.info("%s: connect to %s failed (%s), retry in %.0fs", self.config.node_id, addr, exc, delay)
                await asyncio.sleep(delay)
                continue
            delays = backoff_delays()
            await self._serve(reader, writer)
            await asyncio.sleep(next(delays))

    async def _inbound(self, reader, writer):
        await self._serve(reader, writer)

    async def _serve(self, reader, writer):
        conn = _Conn(next(self._ids), writer)
        self.transport.conns[conn.cid] = conn
        decoder = wire.FrameDecoder()
        self.node.on_connect(conn.cid)
        try:
            while True:
                data = await reader.read(1 << 16)
                if not data:
                    break
                for msg in decoder.feed(data):
                    if msg.kind == wire.Kind.PEER_HELLO:
                        conn.is_peer = True
                    self.node.handle(conn.cid, msg)
        except FrameError as exc:
            self.node.metrics["frames_dropped"] += 1
            log.warning("%s: dropping connection: %s", self.config.node_id, exc)
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        finally:
            self.transport.conns.pop(conn.cid, None)
            writer.close()

    async def stop(self):
        if self.node is not None:
            self.node.stop()
        for task in list(self._tasks):
            task.cancel()
        for conn in list(self.transport.conns.values()):
            conn.writer.close()
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        if self.node is not None:
            self.node.store.close()


async def run_node(config: NodeConfig, stop: asyncio.Event | None = None, metrics_path=None):
    """Run until ``stop`` is set (forever if None); writes metrics on exit."""
    server = await NodeServer(config).start()
    log.info("%s listening on %s", config.node_id, server.address)
    try:
        await (stop.wait() if stop is not None else asyncio.Future())
    finally:
        if metrics_path:
            with open(metrics_path, "w") as fh:
                fh.write(server.node.metrics_dump())
        await server.stop()


# ------------------------------------------------------------------ client

async def _request(addr: str, msg: wire.WireMessage, want: wire.Kind, timeout: float):
    host, port = parse_addr(addr)
    reader, writer = await asyncio.wait_for(asyncio.open_connection(host, port), timeout)
    try:
        writer.write(msg.encode())
        await writer.drain()
        decoder = wire.FrameDecoder()

        async def read():
            while True:
                data = await reader.read(1 << 16)
                if not data:
                    raise ConnectionError(f"{addr} closed the connection")
                for m in decoder.feed(data):
                    if m.kind == want:
                        return m

        return await asyncio.wait_for(read(), timeout)
    finally:
        writer.close()


_ACK_ERRORS = {
    wire.AckStatus.OVERSIZE: Oversize,
    wire.AckStatus.DUPLICATE_UID: DuplicateUid,
    wire.AckStatus.UNAUTHORIZED: Unauthorized,
    wire.AckStatus.INVALID: TchError,
}


async def submit_remote(addr: str, record: ChainRecord, timeout: float = 10.0) -> Receipt:
    m = await _request(addr, wire.submit_record(record), wire.Kind.RECORD_ACK, timeout)
    uid, status, height, detail = wire.parse_record_ack(m.payload)
    if status != wire.AckStatus.ACCEPTED:
        raise _ACK_ERRORS[status](detail)
    return Receipt(uid, height or None)


async def fetch_remote(addr: str, uid: bytes, timeout: float = 10.0) -> ChainRecord:
    m = await _request(addr, wire.record_request(uid), wire.Kind.CHAIN_RESPONSE, timeout)
    _, record = wire.parse_chain_response(m.payload)
    if record is None:
        raise NotFound(f"uid {bytes(uid).hex()} is not on the chain at {addr}")
    return record
