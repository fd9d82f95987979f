"""Append-only record chain with Merkle-committed blocks and authority sealing.

Serialization (all integers little-endian)::

    record  = uid[16] | u16 len | submitter utf-8 | u64 time_ms
              | u16 issuer | mac[32] | u32 len | payload
    header  = u64 height | parent[32] | u64 timestamp_ms | u16 sealer | root[32]
    block   = header | seal[32] | u32 count | (u32 len | record)*

``seal`` is HMAC-SHA256 of the header under the sealer's key and the block
hash is SHA-256 of the whole block. Sealer ``height mod n`` is in turn and its
blocks weigh 2; any other authority may seal out of turn with weight 1, but
no authority may seal twice within ``n // 2 + 1`` consecutive blocks.
"""

from __future__ import annotations

import hashlib
import hmac
import os
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

from .errors import (
    BadParent,
    BadRoot,
    BadSeal,
    BadTimestamp,
    DisjointGenesis,
    DuplicateUid,
    LedgerError,
    NotFound,
    NotInTurn,
    Oversize,
    RecentlySealed,
    RecordTooLarge,
    Unauthorized,
    UnauthorizedSealer,
)

MAX_RECORD_BYTES = 32768
MAX_SUBMITTER_BYTES = 64
UID_BYTES = 16
ZERO_HASH = bytes(32)

_HEADER = struct.Struct("<Q32sQH32s")
_CRED_CONTEXT = b"tchash-submit:"


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def merkle_root(records) -> bytes:
    """Binary Merkle root over ``sha256`` leaves; odd levels repeat the last node."""
    level = [sha256(bytes(r)) for r in records]
    if not level:
        return sha256(b"")
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        level = [sha256(level[i] + level[i + 1]) for i in range(0, len(level), 2)]
    return level[0]


# ------------------------------------------------------------- authorities

@dataclass(frozen=True)
class AuthoritySet:
    """Ordered sealer ids with their pre-shared 32-byte keys."""

    ids: tuple[str, ...]
    keys: tuple[bytes, ...]

    def __post_init__(self):
        if not self.ids:
            raise ValueError("authority set needs at least one sealer")
        if len(self.ids) != len(self.keys):
            raise ValueError("one key per sealer is required")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("sealer ids must be unique")
        if any(len(k) != 32 for k in self.keys):
            raise ValueError("sealer keys must be 32 bytes")

    @classmethod
    def generate(cls, n: int, seed: bytes | int = 0, prefix: str = "sealer") -> AuthoritySet:
        """Deterministic keys derived from ``seed``, for tests and simulations."""
        base = seed if isinstance(seed, bytes) else str(seed).encode()
        ids = tuple(f"{prefix}{i}" for i in range(n))
        keys = tuple(sha256(b"authority-key:" + base + b":" + i.encode()) for i in ids)
        return cls(ids, keys)

    def __len__(self):
        return len(self.ids)

    @property
    def majority(self) -> int:
        return len(self.ids) // 2 + 1

    @property
    def recent_window(self) -> int:
        """Number of preceding blocks a sealer must not appear in."""
        return len(self.ids) // 2

    def index(self, sealer: str | int) -> int:
        if isinstance(sealer, int):
            if not 0 <= sealer < len(self.ids):
                raise UnauthorizedSealer(f"sealer index {sealer} outside the authority set")
            return sealer
        try:
            return self.ids.index(sealer)
        except ValueError:
            raise UnauthorizedSealer(f"{sealer!r} is not an authority") from None

    def in_turn(self, height: int) -> int:
        return height % len(self.ids)

    def issue_credential(self, issuer: str | int, submitter: str) -> Credential:
        i = self.index(issuer)
        return Credential(i, hmac.new(self.keys[i], _CRED_CONTEXT + submitter.encode(), hashlib.sha256).digest())

    def check_credential(self, submitter: str, cred: Credential) -> None:
        if not 0 <= cred.issuer < len(self.ids):
            raise Unauthorized(f"credential issuer {cred.issuer} is not an authority")
        want = hmac.new(self.keys[cred.issuer], _CRED_CONTEXT + submitter.encode(), hashlib.sha256).digest()
        if not hmac.compare_digest(want, cred.mac):
            raise Unauthorized(f"credential for {submitter!r} does not verify")


@dataclass(frozen=True)
class Credential:
    issuer: int
    mac: bytes


# ----------------------------------------------------------------- records

@dataclass(frozen=True)
class ChainRecord:
    uid: bytes
    payload: bytes
    submitter: str = ""
    time_ms: int = 0
    credential: Credential = Credential(0, bytes(32))

    def to_bytes(self) -> bytes:
        sub = self.submitter.encode()
        if len(self.uid) != UID_BYTES:
            raise ValueError("uid must be 16 bytes")
        if len(sub) > MAX_SUBMITTER_BYTES:
            raise ValueError(f"submitter id longer than {MAX_SUBMITTER_BYTES} bytes")
        return b"".join([
            self.uid,
            struct.pack("<H", len(sub)), sub,
            struct.pack("<QH", self.time_ms, self.credential.issuer), self.credential.mac,
            struct.pack("<I", len(self.payload)), self.payload,
        ])

    @property
    def size(self) -> int:
        return record_overhead(self.submitter) + len(self.payload)

    @classmethod
    def from_bytes(cls, data: bytes) -> ChainRecord:
        try:
            uid = data[:16]
            (n,) = struct.unpack_from("<H", data, 16)
            sub = data[18:18 + n].decode()
            pos = 18 + n
            t, issuer = struct.unpack_from("<QH", data, pos)
            mac = data[pos + 10:pos + 42]
            (m,) = struct.unpack_from("<I", data, pos + 42)
            payload = data[pos + 46:pos + 46 + m]
        except (struct.error, UnicodeDecodeError) as exc:
            raise LedgerError(f"malformed record: {exc}") from None
        if len(uid) != 16 or len(mac) != 32 or len(payload) != m or pos + 46 + m != len(data):
            raise LedgerError("malformed record: length fields disagree with data")
        return cls(uid, payload, sub, t, Credential(issuer, mac))


def record_overhead(submitter: str = "") -> int:
    """Serialized bytes a record spends beyond its payload."""
    return UID_BYTES + 2 + len(submitter.encode()) + 10 + 32 + 4


def check_record_size(record: ChainRecord, exc=RecordTooLarge) -> None:
    if record.size > MAX_RECORD_BYTES:
        raise exc(f"record {record.uid.hex()} is {record.size} bytes, limit {MAX_RECORD_BYTES}")


# ------------------------------------------------------------------ blocks

@dataclass(frozen=True)
class LedgerBlock:
    height: int
    parent_hash: bytes
    timestamp_ms: int
    sealer: int
    records_root: bytes
    records: tuple[ChainRecord, ...]
    seal: bytes

    def header_bytes(self) -> bytes:
        return _HEADER.pack(self.height, self.parent_hash, self.timestamp_ms, self.sealer, self.records_root)

    def to_bytes(self) -> bytes:
        parts = [self.header_bytes(), self.seal, struct.pack("<I", len(self.records))]
        for r in self.records:
            raw = r.to_bytes()
            parts.append(struct.pack("<I", len(raw)))
            parts.append(raw)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> LedgerBlock:
        try:
            height, parent, ts, sealer, root = _HEADER.unpack_from(data)
            pos = _HEADER.size
            seal = data[pos:pos + 32]
            (count,) = struct.unpack_from("<I", data, pos + 32)
            pos += 36
            records = []
            for _ in range(count):
                (n,) = struct.unpack_from("<I", data, pos)
                chunk = data[pos + 4:pos + 4 + n]
                if len(chunk) != n:
                    raise LedgerError("malformed block: truncated record")
                records.append(ChainRecord.from_bytes(chunk))
                pos += 4 + n
        except struct.error as exc:
            raise LedgerError(f"malformed block: {exc}") from None
        if pos != len(data) or len(seal) != 32:
            raise LedgerError("malformed block: trailing or missing bytes")
        return cls(height, parent, ts, sealer, root, tuple(records), seal)

    @cached_property
    def hash(self) -> bytes:
        return sha256(self.to_bytes())

    def weight(self, authorities: AuthoritySet) -> int:
        return 2 if self.sealer == authorities.in_turn(self.height) else 1


def _seal(key: bytes, header: bytes) -> bytes:
    return hmac.new(key, header, hashlib.sha256).digest()


def genesis_block(authorities: AuthoritySet, timestamp_ms: int = 0) -> LedgerBlock:
    """Height-0 block sealed by authority 0; identical on every node."""
    root = merkle_root([])
    head = _HEADER.pack(0, ZERO_HASH, timestamp_ms, 0, root)
    return LedgerBlock(0, ZERO_HASH, timestamp_ms, 0, root, (), _seal(authorities.keys[0], head))


def seal_block(parent: LedgerBlock, pending, sealer, authorities: AuthoritySet, now_ms: int, *,
               out_of_turn: bool = False, recent_sealers=(), known_uids=None) -> LedgerBlock:
    """Seal ``pending`` records on top of ``parent``.

    Without ``out_of_turn`` only the in-turn authority may seal. ``recent_sealers``
    are the sealer indices of the preceding blocks, newest last; ``known_uids``
    is a container of uids already on the branch.
    """
    idx = authorities.index(sealer)
    height = parent.height + 1
    if idx != authorities.in_turn(height) and not out_of_turn:
        raise NotInTurn(f"sealer {idx} is not in turn at height {height}")
    _check_recent(idx, recent_sealers, authorities)
    records = tuple(pending)
    seen = set()
    for r in records:
        check_record_size(r)
        if r.uid in seen or (known_uids is not None and r.uid in known_uids):
            raise DuplicateUid(f"uid {r.uid.hex()} already recorded")
        seen.add(r.uid)
    ts = max(int(now_ms), parent.timestamp_ms)
    root = merkle_root([r.to_bytes() for r in records])
    head = _HEADER.pack(height, parent.hash, ts, idx, root)
    return LedgerBlock(height, parent.hash, ts, idx, root, records, _seal(authorities.keys[idx], head))


def _check_recent(idx, recent_sealers, authorities):
    window = authorities.recent_window
    if window and idx in list(recent_sealers)[-window:]:
        raise RecentlySealed(f"sealer {idx} sealed one of the last {window} blocks")


def validate_block(parent: LedgerBlock, block: LedgerBlock, authorities: AuthoritySet, *,
                   recent_sealers=(), known_uids=None) -> None:
    """Raise the first rule ``block`` breaks as a child of ``parent``."""
    if block.parent_hash != parent.hash or block.height != parent.height + 1:
        raise BadParent(f"block {block.height} does not extend {parent.height}")
    if block.timestamp_ms < parent.timestamp_ms:
        raise BadTimestamp("block timestamp precedes its parent")
    if not 0 <= block.sealer < len(authorities):
        raise UnauthorizedSealer(f"sealer index {block.sealer} outside the authority set")
    if not hmac.compare_digest(_seal(authorities.keys[block.sealer], block.header_bytes()), block.seal):
        find_sealer(authorities, block)  # raises UnauthorizedSealer for a foreign key
        raise BadSeal(f"seal on block {block.height} does not verify for sealer {block.sealer}")
    if merkle_root([r.to_bytes() for r in block.records]) != block.records_root:
        raise BadRoot(f"records root mismatch in block {block.height}")
    seen = set()
    for r in block.records:
        check_record_size(r, Oversize)
        if r.uid in seen or (known_uids is not None and r.uid in known_uids):
            raise DuplicateUid(f"uid {r.uid.hex()} already recorded")
        seen.add(r.uid)
    _check_recent(block.sealer, recent_sealers, authorities)


def find_sealer(authorities: AuthoritySet, block: LedgerBlock) -> int:
    """Index of the authority whose key verifies ``block``'s seal."""
    for i, key in enumerate(authorities.keys):
        if hmac.compare_digest(_seal(key, block.header_bytes()), block.seal):
            return i
    raise UnauthorizedSealer("seal matches no authority key")


def total_difficulty(chain, authorities: AuthoritySet) -> int:
    return sum(b.weight(authorities) for b in chain)


def fork_choice(chain_a, chain_b, authorities: AuthoritySet):
    """Heavier chain wins; equal weight goes to the lower tip hash."""
    if not chain_a or not chain_b or chain_a[0].hash != chain_b[0].hash:
        raise DisjointGenesis("chains do not share a genesis block")
    ta, tb = total_difficulty(chain_a, authorities), total_difficulty(chain_b, authorities)
    if ta != tb:
        return chain_a if ta > tb else chain_b
    return chain_a if chain_a[-1].hash <= chain_b[-1].hash else chain_b


def verify_chain(chain, authorities: AuthoritySet) -> None:
    """Re-validate every link of a serialized chain from genesis."""
    if not chain or chain[0] != genesis_block(authorities, chain[0].timestamp_ms):
        raise BadParent("chain does not start at the expected genesis")
    uids: set[bytes] = set()
    for i in range(1, len(chain)):
        recent = [b.sealer for b in chain[max(1, i - authorities.recent_window):i]]
        validate_block(chain[i - 1], chain[i], authorities, recent_sealers=recent, known_uids=uids)
        uids.update(r.uid for r in chain[i].records)


# ------------------------------------------------------------------- store

@dataclass
class ImportResult:
    block_hash: bytes
    canonical: bool
    reorged: bool = False
    dropped: list = field(default_factory=list)  # records no longer canonical


class ChainStore:
    """Block tree with a canonical chain and a uid index over it.

    Every imported block is appended to the log file (when ``path`` is set)
    and replayed through full validation on reopen. ``flush`` mirrors the
    canonical uid index to an ``.idx`` sidecar (tip hash, then fixed-size
    ``uid | u64 height | u32 position`` entries) for external readers.
    """

    def __init__(self, authorities: AuthoritySet, path=None, genesis: LedgerBlock | None = None):
        self.authorities = authorities
        self.genesis = genesis or genesis_block(authorities)
        gh = self.genesis.hash
        self._blocks: dict[bytes, LedgerBlock] = {gh: self.genesis}
        self._td: dict[bytes, int] = {gh: self.genesis.weight(authorities)}
        self._canonical: list[bytes] = [gh]
        self._index: dict[bytes, tuple[int, int, ChainRecord]] = {}
        self._path = Path(path) if path else None
        if self._path is not None:
            self._open_log()

    # persistence

    def _open_log(self):
        log, idx = self._path, self._path.with_suffix(self._path.suffix + ".idx")
        if log.exists():
            data = log.read_bytes()
            pos = 0
            while pos + 4 <= len(data):
                (n,) = struct.unpack_from("<I", data, pos)
                if pos + 4 + n > len(data):
                    break  # torn tail write
                self._import(LedgerBlock.from_bytes(data[pos + 4:pos + 4 + n]), persist=False)
                pos += 4 + n
            if pos != len(data):
                with open(log, "r+b") as fh:
                    fh.truncate(pos)
        self._log = open(log, "ab")
        self._sidecar_path = idx

    def flush(self):
        """Write the index sidecar for the current tip."""
        if self._path is None:
            return
        self._log.flush()
        entry = struct.Struct("<16sQI")
        tmp = self._sidecar_path.with_suffix(".tmp")
        with open(tmp, "wb") as fh:
            fh.write(self.tip.hash)
            fh.write(b"".join(entry.pack(u, h, i) for u, (h, i, _) in self._index.items()))
        os.replace(tmp, self._sidecar_path)

    def close(self):
        if self._path is not None:
            self.flush()
            self._log.close()

    # queries

    @property
    def tip(self) -> LedgerBlock:
        return self._blocks[self._canonical[-1]]

    @property
    def height(self) -> int:
        return len(self._canonical) - 1

    @property
    def total_difficulty(self) -> int:
        return self._td[self._canonical[-1]]

    def __len__(self):
        return len(self._index)

    def __contains__(self, uid) -> bool:
        return uid in self._index

    def has_block(self, block_hash: bytes) -> bool:
        return block_hash in self._blocks

    def block(self, block_hash: bytes) -> LedgerBlock:
        return self._blocks[block_hash]

    def block_at(self, height: int) -> LedgerBlock:
        return self._blocks[self._canonical[height]]

    def canonical_chain(self) -> list[LedgerBlock]:
        return [self._blocks[h] for h in self._canonical]

    def fetch(self, uid: bytes) -> ChainRecord:
        try:
            return self._index[uid][2]
        except KeyError:
            raise NotFound(f"uid {bytes(uid).hex()} is not on the chain") from None

    def height_of(self, uid: bytes) -> int | None:
        """Height of the canonical block holding ``uid``, or None."""
        loc = self._index.get(uid)
        return None if loc is None else loc[0]

    def recent_sealers(self, block_hash: bytes) -> list[int]:
        """Sealers of ``block_hash`` and its ancestors inside the recent window, oldest first."""
        out = []
        b = self._blocks[block_hash]
        while len(out) < self.authorities.recent_window and b.height > 0:
            out.append(b.sealer)
            b = self._blocks[b.parent_hash]
        return out[::-1]

    def branch_uids(self, block_hash: bytes):
        """Uids recorded on the branch ending at ``block_hash``."""
        return _BranchUids(self, block_hash)

    def ancestry(self, block_hash: bytes) -> list[LedgerBlock]:
        chain = []
        b = self._blocks[block_hash]
        while True:
            chain.append(b)
            if b.height == 0:
                break
            b = self._blocks[b.parent_hash]
        return chain[::-1]

    # mutation

    def seal(self, pending, sealer, now_ms: int, *, out_of_turn=False) -> LedgerBlock:
        parent = self.tip
        return seal_block(parent, pending, sealer, self.authorities, now_ms, out_of_turn=out_of_turn,
                          recent_sealers=self.recent_sealers(parent.hash), known_uids=self._index)

    def import_block(self, block: LedgerBlock) -> ImportResult:
        return self._import(block, persist=True)

    def _import(self, block, persist) -> ImportResult:
        h = block.hash
        if h in self._blocks:
            return ImportResult(h, self._is_canonical(block))
        parent = self._blocks.get(block.parent_hash)
        if parent is None:
            raise BadParent(f"unknown parent for block at height {block.height}")
        validate_block(parent, block, self.authorities, recent_sealers=self.recent_sealers(parent.hash),
                       known_uids=self.branch_uids(parent.hash))
        self._blocks[h] = block
        self._td[h] = self._td[parent.hash] + block.weight(self.authorities)
        if persist and self._path is not None:
            raw = block.to_bytes()
            self._log.write(struct.pack("<I", len(raw)) + raw)
        tip = self._canonical[-1]
        better = self._td[h] > self._td[tip] or (self._td[h] == self._td[tip] and h < tip)
        if not better:
            return ImportResult(h, False)
        if block.parent_hash == tip:
            self._canonical.append(h)
            self._index_block(block)
            return ImportResult(h, True)
        return self._reorg(h)

    def _is_canonical(self, block) -> bool:
        return block.height < len(self._canonical) and self._canonical[block.height] == block.hash

    def _reorg(self, new_tip: bytes) -> ImportResult:
        new = [b.hash for b in self.ancestry(new_tip)]
        fork = 0
        while fork < min(len(new), len(self._canonical)) and new[fork] == self._canonical[fork]:
            fork += 1
        old_records = [r for hh in self._canonical[fork:] for r in self._blocks[hh].records]
        new_uids = {r.uid for hh in new[fork:] for r in self._blocks[hh].records}
        self._canonical = new
        for r in old_records:
            self._index.pop(r.uid, None)
        for hh in new[fork:]:
            self._index_block(self._blocks[hh])
        dropped = [r for r in old_records if r.uid not in new_uids]
        return ImportResult(new_tip, True, reorged=True, dropped=dropped)

    def _index_block(self, block):
        for i, r in enumerate(block.records):
            self._index[r.uid] = (block.height, i, r)


class _BranchUids:
    """Membership test for uids on one branch, without copying the index."""

    def __init__(self, store: ChainStore, block_hash: bytes):
        self.store = store
        # walk back to the canonical chain, collecting side-branch uids
        side: set[bytes] = set()
        b = store._blocks[block_hash]
        while not store._is_canonical(b):
            side.update(r.uid for r in b.records)
            b = store._blocks[b.parent_hash]
        self.fork_height = b.height
        self.side = side

    def __contains__(self, uid) -> bool:
        if uid in self.side:
            return True
        loc = self.store._index.get(uid)
        return loc is not None and loc[0] <= self.fork_height


def fetch_record(store: ChainStore, uid: bytes) -> ChainRecord:
    return store.fetch(uid)
