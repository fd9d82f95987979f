import hashlib
import itertools

import numpy as np
import pytest
from conftest import paper_has

from tchash.errors import (
    BadParent,
    BadRoot,
    BadSeal,
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
from tchash.ledger import (
    MAX_RECORD_BYTES,
    AuthoritySet,
    ChainRecord,
    ChainStore,
    LedgerBlock,
    fetch_record,
    fork_choice,
    genesis_block,
    merkle_root,
    record_overhead,
    seal_block,
    sha256,
    total_difficulty,
    validate_block,
    verify_chain,
)

AUTH = AuthoritySet.generate(3, seed=1)


def rec(i, size=8, submitter="alice"):
    uid = hashlib.md5(b"uid%d" % i).digest()
    return ChainRecord(uid, bytes([i % 256]) * size, submitter, 1000 + i, AUTH.issue_credential(0, submitter))


def build_chain(n_blocks, per_block=2, auth=AUTH):
    chain = [genesis_block(auth)]
    k = 0
    for h in range(1, n_blocks + 1):
        records = [rec(k + j) for j in range(per_block)]
        k += per_block
        chain.append(seal_block(chain[-1], records, auth.in_turn(h), auth, 1000 * h))
    return chain


class TestSha256:
    def test_vectors(self):
        assert sha256(b"").hex() == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        assert sha256(b"abc").hex() == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        assert sha256(b"a" * 1_000_000).hex() == "cdc76e5c9914fb9281a1c7e284d73e67f1809a48a497200e046d39ccc7112cd0"

    def test_bit_flip(self):
        data = bytearray(b"model bytes" * 10)
        before = sha256(bytes(data))
        data[5] ^= 1
        assert sha256(bytes(data)) != before


class TestMerkle:
    def test_empty(self):
        assert merkle_root([]) == sha256(b"")

    def test_single_leaf(self):
        assert merkle_root([b"r"]) == sha256(b"r")

    def test_four_by_hand(self):
        leaves = [sha256(x) for x in (b"a", b"b", b"c", b"d")]
        left = sha256(leaves[0] + leaves[1])
        right = sha256(leaves[2] + leaves[3])
        assert merkle_root([b"a", b"b", b"c", b"d"]) == sha256(left + right)

    def test_odd_duplicates_last(self):
        la, lb, lc = (sha256(x) for x in (b"a", b"b", b"c"))
        expected = sha256(sha256(la + lb) + sha256(lc + lc))
        assert merkle_root([b"a", b"b", b"c"]) == expected


class TestAuthorities:
    def test_majority(self):
        assert AuthoritySet.generate(7).majority == 4
        assert AuthoritySet.generate(4).majority == 3

    def test_in_turn(self):
        assert AUTH.in_turn(7) == 1
        assert genesis_block(AUTH).sealer == 0

    def test_credentials(self):
        cred = AUTH.issue_credential(2, "bob")
        AUTH.check_credential("bob", cred)
        with pytest.raises(Unauthorized):
            AUTH.check_credential("mallory", cred)

    def test_validation(self):
        with pytest.raises(ValueError):
            AuthoritySet((), ())
        with pytest.raises(ValueError):
            AuthoritySet(("a", "a"), (bytes(32), bytes(32)))


class TestRecords:
    def test_roundtrip(self):
        r = rec(3, size=100)
        assert ChainRecord.from_bytes(r.to_bytes()) == r
        assert len(r.to_bytes()) == r.size == record_overhead("alice") + 100

    def test_limit_from_paper(self):
        assert paper_has(r"32Kb per transaction")
        assert MAX_RECORD_BYTES == 32768


class TestSeal:
    def test_honest_block_validates(self):
        chain = build_chain(4)
        for parent, child in zip(chain, chain[1:]):
            validate_block(parent, child, AUTH)
        verify_chain(chain, AUTH)
        assert LedgerBlock.from_bytes(chain[2].to_bytes()) == chain[2]

    def test_not_in_turn(self):
        g = genesis_block(AUTH)
        with pytest.raises(NotInTurn):
            seal_block(g, [], 0, AUTH, 1)
        block = seal_block(g, [], 0, AUTH, 1, out_of_turn=True)
        assert block.weight(AUTH) == 1

    def test_oversized_record(self):
        g = genesis_block(AUTH)
        big = ChainRecord(bytes(16), bytes(33 * 1024), "alice")
        with pytest.raises(RecordTooLarge):
            seal_block(g, [big], 1, AUTH, 1)
        limit = ChainRecord(bytes(16), bytes(MAX_RECORD_BYTES - record_overhead("alice")), "alice")
        seal_block(g, [limit], 1, AUTH, 1)
        over = ChainRecord(bytes(16), bytes(MAX_RECORD_BYTES - record_overhead("alice") + 1), "alice")
        with pytest.raises(RecordTooLarge):
            seal_block(g, [over], 1, AUTH, 1)

    def test_duplicate_uid(self):
        g = genesis_block(AUTH)
        with pytest.raises(DuplicateUid):
            seal_block(g, [rec(1), rec(1)], 1, AUTH, 1)
        with pytest.raises(DuplicateUid):
            seal_block(g, [rec(1)], 1, AUTH, 1, known_uids={rec(1).uid})

    def test_recently_sealed(self):
        g = genesis_block(AUTH)
        with pytest.raises(RecentlySealed):
            seal_block(g, [], 1, AUTH, 1, recent_sealers=[1])

    def test_timestamp_never_decreases(self):
        g = genesis_block(AUTH, timestamp_ms=500)
        assert seal_block(g, [], 1, AUTH, 100).timestamp_ms == 500


class TestValidate:
    def test_flipped_record_byte(self):
        chain = build_chain(1)
        r = chain[1].records[0]
        forged = ChainRecord(r.uid, b"\xff" + r.payload[1:], r.submitter, r.time_ms, r.credential)
        bad = LedgerBlock(*[getattr(chain[1], f) for f in ("height", "parent_hash", "timestamp_ms", "sealer",
                                                              "records_root")],
                          (forged, *chain[1].records[1:]), chain[1].seal)
        with pytest.raises(BadRoot):
            validate_block(chain[0], bad, AUTH)

    def test_foreign_key(self):
        outsider = AuthoritySet.generate(3, seed=99)
        g = genesis_block(AUTH)
        block = seal_block(g, [], 1, outsider, 5)
        with pytest.raises(UnauthorizedSealer):
            validate_block(g, block, AUTH)

    def test_seal_of_another_authority(self):
        import tchash.ledger as L
        g = genesis_block(AUTH)
        root = merkle_root([])
        head = L._HEADER.pack(1, g.hash, 5, 1, root)  # claims sealer 1, sealed with key 2
        block = LedgerBlock(1, g.hash, 5, 1, root, (), L._seal(AUTH.keys[2], head))
        with pytest.raises(BadSeal):
            validate_block(g, block, AUTH)

    def test_bad_parent(self):
        chain = build_chain(2)
        with pytest.raises(BadParent):
            validate_block(chain[0], chain[2], AUTH)

    def test_oversize_on_import(self):
        g = genesis_block(AUTH)
        big = ChainRecord(bytes(16), bytes(MAX_RECORD_BYTES), "alice")
        # seal it by hand: the sealing helper would refuse
        import tchash.ledger as L
        root = merkle_root([big.to_bytes()])
        head = L._HEADER.pack(1, g.hash, 1, 1, root)
        block = LedgerBlock(1, g.hash, 1, 1, root, (big,), L._seal(AUTH.keys[1], head))
        with pytest.raises(Oversize):
            validate_block(g, block, AUTH)

    def test_single_byte_mutation_invalidates_block_and_descendants(self):
        chain = build_chain(4)
        rng = np.random.default_rng(0)
        for k in range(1, 5):
            raw = bytearray(chain[k].to_bytes())
            for pos in rng.choice(len(raw), size=25, replace=False):
                mutated = bytearray(raw)
                mutated[pos] ^= 1 + int(rng.integers(255))
                with pytest.raises(LedgerError):
                    block = LedgerBlock.from_bytes(bytes(mutated))
                    validate_block(chain[k - 1], block, AUTH)
                    if k < 4:
                        validate_block(block, chain[k + 1], AUTH)
                    raise AssertionError("mutation went unnoticed")
                # ancestors remain valid
                for i in range(1, k):
                    validate_block(chain[i - 1], chain[i], AUTH)


def chain_with(auth, sealers, start=0):
    chain = [genesis_block(auth)]
    for h, s in enumerate(sealers, 1):
        chain.append(seal_block(chain[-1], [rec(start + h)], s, auth, h * 10, out_of_turn=True))
    return chain


class TestForkChoice:
    def test_longer_in_turn_chain_wins(self):
        a = chain_with(AUTH, [1, 2, 0])
        b = chain_with(AUTH, [1, 2])
        assert fork_choice(a, b, AUTH) is a
        assert fork_choice(b, a, AUTH) is a

    def test_in_turn_beats_out_of_turn(self):
        a = chain_with(AUTH, [1, 2])
        b = chain_with(AUTH, [1, 0], start=50)
        assert total_difficulty(a, AUTH) > total_difficulty(b, AUTH)
        assert fork_choice(b, a, AUTH) is a

    def test_identical(self):
        a = chain_with(AUTH, [1, 2])
        assert fork_choice(a, list(a), AUTH)[-1].hash == a[-1].hash

    def test_tie_goes_to_lower_tip_hash(self):
        a = chain_with(AUTH, [1, 2])
        b = chain_with(AUTH, [1, 2], start=50)
        winner = min(a, b, key=lambda c: c[-1].hash)
        assert fork_choice(a, b, AUTH) is winner and fork_choice(b, a, AUTH) is winner

    def test_total_order(self):
        chains = [chain_with(AUTH, s, start=10 * i) for i, s in
                  enumerate([[1], [0], [2], [1, 2], [1, 0], [2, 0], [1, 2, 0]])]
        for a, b in itertools.permutations(chains, 2):
            assert fork_choice(a, b, AUTH) is fork_choice(b, a, AUTH)

    def test_disjoint_genesis(self):
        other = AuthoritySet.generate(3, seed=2)
        with pytest.raises(DisjointGenesis):
            fork_choice(chain_with(AUTH, [1]), chain_with(other, [1]), AUTH)


class TestStore:
    def test_fetch(self):
        store = ChainStore(AUTH)
        block = store.seal([rec(1), rec(2)], 1, 10)
        assert store.import_block(block).canonical
        assert fetch_record(store, rec(2).uid) == rec(2)
        assert store.height_of(rec(2).uid) == 1
        with pytest.raises(NotFound):
            store.fetch(bytes(16))
        assert store.height == 1 and len(store) == 2

    def test_duplicate_across_blocks(self):
        store = ChainStore(AUTH)
        store.import_block(store.seal([rec(1)], 1, 10))
        with pytest.raises(DuplicateUid):
            store.seal([rec(1)], 2, 20)

    def test_persistence_and_torn_tail(self, tmp_path):
        path = tmp_path / "chain.log"
        store = ChainStore(AUTH, path)
        for h in range(1, 6):
            store.import_block(store.seal([rec(h)], AUTH.in_turn(h), h * 10))
        tip = store.tip.hash
        store.close()
        size = path.stat().st_size
        with open(path, "ab") as fh:
            fh.write(b"\x40\x00\x00\x00partial")
        again = ChainStore(AUTH, path)
        assert again.tip.hash == tip and again.height == 5
        assert again.fetch(rec(3).uid) == rec(3)
        assert path.stat().st_size == size
        assert path.with_suffix(".log.idx").exists()
        again.close()

    def test_reorg_returns_dropped_records(self):
        store = ChainStore(AUTH)
        g = store.genesis
        weak = seal_block(g, [rec(1), rec(2)], 2, AUTH, 10, out_of_turn=True)
        assert store.import_block(weak).canonical
        strong = seal_block(g, [rec(2)], 1, AUTH, 11)
        result = store.import_block(strong)
        assert result.canonical and result.reorged
        assert [r.uid for r in result.dropped] == [rec(1).uid]
        assert store.tip.hash == strong.hash
        assert rec(1).uid not in store and rec(2).uid in store
        assert store.height_of(rec(2).uid) == 1

    def test_side_branch_uid_rules(self):
        store = ChainStore(AUTH)
        g = store.genesis
        store.import_block(seal_block(g, [rec(1)], 1, AUTH, 10))
        # a competing branch may reuse a uid of the canonical branch
        side = seal_block(g, [rec(1)], 2, AUTH, 10, out_of_turn=True)
        assert not store.import_block(side).canonical

    def test_unknown_parent(self):
        chain = build_chain(2)
        store = ChainStore(AUTH)
        with pytest.raises(BadParent):
            store.import_block(chain[2])

    def test_reads_do_not_mutate(self):
        store = ChainStore(AUTH)
        store.import_block(store.seal([rec(1)], 1, 10))
        before = [b.to_bytes() for b in store.canonical_chain()]
        for _ in range(3):
            store.fetch(rec(1).uid)
            with pytest.raises(NotFound):
                store.fetch(rec(9).uid)
        assert [b.to_bytes() for b in store.canonical_chain()] == before
