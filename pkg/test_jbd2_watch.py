import struct

import pytest

from app.services.formatter import encode_journal_superblock
from app.services.host_driver import JournalWriter
from app.services.jbd2_watch import (
    COMMIT_BLOCK,
    FLAG_ESCAPE,
    HEADER,
    JBD2_MAGIC,
    JBD2_MAGIC_BYTES,
    Jbd2Error,
    JournalEventKind,
    JournalSuperblock,
    JournalTag,
    JournalWatcher,
    RevokeSet,
    escape_block,
    parse_journal_superblock,
    unescape_block,
)
from app.services.fs_common import CorruptStructure, MagicError

BS = 1024
JOURNAL_START = 100
JOURNAL_LEN = 64
UUID = bytes(range(16))


class MemoryDevice:
    """Flat in-memory block device that records journal block writes in order"""

    def __init__(self, journal_blocks):
        self.data = bytearray(512 * BS)
        self.index = {physical: jblock for jblock, physical in enumerate(journal_blocks)}
        self.journal_writes = []
        self.home_writes = []

    def read(self, offset, length):
        return bytes(self.data[offset:offset + length])

    def write(self, offset, payload):
        self.data[offset:offset + len(payload)] = payload
        for pos in range(0, len(payload), BS):
            physical = (offset + pos) // BS
            block = bytes(payload[pos:pos + BS])
            if physical in self.index:
                self.journal_writes.append((self.index[physical], block))
            else:
                self.home_writes.append((physical, block))

    def flush(self):
        pass


def make_journal(csum_v3: bool = False, sequence: int = 1):
    blocks = list(range(JOURNAL_START, JOURNAL_START + JOURNAL_LEN))
    device = MemoryDevice(blocks)
    device.data[JOURNAL_START * BS:(JOURNAL_START + 1) * BS] = encode_journal_superblock(
        BS, JOURNAL_LEN, 1, sequence, 0, UUID, csum_v3)
    writer = JournalWriter(device, blocks, BS, clock=lambda: 1_700_000_000.5)
    device.journal_writes.clear()
    return device, writer


def make_watcher(device):
    jsb = parse_journal_superblock(device.read(JOURNAL_START * BS, BS), BS, JOURNAL_LEN)
    return JournalWatcher(jsb, lambda jblock: device.read((JOURNAL_START + jblock) * BS, BS))


def feed(watcher, writes):
    events = []
    for jblock, raw in writes:
        events += watcher.ingest(jblock, raw)
    return events


def block(fill: int) -> bytes:
    return bytes([fill]) * BS


def test_superblock_fields():
    raw = encode_journal_superblock(BS, JOURNAL_LEN, 1, 7, 0, UUID, csum_v3=True)
    jsb = parse_journal_superblock(raw, BS, JOURNAL_LEN)
    assert (jsb.s_maxlen, jsb.s_first, jsb.s_sequence) == (JOURNAL_LEN, 1, 7)
    assert jsb.csum_v3 and jsb.tag_bytes == 16
    with pytest.raises(Jbd2Error):
        parse_journal_superblock(raw, 4096)
    with pytest.raises(CorruptStructure):
        parse_journal_superblock(raw, BS, JOURNAL_LEN - 1)
    with pytest.raises(MagicError):
        JournalSuperblock.from_bytes(bytes(BS))


@pytest.mark.parametrize("csum_v3", [False, True])
def test_committed_transaction_view(csum_v3):
    device, writer = make_journal(csum_v3)
    watcher = make_watcher(device)
    writer.commit([(300, block(0xAA)), (301, block(0xBB))])
    events = feed(watcher, device.journal_writes)

    assert [e.kind for e in events] == [JournalEventKind.COMMITTED]
    txn = events[0].txn
    assert txn.sequence == 1
    assert watcher.committed_view(txn) == [(300, block(0xAA)), (301, block(0xBB))]
    assert watcher.committed_view(txn, watched_blocks={301}) == [(301, block(0xBB))]
    assert watcher.last_committed == 1
    assert watcher.open is None


def test_descriptor_without_commit_stays_open():
    device, writer = make_journal()
    watcher = make_watcher(device)
    writer.commit([(300, block(1))])
    uncommitted = [w for w in device.journal_writes if HEADER.unpack_from(w[1], 0)[1] != COMMIT_BLOCK]
    assert feed(watcher, uncommitted) == []
    assert watcher.open is not None and watcher.open.sequence == 1


def test_revoke_suppresses_earlier_copies():
    device, writer = make_journal()
    watcher = make_watcher(device)
    writer.commit([(300, block(1)), (302, block(2))])
    writer.commit([(303, block(3))], revoked=[300])
    events = feed(watcher, device.journal_writes)

    kinds = [e.kind for e in events]
    assert kinds == [JournalEventKind.COMMITTED, JournalEventKind.COMMITTED, JournalEventKind.REVOKED]
    first, second, revoked = events
    assert revoked.blocks == (300,)
    assert watcher.committed_view(first.txn) == [(302, block(2))]
    assert watcher.committed_view(second.txn) == [(303, block(3))]


def test_escaped_block_round_trip():
    magic_block = JBD2_MAGIC_BYTES + bytes(BS - 4)
    device, writer = make_journal()
    watcher = make_watcher(device)
    writer.commit([(310, magic_block)])
    events = feed(watcher, device.journal_writes)
    txn = events[0].txn
    assert txn.tags[0].escaped
    assert watcher.committed_view(txn) == [(310, magic_block)]


def test_escape_helpers():
    plain = b"data" + bytes(12)
    assert escape_block(plain) == (plain, False)
    escaped, flagged = escape_block(JBD2_MAGIC_BYTES + b"rest")
    assert flagged and escaped == bytes(4) + b"rest"
    tag = JournalTag(final_block=5, journal_block=2, flags=FLAG_ESCAPE)
    assert unescape_block(tag, escaped) == JBD2_MAGIC_BYTES + b"rest"
    assert unescape_block(JournalTag(5, 2, 0), escaped) == escaped


def test_tampered_copy_fails_v3_checksum():
    device, writer = make_journal(csum_v3=True)
    watcher = make_watcher(device)
    writer.commit([(300, block(0x11))])
    writes = list(device.journal_writes)
    descriptor_index = next(i for i, (_, raw) in enumerate(writes) if raw[:4] == JBD2_MAGIC_BYTES
                            and HEADER.unpack_from(raw, 0)[1] == 1)
    jblock, raw = writes[descriptor_index + 1]
    writes[descriptor_index + 1] = (jblock, block(0x22))

    events = feed(watcher, writes)
    assert [e.kind for e in events] == [JournalEventKind.CHECKSUM_MISMATCH]
    assert events[0].is_indicator
    assert watcher.last_committed == 0


def test_sequence_regression_is_reported():
    device, writer = make_journal()
    watcher = make_watcher(device)
    writer.commit([(300, block(1))])
    first = list(device.journal_writes)
    writer.commit([(301, block(2))])
    feed(watcher, device.journal_writes)
    assert watcher.last_committed == 2

    commit = next(raw for _, raw in reversed(first) if HEADER.unpack_from(raw, 0)[1] == COMMIT_BLOCK)
    events = watcher.ingest(5, commit)
    assert [e.kind for e in events] == [JournalEventKind.SEQUENCE_REGRESSION]
    assert events[0].sequence == 1


def test_superblock_header_outside_block_zero():
    device, _ = make_journal()
    watcher = make_watcher(device)
    raw = encode_journal_superblock(BS, JOURNAL_LEN, 1, 9, 1, UUID, False)
    events = watcher.ingest(5, raw)
    assert [e.kind for e in events] == [JournalEventKind.UNKNOWN_BLOCKTYPE]

    unknown = bytearray(BS)
    HEADER.pack_into(unknown, 0, JBD2_MAGIC, 9, 1)
    assert [e.kind for e in watcher.ingest(6, bytes(unknown))] == [JournalEventKind.UNKNOWN_BLOCKTYPE]


def test_superblock_update_at_block_zero():
    device, _ = make_journal()
    watcher = make_watcher(device)
    raw = encode_journal_superblock(BS, JOURNAL_LEN, 1, 4, 1, UUID, False)
    assert watcher.ingest(0, raw) == []
    assert (watcher.jsb.s_start, watcher.jsb.s_sequence) == (1, 4)


def test_non_journal_blocks_and_short_writes():
    device, _ = make_journal()
    watcher = make_watcher(device)
    assert watcher.ingest(3, block(0x5A)) == []
    with pytest.raises(Jbd2Error):
        watcher.ingest(3, bytes(100))


def test_checkpoint_writes_blocks_home():
    device, writer = make_journal()
    writer.commit([(300, block(7))])
    assert device.read(300 * BS, BS) == bytes(BS)
    writer.checkpoint()
    assert device.read(300 * BS, BS) == block(7)
    (start,) = struct.unpack_from(">I", device.read(JOURNAL_START * BS, BS), 0x1C)
    assert start == 0


def test_revoke_set_scope():
    revokes = RevokeSet()
    revokes.add(5, [100])
    assert revokes.is_revoked(100, 5)
    assert revokes.is_revoked(100, 3)
    assert not revokes.is_revoked(100, 6)
    assert not revokes.is_revoked(101, 5)


def test_revokes_are_forgotten_once_checkpointed():
    device, writer = make_journal()
    watcher = make_watcher(device)
    for n in range(40):
        writer.commit([(300 + n, block(n))], revoked=[299 + n] if n else ())
    events = feed(watcher, device.journal_writes)
    assert [e.kind for e in events].count(JournalEventKind.COMMITTED) == 40
    assert 0 < len(watcher.revokes) < 39
    assert min(watcher.revokes.by_sequence) >= watcher.jsb.s_sequence

    device.journal_writes.clear()
    writer.checkpoint()
    feed(watcher, device.journal_writes)
    assert len(watcher.revokes) == 0


def test_revoke_set_prunes_across_sequence_wrap():
    revokes = RevokeSet()
    revokes.add(0xFFFFFFFE, [100])
    revokes.add(1, [101])
    revokes.prune(0)
    assert list(revokes.by_sequence) == [1]
    revokes.prune(2)
    assert len(revokes) == 0
