import dataclasses
import logging
import struct
from enum import Enum
from typing import Callable, Dict, Iterable, List, Optional, Set, Tuple

import crc32c

from app.services.fs_common import CorruptStructure, FsError, MagicError, UnsupportedFeature

logger = logging.getLogger(__name__)

JBD2_MAGIC = 0xC03B3998
JBD2_MAGIC_BYTES = struct.pack(">I", JBD2_MAGIC)

DESCRIPTOR_BLOCK = 1
COMMIT_BLOCK = 2
SUPERBLOCK_V1 = 3
SUPERBLOCK_V2 = 4
REVOKE_BLOCK = 5

FEATURE_INCOMPAT_REVOKE = 0x1
FEATURE_INCOMPAT_64BIT = 0x2
FEATURE_INCOMPAT_ASYNC_COMMIT = 0x4
FEATURE_INCOMPAT_CSUM_V2 = 0x8
FEATURE_INCOMPAT_CSUM_V3 = 0x10
FEATURE_INCOMPAT_FAST_COMMIT = 0x20

FLAG_ESCAPE = 1
FLAG_SAME_UUID = 2
FLAG_DELETED = 4
FLAG_LAST_TAG = 8

HEADER = struct.Struct(">III")
TAIL_SIZE = 4
REVOKE_HEADER_SIZE = 16
COMMIT_CHKSUM_OFFSET = 16
UUID_SIZE = 16

MASK32 = 0xFFFFFFFF


class Jbd2Error(FsError):
    pass


def kernel_crc32c(seed: int, data: bytes) -> int:
    """crc32c with the kernel's convention (raw register, no final inversion)"""
    return ~crc32c.crc32c(data, ~seed & MASK32) & MASK32


@dataclasses.dataclass
class JournalSuperblock:
    blocktype: int
    s_blocksize: int
    s_maxlen: int
    s_first: int
    s_sequence: int
    s_start: int
    s_feature_compat: int
    s_feature_incompat: int
    s_feature_ro_compat: int
    s_uuid: bytes

    FIELDS = [
        # attribute, offset, format (big-endian)
        ("s_blocksize", 0xC, ">I"),
        ("s_maxlen", 0x10, ">I"),
        ("s_first", 0x14, ">I"),
        ("s_sequence", 0x18, ">I"),
        ("s_start", 0x1C, ">I"),
        ("s_feature_compat", 0x24, ">I"),
        ("s_feature_incompat", 0x28, ">I"),
        ("s_feature_ro_compat", 0x2C, ">I"),
        ("s_uuid", 0x30, "16s"),
    ]

    @classmethod
    def from_bytes(cls, raw: bytes) -> "JournalSuperblock":
        magic, blocktype, _ = HEADER.unpack_from(raw, 0)
        if magic != JBD2_MAGIC:
            raise MagicError(f"Bad journal magic 0x{magic:08X}")
        if blocktype not in (SUPERBLOCK_V1, SUPERBLOCK_V2):
            raise CorruptStructure(f"journal block 0 has blocktype {blocktype}")
        kwargs = {attr: struct.unpack_from(fmt, raw, offset)[0] for attr, offset, fmt in cls.FIELDS}
        if blocktype == SUPERBLOCK_V1:
            kwargs.update(s_feature_compat=0, s_feature_incompat=0, s_feature_ro_compat=0)
        return cls(blocktype=blocktype, **kwargs)

    @property
    def csum_v2(self) -> bool:
        return bool(self.s_feature_incompat & FEATURE_INCOMPAT_CSUM_V2)

    @property
    def csum_v3(self) -> bool:
        return bool(self.s_feature_incompat & FEATURE_INCOMPAT_CSUM_V3)

    @property
    def has_checksums(self) -> bool:
        return self.csum_v2 or self.csum_v3

    @property
    def is_64bit(self) -> bool:
        return bool(self.s_feature_incompat & FEATURE_INCOMPAT_64BIT)

    @property
    def tag_bytes(self) -> int:
        if self.csum_v3:
            return 16
        size = 12
        if self.csum_v2:
            size += 2
        return size if self.is_64bit else size - 4

    @property
    def checksum_seed(self) -> int:
        return kernel_crc32c(MASK32, self.s_uuid)


def parse_journal_superblock(raw: bytes, fs_block_size: int, journal_blocks: Optional[int] = None) -> JournalSuperblock:
    jsb = JournalSuperblock.from_bytes(raw)
    if jsb.s_blocksize != fs_block_size:
        raise Jbd2Error(f"journal block size {jsb.s_blocksize} != fs block size {fs_block_size}")
    if jsb.s_feature_incompat & FEATURE_INCOMPAT_FAST_COMMIT:
        raise UnsupportedFeature("jbd2 fast commit")
    if journal_blocks is not None and jsb.s_maxlen > journal_blocks:
        raise CorruptStructure(f"journal s_maxlen {jsb.s_maxlen} exceeds journal inode ({journal_blocks} blocks)")
    if not 0 < jsb.s_first < jsb.s_maxlen:
        raise CorruptStructure(f"journal s_first {jsb.s_first} outside 1..{jsb.s_maxlen - 1}")
    return jsb


@dataclasses.dataclass
class JournalTag:
    final_block: int
    journal_block: int
    flags: int
    checksum: int = 0

    @property
    def escaped(self) -> bool:
        return bool(self.flags & FLAG_ESCAPE)

    @property
    def same_uuid(self) -> bool:
        return bool(self.flags & FLAG_SAME_UUID)


class TxnState(str, Enum):
    OPEN = "OPEN"
    COMMITTED = "COMMITTED"


@dataclasses.dataclass
class JournalTransaction:
    sequence: int
    tags: List[JournalTag] = dataclasses.field(default_factory=list)
    revoked_blocks: Set[int] = dataclasses.field(default_factory=set)
    state: TxnState = TxnState.OPEN
    data: Dict[int, bytes] = dataclasses.field(default_factory=dict, repr=False)


class RevokeSet:
    """sequence -> fs blocks revoked in that transaction"""

    def __init__(self):
        self.by_sequence: Dict[int, Set[int]] = {}

    def add(self, sequence: int, blocks: Iterable[int]):
        self.by_sequence.setdefault(sequence, set()).update(blocks)

    def is_revoked(self, block: int, sequence: int) -> bool:
        """A revoke recorded in T suppresses copies from transactions <= T"""
        return any(seq >= sequence and block in blocks for seq, blocks in self.by_sequence.items())

    def prune(self, tail: int):
        """Forget transactions older than the journal tail; they are checkpointed"""
        stale = [seq for seq in self.by_sequence if 0 < ((tail - seq) & MASK32) <= 0x7FFFFFFF]
        for seq in stale:
            del self.by_sequence[seq]

    def __len__(self) -> int:
        return len(self.by_sequence)


class JournalEventKind(str, Enum):
    COMMITTED = "COMMITTED"
    SEQUENCE_REGRESSION = "SEQUENCE_REGRESSION"
    UNKNOWN_BLOCKTYPE = "UNKNOWN_BLOCKTYPE"
    CHECKSUM_MISMATCH = "CHECKSUM_MISMATCH"
    REVOKED = "REVOKED"


@dataclasses.dataclass
class JournalEvent:
    kind: JournalEventKind
    sequence: int
    txn: Optional[JournalTransaction] = None
    blocks: Tuple[int, ...] = ()
    detail: str = ""

    @property
    def is_indicator(self) -> bool:
        return self.kind in (JournalEventKind.SEQUENCE_REGRESSION, JournalEventKind.UNKNOWN_BLOCKTYPE,
                             JournalEventKind.CHECKSUM_MISMATCH)


def unescape_block(tag: JournalTag, data: bytes) -> bytes:
    if not tag.escaped:
        return data
    if data[:4] == JBD2_MAGIC_BYTES:
        logger.warning(f"⚠️ Escaped journal copy of block {tag.final_block} already starts with the magic")
        return data
    return JBD2_MAGIC_BYTES + data[4:]


def escape_block(data: bytes) -> Tuple[bytes, bool]:
    """Journal copy of data plus the ESCAPE flag"""
    if data[:4] == JBD2_MAGIC_BYTES:
        return bytes(4) + data[4:], True
    return data, False


class JournalWatcher:
    """Reconstructs jbd2 transactions from journal block writes, in arrival order"""

    def __init__(self, jsb: JournalSuperblock, read_journal_block: Callable[[int], bytes]):
        self.jsb = jsb
        self.block_size = jsb.s_blocksize
        self.read_journal_block = read_journal_block
        self.last_committed = (jsb.s_sequence - 1) & MASK32
        self.open: Optional[JournalTransaction] = None
        self.revokes = RevokeSet()
        self._slots: Dict[int, JournalTag] = {}
        self._seed = jsb.checksum_seed if jsb.has_checksums else 0

    def next_block(self, jblock: int) -> int:
        jblock += 1
        return self.jsb.s_first if jblock >= self.jsb.s_maxlen else jblock

    # --- checksums ---

    def _block_checksum_ok(self, raw: bytes, offset: int) -> bool:
        if not self.jsb.has_checksums:
            return True
        (provided,) = struct.unpack_from(">I", raw, offset)
        zeroed = raw[:offset] + bytes(4) + raw[offset + 4:]
        return kernel_crc32c(self._seed, zeroed) == provided

    def _tag_checksum_ok(self, tag: JournalTag, sequence: int, data: bytes) -> bool:
        if not self.jsb.has_checksums:
            return True
        csum = kernel_crc32c(self._seed, struct.pack(">I", sequence))
        csum = kernel_crc32c(csum, data)
        if self.jsb.csum_v3:
            return csum == tag.checksum
        return (csum & 0xFFFF) == tag.checksum

    # --- block parsers ---

    def parse_tags(self, raw: bytes, descriptor_jblock: int) -> List[JournalTag]:
        end = len(raw) - (TAIL_SIZE if self.jsb.has_checksums else 0)
        size = self.jsb.tag_bytes
        pos = HEADER.size
        jblock = descriptor_jblock
        tags: List[JournalTag] = []
        while pos + size <= end:
            if self.jsb.csum_v3:
                blocknr, flags, high, checksum = struct.unpack_from(">IIII", raw, pos)
            else:
                blocknr, checksum, flags = struct.unpack_from(">IHH", raw, pos)
                high = struct.unpack_from(">I", raw, pos + 8)[0] if self.jsb.is_64bit else 0
            if not self.jsb.is_64bit:
                high = 0
            pos += size
            jblock = self.next_block(jblock)
            tags.append(JournalTag((high << 32) | blocknr, jblock, flags, checksum))
            if not flags & FLAG_SAME_UUID:
                pos += UUID_SIZE
            if flags & FLAG_LAST_TAG:
                break
        return tags

    def parse_revoke(self, raw: bytes) -> List[int]:
        (r_count,) = struct.unpack_from(">I", raw, HEADER.size)
        record = 8 if self.jsb.is_64bit else 4
        limit = len(raw) - (TAIL_SIZE if self.jsb.has_checksums else 0)
        if r_count < REVOKE_HEADER_SIZE or r_count > limit:
            raise CorruptStructure(f"revoke r_count {r_count} out of range")
        fmt = ">Q" if record == 8 else ">I"
        return [struct.unpack_from(fmt, raw, pos)[0] for pos in range(REVOKE_HEADER_SIZE, r_count - record + 1, record)]

    # --- state machine ---

    def _regressed(self, sequence: int) -> bool:
        # serial number arithmetic (tids wrap at 2^32)
        return ((sequence - self.last_committed) & MASK32) == 0 or \
            ((sequence - self.last_committed) & MASK32) > 0x7FFFFFFF

    def _open(self, sequence: int) -> JournalTransaction:
        if self.open is None or self.open.sequence != sequence:
            if self.open is not None:
                logger.warning(f"⚠️ Transaction {self.open.sequence} abandoned by descriptor of {sequence}")
            self.open = JournalTransaction(sequence)
            self._slots = {}
        return self.open

    def ingest(self, jblock: int, raw: bytes) -> List[JournalEvent]:
        """Advance on one full journal block write"""
        if len(raw) != self.block_size:
            raise Jbd2Error(f"journal write of {len(raw)} bytes, expected {self.block_size}")

        tag = self._slots.pop(jblock, None)
        if tag is not None and self.open is not None:
            self.open.data[tag.journal_block] = raw
            return []

        magic, blocktype, sequence = HEADER.unpack_from(raw, 0)
        if magic != JBD2_MAGIC:
            return []

        if jblock == 0 or blocktype in (SUPERBLOCK_V1, SUPERBLOCK_V2):
            if jblock != 0:
                return [JournalEvent(JournalEventKind.UNKNOWN_BLOCKTYPE, sequence,
                                     detail=f"superblock header at journal block {jblock}")]
            update = JournalSuperblock.from_bytes(raw)
            self.jsb.s_start, self.jsb.s_sequence = update.s_start, update.s_sequence
            self.revokes.prune(update.s_sequence)
            logger.debug(f"📓 Journal superblock update: start={update.s_start} sequence={update.s_sequence}")
            return []

        if blocktype not in (DESCRIPTOR_BLOCK, COMMIT_BLOCK, REVOKE_BLOCK):
            return [JournalEvent(JournalEventKind.UNKNOWN_BLOCKTYPE, sequence,
                                 detail=f"blocktype {blocktype} at journal block {jblock}")]

        if self._regressed(sequence):
            return [JournalEvent(JournalEventKind.SEQUENCE_REGRESSION, sequence,
                                 detail=f"sequence {sequence} after committed {self.last_committed}")]

        if blocktype == DESCRIPTOR_BLOCK:
            if not self._block_checksum_ok(raw, len(raw) - TAIL_SIZE):
                return self._discard(sequence, "descriptor block checksum")
            txn = self._open(sequence)
            for new_tag in self.parse_tags(raw, jblock):
                txn.tags.append(new_tag)
                self._slots[new_tag.journal_block] = new_tag
            return []

        if blocktype == REVOKE_BLOCK:
            if not self._block_checksum_ok(raw, len(raw) - TAIL_SIZE):
                return self._discard(sequence, "revoke block checksum")
            txn = self._open(sequence)
            try:
                blocks = self.parse_revoke(raw)
            except FsError as e:
                return self._discard(sequence, str(e))
            txn.revoked_blocks.update(blocks)
            return []

        return self._commit(sequence, raw)

    def _discard(self, sequence: int, reason: str) -> List[JournalEvent]:
        logger.warning(f"🚨 Journal transaction {sequence} discarded: {reason}")
        if self.open is not None and self.open.sequence == sequence:
            self.open = None
            self._slots = {}
        return [JournalEvent(JournalEventKind.CHECKSUM_MISMATCH, sequence, detail=reason)]

    def _commit(self, sequence: int, raw: bytes) -> List[JournalEvent]:
        if not self._block_checksum_ok(raw, COMMIT_CHKSUM_OFFSET):
            return self._discard(sequence, "commit block checksum")
        txn = self.open if self.open is not None and self.open.sequence == sequence else JournalTransaction(sequence)

        for tag in txn.tags:
            if tag.journal_block not in txn.data:
                txn.data[tag.journal_block] = self.read_journal_block(tag.journal_block)
            if not self._tag_checksum_ok(tag, sequence, txn.data[tag.journal_block]):
                return self._discard(sequence, f"data block checksum (fs block {tag.final_block})")

        txn.state = TxnState.COMMITTED
        if txn.revoked_blocks:
            self.revokes.add(sequence, txn.revoked_blocks)
        self.last_committed = sequence
        self.open = None
        self._slots = {}
        logger.debug(f"📓 Transaction {sequence} committed: {len(txn.tags)} tag(s), {len(txn.revoked_blocks)} revoke(s)")
        events = [JournalEvent(JournalEventKind.COMMITTED, sequence, txn=txn)]
        if txn.revoked_blocks:
            events.append(JournalEvent(JournalEventKind.REVOKED, sequence, blocks=tuple(sorted(txn.revoked_blocks))))
        return events

    def committed_view(self, txn: JournalTransaction, watched_blocks: Optional[Set[int]] = None) -> List[Tuple[int, bytes]]:
        """Unescaped journal copies of the transaction's blocks, revoked ones excluded"""
        if txn.state != TxnState.COMMITTED:
            raise Jbd2Error(f"transaction {txn.sequence} is not committed")
        view = []
        for tag in txn.tags:
            if tag.flags & FLAG_DELETED:
                continue
            if watched_blocks is not None and tag.final_block not in watched_blocks:
                continue
            if tag.final_block in txn.revoked_blocks or self.revokes.is_revoked(tag.final_block, txn.sequence):
                continue
            view.append((tag.final_block, unescape_block(tag, txn.data[tag.journal_block])))
        return view
