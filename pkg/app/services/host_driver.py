"""Simulated host file-system driver issuing block writes like a kernel would.

Used by the loopback bench and by trace/acceptance tests: appends are applied
through the minimal writers, then written out as data and metadata blocks,
and in jbd2 modes as descriptor/data/revoke/commit journal blocks with a
later checkpoint.
"""
import dataclasses
import logging
import math
import struct
import threading
import time
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple

from app.models.schemas import FsKind
from app.services.formatter import encode_journal_superblock
from app.services.jbd2_watch import (
    COMMIT_BLOCK,
    COMMIT_CHKSUM_OFFSET,
    DESCRIPTOR_BLOCK,
    FLAG_ESCAPE,
    FLAG_LAST_TAG,
    FLAG_SAME_UUID,
    HEADER,
    JBD2_MAGIC,
    MASK32,
    REVOKE_BLOCK,
    REVOKE_HEADER_SIZE,
    TAIL_SIZE,
    UUID_SIZE,
    JournalSuperblock,
    escape_block,
    kernel_crc32c,
    parse_journal_superblock,
)
from app.services.log_writer import DirtyUnit, WriterError, coalesce, open_writer, root_name

logger = logging.getLogger(__name__)

ORDERINGS = ("data-first", "metadata-first")
COMMIT_SEC_OFFSET = 0x30
COMMIT_NSEC_OFFSET = 0x38
JBD2_CRC32C_CHKSUM = 4


class HostError(WriterError):
    fmt = "host driver error: {reason}"


class BlockDevice(Protocol):
    def read(self, offset: int, length: int) -> bytes: ...

    def write(self, offset: int, data: bytes): ...

    def flush(self): ...


class ImageDevice:
    """BlockImage as a host sees it over NBD (raw reads, no injected faults)"""

    def __init__(self, image):
        self.image = image

    def read(self, offset: int, length: int) -> bytes:
        return self.image.read_raw(offset, length)

    def write(self, offset: int, data: bytes):
        self.image.write(offset, data)

    def flush(self):
        self.image.flush()


# --- group commit ---

@dataclasses.dataclass
class _Ticket:
    item: object
    done: bool = False
    error: Optional[BaseException] = None


class GroupCommitter:
    """Concurrent submitters share one commit: the first waiter leads and flushes everything queued"""

    def __init__(self, commit: Callable[[List[object]], None], max_batch: int = 64):
        self._commit = commit
        self.max_batch = max_batch
        self._cond = threading.Condition(threading.Lock())
        self._queue: List[_Ticket] = []
        self._leading = False
        self.batches = 0

    def submit(self, item) -> None:
        ticket = _Ticket(item)
        with self._cond:
            self._queue.append(ticket)
            while not ticket.done:
                if self._leading:
                    self._cond.wait()
                    continue
                self._leading = True
                batch, self._queue = self._queue[:self.max_batch], self._queue[self.max_batch:]
                self._cond.release()
                error = None
                try:
                    self._commit([t.item for t in batch])
                except BaseException as e:  # handed to every waiter of the batch
                    error = e
                finally:
                    self._cond.acquire()
                for t in batch:
                    t.done, t.error = True, error
                self.batches += 1
                self._leading = False
                self._cond.notify_all()
        if ticket.error is not None:
            raise ticket.error


# --- jbd2 journal ---

class JournalWriter:
    """Writes jbd2 transactions into the journal inode's blocks and checkpoints them"""

    def __init__(self, device: BlockDevice, journal_blocks: Sequence[int], block_size: int,
                 clock: Callable[[], float] = time.time):
        self.device = device
        self.blocks = list(journal_blocks)
        self.bs = block_size
        self.clock = clock
        raw = device.read(self.blocks[0] * block_size, block_size)
        self.jsb: JournalSuperblock = parse_journal_superblock(raw, block_size, len(self.blocks))
        if self.jsb.csum_v2:
            raise HostError("jbd2 checksum v2 journals are not written")
        self.seed = self.jsb.checksum_seed if self.jsb.has_checksums else 0
        self.tid = self.jsb.s_sequence
        self.head = self.jsb.s_start or self.jsb.s_first
        self.tail: Optional[int] = self.jsb.s_start or None
        self.used = 0
        self.pending: Dict[int, bytes] = {}
        self.transactions = 0

    @property
    def capacity(self) -> int:
        return self.jsb.s_maxlen - self.jsb.s_first

    def _next(self, jblock: int) -> int:
        jblock += 1
        return self.jsb.s_first if jblock >= self.jsb.s_maxlen else jblock

    def _tail_csum(self, block: bytearray, offset: int):
        if self.jsb.has_checksums:
            struct.pack_into(">I", block, offset, 0)
            struct.pack_into(">I", block, offset, kernel_crc32c(self.seed, bytes(block)))

    def _tag_csum(self, data: bytes) -> int:
        if not self.jsb.has_checksums:
            return 0
        return kernel_crc32c(kernel_crc32c(self.seed, struct.pack(">I", self.tid)), data)

    def _tag(self, final_block: int, flags: int, data: bytes) -> bytes:
        high = final_block >> 32 if self.jsb.is_64bit else 0
        if self.jsb.csum_v3:
            return struct.pack(">IIII", final_block & MASK32, flags, high, self._tag_csum(data))
        tag = struct.pack(">IHH", final_block & MASK32, 0, flags)
        return tag + struct.pack(">I", high) if self.jsb.is_64bit else tag

    def _descriptors(self, blocks: Sequence[Tuple[int, bytes]]) -> List[Tuple[bytes, List[bytes]]]:
        """Descriptor blocks, each followed by the journal copies it tags"""
        limit = self.bs - (TAIL_SIZE if self.jsb.has_checksums else 0)
        groups: List[List[Tuple[int, int, bytes]]] = []
        used = limit
        for final_block, data in blocks:
            copy, escaped = escape_block(data)
            if used + self.jsb.tag_bytes > limit:
                groups.append([])
                used = HEADER.size + UUID_SIZE
            groups[-1].append((final_block, FLAG_ESCAPE if escaped else 0, copy))
            used += self.jsb.tag_bytes

        result = []
        for tags in groups:
            block = bytearray(self.bs)
            HEADER.pack_into(block, 0, JBD2_MAGIC, DESCRIPTOR_BLOCK, self.tid)
            pos = HEADER.size
            for index, (final_block, flags, copy) in enumerate(tags):
                if index:
                    flags |= FLAG_SAME_UUID
                if index == len(tags) - 1:
                    flags |= FLAG_LAST_TAG
                tag = self._tag(final_block, flags, copy)
                block[pos:pos + len(tag)] = tag
                pos += len(tag)
                if index == 0:
                    block[pos:pos + UUID_SIZE] = self.jsb.s_uuid
                    pos += UUID_SIZE
            self._tail_csum(block, self.bs - TAIL_SIZE)
            result.append((bytes(block), [copy for _, _, copy in tags]))
        return result

    def _revoke_blocks(self, revoked: Sequence[int]) -> List[bytes]:
        record = 8 if self.jsb.is_64bit else 4
        limit = self.bs - (TAIL_SIZE if self.jsb.has_checksums else 0)
        per_block = (limit - REVOKE_HEADER_SIZE) // record
        out = []
        for start in range(0, len(revoked), per_block):
            chunk = revoked[start:start + per_block]
            block = bytearray(self.bs)
            HEADER.pack_into(block, 0, JBD2_MAGIC, REVOKE_BLOCK, self.tid)
            struct.pack_into(">I", block, HEADER.size, REVOKE_HEADER_SIZE + record * len(chunk))
            for index, number in enumerate(chunk):
                struct.pack_into(">Q" if record == 8 else ">I", block, REVOKE_HEADER_SIZE + index * record, number)
            self._tail_csum(block, self.bs - TAIL_SIZE)
            out.append(bytes(block))
        return out

    def _commit_block(self) -> bytes:
        block = bytearray(self.bs)
        HEADER.pack_into(block, 0, JBD2_MAGIC, COMMIT_BLOCK, self.tid)
        now = self.clock()
        struct.pack_into(">Q", block, COMMIT_SEC_OFFSET, int(now))
        struct.pack_into(">I", block, COMMIT_NSEC_OFFSET, int((now % 1) * 1e9))
        if self.jsb.has_checksums:
            block[12] = JBD2_CRC32C_CHKSUM
            block[13] = 4
            struct.pack_into(">I", block, COMMIT_CHKSUM_OFFSET, kernel_crc32c(self.seed, bytes(block)))
        return bytes(block)

    def transaction_size(self, block_count: int, revoke_count: int = 0) -> int:
        per_descriptor = (self.bs - HEADER.size - UUID_SIZE - TAIL_SIZE) // self.jsb.tag_bytes
        record = 8 if self.jsb.is_64bit else 4
        per_revoke = (self.bs - REVOKE_HEADER_SIZE - TAIL_SIZE) // record
        return (block_count + math.ceil(block_count / per_descriptor) + math.ceil(revoke_count / per_revoke) + 1)

    def _write_run(self, start: int, payload: List[bytes]):
        """Journal blocks from start, one device write per physically contiguous stretch"""
        jblock = start
        run_start, run = None, []
        for data in payload:
            physical = self.blocks[jblock]
            if run and physical != run_start + len(run):
                self.device.write(run_start * self.bs, b"".join(run))
                run = []
            if not run:
                run_start = physical
            run.append(data)
            jblock = self._next(jblock)
        if run:
            self.device.write(run_start * self.bs, b"".join(run))
        return jblock

    def write_superblock(self, start: int):
        self.device.write(self.blocks[0] * self.bs, encode_journal_superblock(
            self.bs, self.jsb.s_maxlen, self.jsb.s_first, self.tid, start, self.jsb.s_uuid, self.jsb.csum_v3))

    def commit(self, blocks: Sequence[Tuple[int, bytes]], revoked: Sequence[int] = ()):
        """One transaction: revoke records, descriptors with their copies, flush, commit block"""
        needed = self.transaction_size(len(blocks), len(revoked))
        if needed > self.capacity:
            raise HostError(f"transaction of {needed} blocks exceeds the {self.capacity}-block journal")
        if self.used + needed > self.capacity:
            self.checkpoint()
        if self.tail is None:
            self.tail = self.head
            self.write_superblock(self.head)

        payload: List[bytes] = list(self._revoke_blocks(list(revoked)))
        for descriptor, copies in self._descriptors(blocks):
            payload.append(descriptor)
            payload.extend(copies)
        after = self._write_run(self.head, payload)
        self.device.flush()
        self.head = self._write_run(after, [self._commit_block()])
        self.device.flush()
        self.used += needed
        for final_block, data in blocks:
            self.pending[final_block] = data
        for block in revoked:
            self.pending.pop(block, None)
        logger.debug(f"📓 Host committed transaction {self.tid}: {len(blocks)} block(s), {len(revoked)} revoke(s)")
        self.tid = (self.tid + 1) & MASK32
        self.transactions += 1

    def checkpoint(self):
        """Write journaled blocks home, then mark the journal empty"""
        for index, payload in coalesce([DirtyUnit(b, d, False) for b, d in self.pending.items()]):
            self.device.write(index * self.bs, payload)
        self.device.flush()
        self.pending.clear()
        self.tail = None
        self.used = 0
        self.write_superblock(0)
        self.device.flush()
        logger.debug(f"📓 Host checkpoint: journal empty at sequence {self.tid}")


# --- driver ---

@dataclasses.dataclass
class AppendRecord:
    name: str
    data: bytes


class HostDriver:
    """Userspace stand-in for a host fs driver on top of a block device"""

    def __init__(self, device: BlockDevice, fs_kind: FsKind, ordering: str = "data-first",
                 checkpoint_every: int = 8, max_batch: int = 64, clock: Callable[[], float] = time.time):
        if ordering not in ORDERINGS:
            raise HostError(f"write ordering must be one of {', '.join(ORDERINGS)}")
        self.device = device
        self.fs_kind = fs_kind
        self.ordering = ordering
        self.checkpoint_every = checkpoint_every
        self.writer = open_writer(fs_kind, device.read, clock)
        self.unit = self.writer.cache.unit_size
        self.mode = self.writer.journal_mode
        self.journal: Optional[JournalWriter] = None
        if self.mode != "none":
            self.journal = JournalWriter(device, self.writer.volume.journal_blocks, self.unit, clock)
        self._lock = threading.RLock()
        self._handles: Dict[str, object] = {}
        self._since_checkpoint = 0
        self.committer = GroupCommitter(self._commit_batch, max_batch)
        self.bytes_appended = 0
        logger.info(f"🖥️ Host driver on {fs_kind.value} (journal={self.mode}, ordering={ordering})")

    def _handle(self, name: str):
        if name not in self._handles:
            self._handles[name] = self.writer.lookup(name)
        return self._handles[name]

    # --- write-out ---

    def _write_units(self, units: Sequence[DirtyUnit]):
        for index, payload in coalesce(units):
            self.device.write(index * self.unit, payload)

    def _write_out(self, revoked: Sequence[int] = ()):
        units = self.writer.cache.take_dirty()
        data = [u for u in units if u.is_data]
        metadata = [u for u in units if not u.is_data]
        if self.journal is None:
            first, second = (data, metadata) if self.ordering == "data-first" else (metadata, data)
            self._write_units(first)
            self._write_units(second)
        else:
            journaled = metadata
            if self.mode == "ordered":
                self._write_units(data)
                self.device.flush()
            else:
                journaled = data + metadata
            budget = self.journal.capacity // 4
            chunk = max(1, budget - 2)
            pieces = [journaled[i:i + chunk] for i in range(0, len(journaled), chunk)] or [[]]
            for index, piece in enumerate(pieces):
                if piece or (revoked and index == 0):
                    self.journal.commit([(u.index, u.data) for u in piece], revoked if index == 0 else ())
            self._since_checkpoint += 1
            if self._since_checkpoint >= self.checkpoint_every:
                self.journal.checkpoint()
                self._since_checkpoint = 0
        self.device.flush()

    def _commit_batch(self, records: List[AppendRecord]):
        with self._lock:
            for record in records:
                self.writer.append(self._handle(record.name), record.data)
                self.bytes_appended += len(record.data)
            self._write_out()

    def _chunk_limit(self) -> Optional[int]:
        if self.journal is None or self.mode != "data":
            return None
        return max(1, self.journal.capacity // 8) * self.unit

    # --- operations ---

    def append(self, path: str, data: bytes):
        """Durable once this returns; concurrent callers are group-committed"""
        name = root_name(path)
        limit = self._chunk_limit()
        if limit is None or len(data) <= limit:
            self.committer.submit(AppendRecord(name, data))
            return
        for start in range(0, len(data), limit):
            self.committer.submit(AppendRecord(name, data[start:start + limit]))

    def create(self, path: str, append_only: bool = False):
        name = root_name(path)
        with self._lock:
            self._handles[name] = self.writer.create_file(name, append_only=append_only)
            self._write_out()

    def write_file(self, path: str, data: bytes):
        """Unrelated file activity: create a plain file and fill it"""
        self.create(path)
        if data:
            self.append(path, data)

    def remove(self, path: str):
        name = root_name(path)
        with self._lock:
            released = self.writer.remove(name)
            self._handles.pop(name, None)
            revoked = released if self.fs_kind == FsKind.EXT4 and self.mode == "data" else ()
            self._write_out(revoked)

    def overwrite(self, path: str, offset: int, data: bytes):
        with self._lock:
            self.writer.overwrite(self._handle(root_name(path)), offset, data)
            self._write_out()

    def truncate(self, path: str, size: int):
        with self._lock:
            self.writer.truncate(self._handle(root_name(path)), size)
            self._write_out()

    def size(self, path: str) -> int:
        with self._lock:
            return self.writer.size(self._handle(root_name(path)))

    def read_file(self, path: str) -> bytes:
        with self._lock:
            handle = self._handle(root_name(path))
            volume = self.writer.volume
            if self.fs_kind == FsKind.EXT4:
                inode = volume.read_inode(handle)
                return volume.read_file_range(inode, 0, inode.size_bytes)
            entry_set = volume.read_entry_set_at(handle)
            return volume.read_file_range(entry_set, 0, entry_set.valid_data_length)

    def free_fraction(self) -> float:
        with self._lock:
            if self.fs_kind == FsKind.EXT4:
                return self.writer.free_block_count() / self.writer.sb.total_blocks
            return self.writer.free_cluster_count() / self.writer.boot.cluster_count

    def sync(self):
        """Checkpoint the journal so the image is consistent without replay"""
        with self._lock:
            if self.journal is not None:
                self.journal.checkpoint()
                self._since_checkpoint = 0
            self.device.flush()
