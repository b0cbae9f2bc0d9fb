"""Minimal userspace writers for ext4 and exFAT images.

Stage 1 uses them to create empty logs; the simulated host driver uses the
append, truncate and overwrite paths to issue block writes like a kernel would.
"""
import collections
import dataclasses
import logging
import math
import struct
import time
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.models.schemas import FsKind
from app.services.exfat_reader import (
    ENTRY_BITMAP,
    ENTRY_FILE,
    ENTRY_NAME,
    ENTRY_SIZE,
    ENTRY_STREAM,
    FAT_EOC,
    FIRST_CLUSTER,
    NAME_CHARS_PER_ENTRY,
    PERCENT_IN_USE_OFFSET,
    STREAM_ALLOCATION_POSSIBLE,
    STREAM_ENTRY,
    STREAM_NO_FAT_CHAIN,
    ExfatError,
    ExfatVolume,
    name_hash,
    set_checksum,
)
from app.services.ext4_reader import (
    DIRENT,
    EXT_INIT_MAX_LEN,
    INODE_APPEND_FL,
    INODE_EXTENTS_FL,
    ROOT_INODE,
    S_IFREG,
    Ext4Volume,
    IndexEntry,
    InodeRecord,
    LeafExtent,
)
from app.services.formatter import (
    DIR_FILE_TYPE,
    INODE_LAYOUT,
    INODE_ROOT_EXTENTS,
    REG_FILE_TYPE,
    dirent_length,
    encode_dirent,
    encode_extent_node,
    encode_inode,
    extent_capacity,
    pack_fields,
)
from app.services.fs_common import FsError, NotFound, ReadFn
from app.services.inference import LogSpec

logger = logging.getLogger(__name__)

INODE_INDEX_FL = 0x1000
EXFAT_ATTR_ARCHIVE = 0x20
DATA_CACHE_UNITS = 4096


class WriterError(Exception):
    fmt = "writer error: {reason}"

    def __init__(self, reason: str = ""):
        self.reason = reason
        super().__init__(self.fmt.format(reason=reason))


class NameCollision(WriterError):
    fmt = "log name collision: {reason}"


class VolumeFull(WriterError):
    fmt = "volume full: {reason}"


@dataclasses.dataclass
class DirtyUnit:
    index: int
    data: bytes
    is_data: bool


class UnitCache:
    """Write-back cache of device units (blocks or clusters); reads see pending changes.

    Metadata units stay cached for the writer's lifetime, the way a host keeps
    its buffer cache; data units are kept in a bounded LRU.
    """

    def __init__(self, read: ReadFn, unit_size: int, data_units: int = DATA_CACHE_UNITS):
        self.source = read
        self.unit_size = unit_size
        self.data_units = data_units
        self._meta: Dict[int, bytearray] = {}
        self._data: "collections.OrderedDict[int, bytearray]" = collections.OrderedDict()
        self._dirty: Dict[int, bool] = {}

    def _cached(self, index: int) -> Optional[bytearray]:
        if index in self._meta:
            return self._meta[index]
        if index in self._data:
            self._data.move_to_end(index)
            return self._data[index]
        return None

    def unit(self, index: int) -> bytearray:
        cached = self._cached(index)
        if cached is None:
            cached = bytearray(self.source(index * self.unit_size, self.unit_size))
            self._meta[index] = cached
        return cached

    def edit(self, index: int, is_data: bool = False) -> bytearray:
        """Mutable unit, marked dirty"""
        buf = self.unit(index)
        self._dirty[index] = is_data and self._dirty.get(index, True)
        return buf

    def put(self, index: int, data: bytes, is_data: bool = False):
        if len(data) != self.unit_size:
            data = bytes(data) + bytes(self.unit_size - len(data))
        buf = bytearray(data)
        self._meta.pop(index, None)
        self._data.pop(index, None)
        if is_data:
            self._data[index] = buf
            while len(self._data) > self.data_units:
                oldest = next(iter(self._data))
                if oldest in self._dirty:
                    break
                self._data.popitem(last=False)
        else:
            self._meta[index] = buf
        self._dirty[index] = is_data

    def read(self, offset: int, length: int) -> bytes:
        size = self.unit_size
        chunks = []
        pos = offset
        end = offset + length
        while pos < end:
            index, within = divmod(pos, size)
            step = min(end - pos, size - within)
            cached = self._cached(index)
            if cached is not None:
                chunks.append(bytes(cached[within:within + step]))
            else:
                # uncached runs go to the device in one read
                run_end = pos + step
                while run_end < end and self._cached(run_end // size) is None:
                    run_end = min(end, run_end + size)
                chunks.append(self.source(pos, run_end - pos))
                step = run_end - pos
            pos += step
        return b"".join(chunks)

    def update(self, offset: int, data: bytes, is_data: bool = False):
        size = self.unit_size
        pos = 0
        while pos < len(data):
            index, within = divmod(offset + pos, size)
            step = min(len(data) - pos, size - within)
            buf = self.edit(index, is_data)
            buf[within:within + step] = data[pos:pos + step]
            pos += step

    @property
    def dirty_count(self) -> int:
        return len(self._dirty)

    def take_dirty(self) -> List[DirtyUnit]:
        units = []
        for index in sorted(self._dirty):
            cached = self._cached(index)
            units.append(DirtyUnit(index, bytes(cached), self._dirty[index]))
        self._dirty.clear()
        return units


def coalesce(units: Sequence[DirtyUnit], max_units: int = 256) -> List[Tuple[int, bytes]]:
    """Merge index-contiguous units into (first index, payload) writes"""
    writes: List[Tuple[int, List[bytes]]] = []
    for unit in sorted(units, key=lambda u: u.index):
        if writes and writes[-1][0] + len(writes[-1][1]) == unit.index and len(writes[-1][1]) < max_units:
            writes[-1][1].append(unit.data)
        else:
            writes.append((unit.index, [unit.data]))
    return [(index, b"".join(chunks)) for index, chunks in writes]


def free_bits(bitmap: bytes, start: int, stop: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(bitmap, dtype=np.uint8), bitorder="little")
    return np.flatnonzero(bits[start:stop] == 0) + start


def merge_extents(extents: Sequence[LeafExtent]) -> List[LeafExtent]:
    merged: List[LeafExtent] = []
    for extent in sorted(extents, key=lambda e: e.logical):
        if merged:
            last = merged[-1]
            if (last.logical + last.length == extent.logical and last.physical + last.length == extent.physical
                    and last.length + extent.length <= EXT_INIT_MAX_LEN):
                merged[-1] = LeafExtent(last.logical, last.length + extent.length, last.physical)
                continue
        merged.append(extent)
    return merged


def root_name(path: str) -> str:
    name = path.strip("/")
    if not path.startswith("/") or not name or "/" in name:
        raise WriterError(f"{path!r} is not a root-level path")
    return name


class Ext4Writer:
    """Allocates inodes and blocks through the bitmaps and keeps group and superblock counts"""

    kind = FsKind.EXT4

    def __init__(self, read: ReadFn, clock: Callable[[], float] = time.time):
        probe = Ext4Volume(read)
        self.cache = UnitCache(read, probe.block_size)
        self.volume = Ext4Volume(self.cache.read)
        self.sb = self.volume.sb
        self.bs = self.volume.block_size
        self.clock = clock
        self.has_journal = self.sb.has_journal
        self.journal_mode = self.sb.default_journal_mode if self.has_journal else "none"
        self.reserved = set(self.volume.journal_blocks)

    # --- counters ---

    def _add(self, offset: int, fmt: str, delta: int):
        (value,) = struct.unpack(fmt, self.cache.read(offset, struct.calcsize(fmt)))
        self.cache.update(offset, struct.pack(fmt, value + delta))

    def _adjust(self, group: int, blocks: int = 0, inodes: int = 0, dirs: int = 0):
        base = self.volume.descriptor_offset(group)
        wide = self.sb.desc_size >= 64
        for delta, lo, hi in ((blocks, 0xC, 0x2C), (inodes, 0xE, 0x2E), (dirs, 0x10, 0x30)):
            if not delta:
                continue
            if wide:
                (low,) = struct.unpack("<H", self.cache.read(base + lo, 2))
                (high,) = struct.unpack("<H", self.cache.read(base + hi, 2))
                value = ((high << 16) | low) + delta
                self.cache.update(base + lo, struct.pack("<H", value & 0xFFFF))
                self.cache.update(base + hi, struct.pack("<H", value >> 16))
            else:
                self._add(base + lo, "<H", delta)
        if blocks:
            self._add(1024 + 0xC, "<I", blocks)
        if inodes:
            self._add(1024 + 0x10, "<I", inodes)

    # --- allocation ---

    def free_block_count(self) -> int:
        return self.volume.free_blocks_total()

    def alloc_blocks(self, count: int, goal: Optional[int] = None) -> List[int]:
        """count blocks, preferring the run that starts at goal"""
        if count <= 0:
            return []
        if self.free_block_count() < count:
            raise VolumeFull(f"{count} blocks requested")
        sb = self.sb
        first_data, per_group, total = sb.s_first_data_block, sb.s_blocks_per_group, sb.total_blocks
        if goal is None or not first_data <= goal < total:
            goal = first_data
        start_group = (goal - first_data) // per_group
        found: List[int] = []
        for step in range(sb.group_count + 1):
            group = (start_group + step) % sb.group_count
            descriptor = self.volume.group_descriptor(group)
            if descriptor.free_blocks == 0:
                continue
            base = self.volume.group_first_block(group)
            limit = min(per_group, total - base)
            begin = goal - base if step == 0 else 0
            if step == sb.group_count:
                limit, begin = goal - base, 0
            bitmap = self.cache.unit(descriptor.block_bitmap)
            taken = []
            for index in free_bits(bytes(bitmap), begin, limit):
                block = base + int(index)
                if block in self.reserved:
                    continue
                bitmap[index >> 3] |= 1 << (index & 7)
                taken.append(block)
                if len(found) + len(taken) == count:
                    break
            if taken:
                self.cache.edit(descriptor.block_bitmap)
                self._adjust(group, blocks=-len(taken))
            found += taken
            if len(found) == count:
                return found
        raise VolumeFull(f"only {len(found)} of {count} blocks found")

    def free_blocks(self, blocks: Sequence[int]):
        per_group = self.sb.s_blocks_per_group
        for block in blocks:
            group, index = divmod(block - self.sb.s_first_data_block, per_group)
            bitmap = self.cache.edit(self.volume.group_descriptor(group).block_bitmap)
            bitmap[index >> 3] &= ~(1 << (index & 7)) & 0xFF
            self._adjust(group, blocks=1)

    def alloc_inode(self, directory: bool = False) -> int:
        per_group = self.sb.s_inodes_per_group
        for group in range(self.sb.group_count):
            descriptor = self.volume.group_descriptor(group)
            if descriptor.free_inodes == 0:
                continue
            begin = self.sb.first_ino - 1 if group == 0 else 0
            bitmap = self.cache.edit(descriptor.inode_bitmap)
            for index in free_bits(bytes(bitmap), begin, per_group)[:1]:
                index = int(index)
                bitmap[index >> 3] |= 1 << (index & 7)
                self._adjust(group, inodes=-1, dirs=1 if directory else 0)
                return group * per_group + index + 1
        raise VolumeFull("no free inode")

    def _release_inode(self, number: int):
        group, index = divmod(number - 1, self.sb.s_inodes_per_group)
        bitmap = self.cache.edit(self.volume.group_descriptor(group).inode_bitmap)
        bitmap[index >> 3] &= ~(1 << (index & 7)) & 0xFF
        self._adjust(group, inodes=1)

    # --- inodes and extents ---

    def read_inode(self, number: int) -> Tuple[InodeRecord, bytearray, int]:
        loc = self.volume.locate_inode(number)
        raw = bytearray(self.cache.read(loc.offset, loc.size))
        return self.volume.read_inode(number, loc), raw, loc.offset

    def extents(self, inode: InodeRecord) -> List[LeafExtent]:
        count = math.ceil(inode.size_bytes / self.bs)
        runs = self.volume.map_blocks(inode, 0, count)
        return [LeafExtent(run.logical, run.length, run.physical) for run in runs if run.physical is not None]

    def _leaf_blocks(self, inode: InodeRecord) -> List[int]:
        root = inode.extent_root
        if root is None or root.depth == 0:
            return []
        if root.depth > 1:
            raise WriterError(f"inode {inode.inode_number}: extent trees deeper than one level are not rewritten")
        return [entry.child for entry in root.entries]

    def _set_extents(self, inode: InodeRecord, raw: bytearray, extents: List[LeafExtent]) -> int:
        """Rewrite the extent tree in raw; returns the change in tree blocks"""
        extents = merge_extents(extents)
        old_leaves = self._leaf_blocks(inode)
        if len(extents) <= INODE_ROOT_EXTENTS:
            raw[0x28:0x28 + 60] = encode_extent_node(extents, 0, INODE_ROOT_EXTENTS, 60)
            self.free_blocks(old_leaves)
            return -len(old_leaves)
        per_leaf = extent_capacity(self.bs)
        if len(extents) > per_leaf:
            raise WriterError(f"inode {inode.inode_number}: {len(extents)} extents exceed one leaf block")
        if old_leaves:
            leaf, spare = old_leaves[0], old_leaves[1:]
        else:
            leaf, spare = self.alloc_blocks(1, extents[-1].physical + extents[-1].length)[0], []
        self.cache.put(leaf, encode_extent_node(extents, 0, per_leaf, self.bs))
        raw[0x28:0x28 + 60] = encode_extent_node([IndexEntry(0, leaf)], 1, INODE_ROOT_EXTENTS, 60)
        self.free_blocks(spare)
        return (0 if old_leaves else 1) - len(spare)

    def _store_inode(self, offset: int, raw: bytearray, **values):
        now = int(self.clock())
        values.setdefault("i_mtime", now)
        values.setdefault("i_ctime", now)
        pack_fields(raw, INODE_LAYOUT, values)
        self.cache.update(offset, bytes(raw))

    # --- directory ---

    def lookup(self, name: str) -> int:
        root = self.volume.read_inode(ROOT_INODE)
        return self.volume.lookup(root, name)

    def _add_dirent(self, number: int, name: bytes, file_type: int):
        root, raw, offset = self.read_inode(ROOT_INODE)
        if root.i_flags & INODE_INDEX_FL:
            raise WriterError("indexed root directories are not supported")
        if not self.sb.has_filetype:
            file_type = 0
        needed = dirent_length(len(name))
        count = root.size_bytes // self.bs
        blocks = self.volume.physical_blocks(root, 0, count)
        for block in blocks:
            data = self.cache.unit(block)
            pos = 0
            while pos + DIRENT.size <= self.bs:
                ino, rec_len, name_len, _ = DIRENT.unpack_from(data, pos)
                if rec_len < DIRENT.size:
                    break
                used = dirent_length(name_len) if ino else 0
                if rec_len - used >= needed:
                    buf = self.cache.edit(block)
                    if used:
                        struct.pack_into("<H", buf, pos + 4, used)
                    buf[pos + used:pos + rec_len] = encode_dirent(number, name, file_type, rec_len - used)
                    return
                pos += rec_len
        goal = blocks[-1] + 1 if blocks and blocks[-1] is not None else None
        block = self.alloc_blocks(1, goal)[0]
        self.cache.put(block, encode_dirent(number, name, file_type, self.bs))
        extents = self.extents(root) + [LeafExtent(count, 1, block)]
        tree = self._set_extents(root, raw, extents)
        size = root.size_bytes + self.bs
        self._store_inode(offset, raw, i_size_lo=size & 0xFFFFFFFF, i_size_high=size >> 32,
                          i_blocks_lo=root.i_blocks_lo + (1 + tree) * self.bs // 512)

    def _remove_dirent(self, name: bytes) -> int:
        root = self.volume.read_inode(ROOT_INODE)
        for block in self.volume.physical_blocks(root, 0, root.size_bytes // self.bs):
            data = self.cache.unit(block)
            pos, previous = 0, None
            while pos + DIRENT.size <= self.bs:
                ino, rec_len, name_len, _ = DIRENT.unpack_from(data, pos)
                if rec_len < DIRENT.size:
                    break
                if ino and bytes(data[pos + DIRENT.size:pos + DIRENT.size + name_len]) == name:
                    buf = self.cache.edit(block)
                    if previous is None:
                        struct.pack_into("<I", buf, pos, 0)
                    else:
                        (prev_len,) = struct.unpack_from("<H", buf, previous + 4)
                        struct.pack_into("<H", buf, previous + 4, prev_len + rec_len)
                    return ino
                previous, pos = pos, pos + rec_len
        raise NotFound(name.decode(errors="replace"))

    # --- files ---

    def create_file(self, name: str, append_only: bool = True) -> int:
        try:
            self.lookup(name)
        except NotFound:
            pass
        else:
            raise NameCollision(name)
        number = self.alloc_inode()
        flags = INODE_EXTENTS_FL | (INODE_APPEND_FL if append_only else 0)
        empty_root = encode_extent_node([], 0, INODE_ROOT_EXTENTS, 60)
        loc = self.volume.locate_inode(number)
        self.cache.update(loc.offset, encode_inode(S_IFREG | 0o644, 0, 1, flags, empty_root, 0,
                                                   int(self.clock()), inode_size=loc.size))
        self._add_dirent(number, name.encode(), REG_FILE_TYPE)
        logger.debug(f"📝 ext4: created {name} as inode {number}{' (append-only)' if append_only else ''}")
        return number

    def size(self, number: int) -> int:
        return self.volume.read_inode(number).size_bytes

    def append(self, number: int, data: bytes) -> int:
        """Write data after the current end of file; returns the new size"""
        inode, raw, offset = self.read_inode(number)
        size, bs = inode.size_bytes, self.bs
        extents = self.extents(inode)
        pos = 0
        tail = size % bs
        if tail and data:
            block = self.volume.physical_blocks(inode, size // bs, 1)[0]
            if block is None:
                raise WriterError(f"inode {number}: tail block unmapped")
            unit = bytearray(self.cache.unit(block))
            pos = min(bs - tail, len(data))
            unit[tail:tail + pos] = data[:pos]
            self.cache.put(block, bytes(unit), is_data=True)
        remaining = len(data) - pos
        new_blocks = 0
        tree = 0
        if remaining:
            new_blocks = math.ceil(remaining / bs)
            goal = extents[-1].physical + extents[-1].length if extents else None
            first_logical = math.ceil(size / bs)
            blocks = self.alloc_blocks(new_blocks, goal)
            for i, block in enumerate(blocks):
                self.cache.put(block, data[pos + i * bs:pos + (i + 1) * bs], is_data=True)
            extents += [LeafExtent(first_logical + i, 1, block) for i, block in enumerate(blocks)]
            tree = self._set_extents(inode, raw, extents)
        new_size = size + len(data)
        self._store_inode(offset, raw, i_size_lo=new_size & 0xFFFFFFFF, i_size_high=new_size >> 32,
                          i_blocks_lo=inode.i_blocks_lo + (new_blocks + tree) * bs // 512)
        return new_size

    def overwrite(self, number: int, file_offset: int, data: bytes):
        """In-place rewrite of existing file bytes (what an attacker with raw access does)"""
        inode = self.volume.read_inode(number)
        if file_offset + len(data) > inode.size_bytes:
            raise WriterError(f"inode {number}: overwrite beyond end of file")
        pos = 0
        while pos < len(data):
            logical, within = divmod(file_offset + pos, self.bs)
            block = self.volume.physical_blocks(inode, logical, 1)[0]
            step = min(len(data) - pos, self.bs - within)
            unit = bytearray(self.cache.unit(block))
            unit[within:within + step] = data[pos:pos + step]
            self.cache.put(block, bytes(unit), is_data=True)
            pos += step

    def truncate(self, number: int, new_size: int):
        inode, raw, offset = self.read_inode(number)
        if new_size > inode.size_bytes:
            raise WriterError(f"inode {number}: truncate cannot grow the file")
        self._store_inode(offset, raw, i_size_lo=new_size & 0xFFFFFFFF, i_size_high=new_size >> 32)

    def set_flags(self, number: int, flags: int):
        _, raw, offset = self.read_inode(number)
        self._store_inode(offset, raw, i_flags=flags)

    def remove(self, name: str) -> List[int]:
        """Unlink a regular file; returns the blocks it released"""
        number = self._remove_dirent(name.encode())
        inode, raw, offset = self.read_inode(number)
        released = [b for e in self.extents(inode) for b in range(e.physical, e.physical + e.length)]
        released += self._leaf_blocks(inode)
        self.free_blocks(released)
        self._release_inode(number)
        self._store_inode(offset, raw, i_links_count=0, i_dtime=int(self.clock()), i_flags=INODE_EXTENTS_FL,
                          i_blocks_lo=0)
        logger.debug(f"🗑️ ext4: removed {name} (inode {number}, {len(released)} block(s))")
        return released

    def locator(self, number: int):
        return self.volume.locate_inode(number)


# --- exFAT ---

def exfat_timestamp(epoch: float) -> int:
    t = time.gmtime(epoch)
    return ((max(t.tm_year, 1980) - 1980) << 25) | (t.tm_mon << 21) | (t.tm_mday << 16) | \
        (t.tm_hour << 11) | (t.tm_min << 5) | (t.tm_sec // 2)


def encode_entry_set(name: str, attributes: int = EXFAT_ATTR_ARCHIVE, first_cluster: int = 0,
                     valid_length: int = 0, data_length: int = 0, flags: int = STREAM_ALLOCATION_POSSIBLE,
                     timestamp: int = 0) -> bytes:
    """File + stream extension + name entries with a valid set checksum"""
    units = name.encode("utf-16-le")
    name_entries = math.ceil(len(name) / NAME_CHARS_PER_ENTRY)
    if not name or len(name) > 255:
        raise WriterError(f"invalid exFAT name {name!r}")
    raw = bytearray((2 + name_entries) * ENTRY_SIZE)
    struct.pack_into("<BBHH", raw, 0, ENTRY_FILE, 1 + name_entries, 0, attributes)
    struct.pack_into("<III", raw, 8, timestamp, timestamp, timestamp)
    STREAM_ENTRY.pack_into(raw, ENTRY_SIZE, ENTRY_STREAM, flags, 0, len(name), name_hash(name), 0,
                           valid_length, 0, first_cluster, data_length)
    for index in range(name_entries):
        pos = (2 + index) * ENTRY_SIZE
        raw[pos] = ENTRY_NAME
        piece = units[index * 2 * NAME_CHARS_PER_ENTRY:(index + 1) * 2 * NAME_CHARS_PER_ENTRY]
        raw[pos + 2:pos + 2 + len(piece)] = piece
    struct.pack_into("<H", raw, 2, set_checksum(bytes(raw)))
    return bytes(raw)


class ExfatWriter:
    """Allocates clusters through the allocation bitmap and the FAT"""

    kind = FsKind.EXFAT

    def __init__(self, read: ReadFn, clock: Callable[[], float] = time.time):
        probe = ExfatVolume(read)
        self.cache = UnitCache(read, probe.cluster_size)
        self.volume = ExfatVolume(self.cache.read)
        self.boot = self.volume.boot
        self.cs = self.volume.cluster_size
        self.clock = clock
        self.journal_mode = "none"
        self._locate_bitmap()

    def _locate_bitmap(self):
        for _, raw in self.volume.iter_root_entries():
            if raw[0] == ENTRY_BITMAP:
                first, length = struct.unpack_from("<IQ", raw, 20)
                self.bitmap_offsets = [self.volume.cluster_offset(c) for c in self.volume.chain(first)]
                self.bitmap_length = length
                return
        raise ExfatError("allocation bitmap entry missing from the root directory")

    def _bitmap_byte_offset(self, byte_index: int) -> int:
        cluster, within = divmod(byte_index, self.cs)
        return self.bitmap_offsets[cluster] + within

    def _bitmap(self) -> bytes:
        return b"".join(self.cache.read(offset, min(self.cs, self.bitmap_length - i * self.cs))
                        for i, offset in enumerate(self.bitmap_offsets))

    def _set_allocated(self, clusters: Sequence[int], allocated: bool):
        for cluster in clusters:
            index = cluster - FIRST_CLUSTER
            offset = self._bitmap_byte_offset(index >> 3)
            (byte,) = self.cache.read(offset, 1)
            byte = byte | (1 << (index & 7)) if allocated else byte & ~(1 << (index & 7)) & 0xFF
            self.cache.update(offset, bytes([byte]))
        self._update_percent_in_use()

    def _update_percent_in_use(self):
        bitmap = np.frombuffer(self._bitmap(), dtype=np.uint8)
        used = int(np.unpackbits(bitmap, bitorder="little")[:self.boot.cluster_count].sum())
        percent = used * 100 // self.boot.cluster_count
        if self.cache.read(PERCENT_IN_USE_OFFSET, 1)[0] != percent:
            self.cache.update(PERCENT_IN_USE_OFFSET, bytes([percent]))

    def free_cluster_count(self) -> int:
        return len(free_bits(self._bitmap(), 0, self.boot.cluster_count))

    def alloc_clusters(self, count: int, goal: Optional[int] = None) -> List[int]:
        if count <= 0:
            return []
        total = self.boot.cluster_count
        start = goal - FIRST_CLUSTER if goal is not None and self.volume.valid_cluster(goal) else 0
        bitmap = self._bitmap()
        candidates = np.concatenate([free_bits(bitmap, start, total), free_bits(bitmap, 0, start)])
        if len(candidates) < count:
            raise VolumeFull(f"{count} clusters requested, {len(candidates)} free")
        clusters = [int(c) + FIRST_CLUSTER for c in candidates[:count]]
        self._set_allocated(clusters, True)
        return clusters

    def _set_fat(self, cluster: int, value: int):
        self.cache.update(self.volume.fat_range[0] + 4 * cluster, struct.pack("<I", value))

    def _link(self, clusters: Sequence[int]):
        for current, following in zip(clusters, clusters[1:]):
            self._set_fat(current, following)
        if clusters:
            self._set_fat(clusters[-1], FAT_EOC)

    # --- directory ---

    def lookup(self, name: str) -> Tuple[int, ...]:
        return self.volume.locate_direntry(name).offsets

    def _root_slots(self, count: int) -> List[int]:
        try:
            return self.volume.free_root_slots(count)
        except ExfatError:
            chain = self.volume.chain(self.boot.root_directory_cluster)
            cluster = self.alloc_clusters(1, chain[-1] + 1)[0]
            self.cache.put(self.volume.cluster_offset(cluster) // self.cs, bytes(self.cs))
            self._set_fat(chain[-1], cluster)
            self._set_fat(cluster, FAT_EOC)
            return self.volume.free_root_slots(count)

    def _store_set(self, offsets: Sequence[int], raw: bytes):
        for index, offset in enumerate(offsets):
            self.cache.update(offset, raw[index * ENTRY_SIZE:(index + 1) * ENTRY_SIZE])

    def create_file(self, name: str, append_only: bool = True) -> Tuple[int, ...]:
        try:
            self.volume.locate_direntry(name)
        except NotFound:
            pass
        else:
            raise NameCollision(name)
        raw = encode_entry_set(name, timestamp=exfat_timestamp(self.clock()))
        offsets = tuple(self._root_slots(len(raw) // ENTRY_SIZE))
        self._store_set(offsets, raw)
        logger.debug(f"📝 exFAT: created {name} with {len(offsets)} directory entries")
        return offsets

    def size(self, offsets: Sequence[int]) -> int:
        return self.volume.read_entry_set_at(offsets).valid_data_length

    def _patch_set(self, entry_set, **fields) -> bytes:
        raw = bytearray(entry_set.raw)
        if "flags" in fields:
            raw[ENTRY_SIZE + 1] = fields["flags"]
        if "valid_length" in fields:
            struct.pack_into("<Q", raw, ENTRY_SIZE + 8, fields["valid_length"])
        if "first_cluster" in fields:
            struct.pack_into("<I", raw, ENTRY_SIZE + 20, fields["first_cluster"])
        if "data_length" in fields:
            struct.pack_into("<Q", raw, ENTRY_SIZE + 24, fields["data_length"])
        struct.pack_into("<I", raw, 12, exfat_timestamp(self.clock()))
        struct.pack_into("<H", raw, 2, set_checksum(bytes(raw)))
        return bytes(raw)

    def append(self, offsets: Sequence[int], data: bytes) -> int:
        entry_set = self.volume.read_entry_set_at(offsets)
        cs = self.cs
        size = entry_set.valid_data_length
        allocated = entry_set.data_length // cs if entry_set.first_cluster else 0
        clusters = self.volume.file_clusters(entry_set, allocated) if allocated else []
        new_size = size + len(data)
        pos = 0
        if size < allocated * cs and data:
            index, within = divmod(size, cs)
            for cluster in clusters[index:]:
                unit_index = self.volume.cluster_offset(cluster) // cs
                unit = bytearray(self.cache.unit(unit_index))
                step = min(cs - within, len(data) - pos)
                unit[within:within + step] = data[pos:pos + step]
                self.cache.put(unit_index, bytes(unit), is_data=True)
                pos += step
                within = 0
                if pos == len(data):
                    break

        fields = dict(valid_length=new_size)
        needed = math.ceil(new_size / cs) - allocated
        if needed > 0:
            goal = clusters[-1] + 1 if clusters else None
            fresh = self.alloc_clusters(needed, goal)
            for i, cluster in enumerate(fresh):
                chunk = data[pos + i * cs:pos + (i + 1) * cs]
                self.cache.put(self.volume.cluster_offset(cluster) // cs, chunk, is_data=True)
            contiguous = all(b == a + 1 for a, b in zip(clusters + fresh, (clusters + fresh)[1:]))
            flags = entry_set.stream_flags
            if not clusters:
                fields["first_cluster"] = fresh[0]
                if contiguous:
                    flags |= STREAM_NO_FAT_CHAIN
                else:
                    self._link(fresh)
            elif entry_set.no_fat_chain and contiguous:
                pass
            else:
                if entry_set.no_fat_chain:
                    flags &= ~STREAM_NO_FAT_CHAIN
                    logger.debug(f"🔗 exFAT: {entry_set.name} leaves NoFatChain at {len(clusters)} clusters")
                self._link(clusters + fresh)
            fields["flags"] = flags | STREAM_ALLOCATION_POSSIBLE
            fields["data_length"] = (allocated + needed) * cs
        self._store_set(offsets, self._patch_set(entry_set, **fields))
        return new_size

    def overwrite(self, offsets: Sequence[int], file_offset: int, data: bytes):
        entry_set = self.volume.read_entry_set_at(offsets)
        if file_offset + len(data) > entry_set.valid_data_length:
            raise WriterError(f"{entry_set.name}: overwrite beyond valid data length")
        for start, end in self.volume.file_ranges(entry_set, file_offset, file_offset + len(data)):
            chunk = data[:end - start]
            data = data[end - start:]
            self.cache.update(start, chunk, is_data=True)

    def truncate(self, offsets: Sequence[int], new_size: int):
        entry_set = self.volume.read_entry_set_at(offsets)
        if new_size > entry_set.valid_data_length:
            raise WriterError(f"{entry_set.name}: truncate cannot grow the file")
        self._store_set(offsets, self._patch_set(entry_set, valid_length=new_size))

    def remove(self, name: str) -> List[int]:
        entry_set = self.volume.locate_direntry(name)
        allocated = entry_set.data_length // self.cs if entry_set.first_cluster else 0
        clusters = self.volume.file_clusters(entry_set, allocated) if allocated else []
        raw = bytearray(entry_set.raw)
        for index in range(0, len(raw), ENTRY_SIZE):
            raw[index] &= 0x7F
        self._store_set(entry_set.offsets, bytes(raw))
        if not entry_set.no_fat_chain:
            for cluster in clusters:
                self._set_fat(cluster, 0)
        self._set_allocated(clusters, False)
        return clusters

    def locator(self, offsets: Sequence[int]):
        return tuple(offsets)


def open_writer(fs_kind: FsKind, read: ReadFn, clock: Callable[[], float] = time.time):
    try:
        if fs_kind == FsKind.EXT4:
            return Ext4Writer(read, clock)
        return ExfatWriter(read, clock)
    except FsError as e:
        raise WriterError(f"cannot open {fs_kind.value} volume: {e}") from e


def flush_units(image, units: Sequence[DirtyUnit], unit_size: int):
    for index, payload in coalesce(units):
        image.write(index * unit_size, payload)


def create_empty_logs(image, fs_kind: FsKind, paths: Sequence[str]) -> List[LogSpec]:
    """Stage 1: one zero-length file per root-level path; log ids are assigned 1..N"""
    names = [root_name(path) for path in paths]
    if len(set(names)) != len(names):
        raise NameCollision(", ".join(sorted({n for n in names if names.count(n) > 1})))
    writer = open_writer(fs_kind, image.read_raw)
    handles = []
    try:
        for name in names:
            handles.append(writer.create_file(name, append_only=True))
    except FsError as e:
        raise WriterError(str(e)) from e
    flush_units(image, writer.cache.take_dirty(), writer.cache.unit_size)
    image.flush()

    specs = []
    for log_id, (path, handle) in enumerate(zip(paths, handles), start=1):
        specs.append(LogSpec(log_id, "/" + root_name(path), fs_kind, writer.locator(handle), 0))
        logger.info(f"📄 Created empty log {path} (log id {log_id})")
    return specs
