import dataclasses
import logging
import struct
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

from app.services.fs_common import (
    Classification,
    CorruptStructure,
    FsError,
    MagicError,
    MappingGap,
    NotADirectory,
    NotFound,
    RangeError,
    ReadFn,
    RegionKind,
    UninitializedBlock,
    UnsupportedFeature,
)
from app.utils.helpers import is_all_zero

logger = logging.getLogger(__name__)

# --- Constants ---

SUPERBLOCK_OFFSET = 1024
SUPERBLOCK_SIZE = 1024
EXT4_MAGIC = 0xEF53
ROOT_INODE = 2
GOOD_OLD_FIRST_INO = 11
GOOD_OLD_INODE_SIZE = 128

COMPAT_HAS_JOURNAL = 0x4
COMPAT_FAST_COMMIT = 0x400

INCOMPAT_FILETYPE = 0x2
INCOMPAT_RECOVER = 0x4
INCOMPAT_JOURNAL_DEV = 0x8
INCOMPAT_META_BG = 0x10
INCOMPAT_EXTENTS = 0x40
INCOMPAT_64BIT = 0x80
INCOMPAT_FLEX_BG = 0x200
INCOMPAT_INLINE_DATA = 0x8000
INCOMPAT_ENCRYPT = 0x10000

RO_COMPAT_SPARSE_SUPER = 0x1
RO_COMPAT_LARGE_FILE = 0x2
RO_COMPAT_GDT_CSUM = 0x10
RO_COMPAT_BIGALLOC = 0x200
RO_COMPAT_METADATA_CSUM = 0x400

# Feature bits that change how the volume decodes; others may flip at mount time.
STABLE_COMPAT = COMPAT_HAS_JOURNAL | COMPAT_FAST_COMMIT
STABLE_INCOMPAT = (INCOMPAT_FILETYPE | INCOMPAT_JOURNAL_DEV | INCOMPAT_META_BG | INCOMPAT_EXTENTS
                   | INCOMPAT_64BIT | INCOMPAT_FLEX_BG | INCOMPAT_INLINE_DATA | INCOMPAT_ENCRYPT)
STABLE_RO_COMPAT = RO_COMPAT_SPARSE_SUPER | RO_COMPAT_GDT_CSUM | RO_COMPAT_BIGALLOC | RO_COMPAT_METADATA_CSUM

DEFM_JMODE_DATA = 0x20
DEFM_JMODE_ORDERED = 0x40

INODE_IMMUTABLE_FL = 0x10
INODE_APPEND_FL = 0x20
INODE_EXTENTS_FL = 0x80000

S_IFMT = 0xF000
S_IFDIR = 0x4000
S_IFREG = 0x8000

EXTENT_MAGIC = 0xF30A
EXTENT_MAX_DEPTH = 5
EXT_INIT_MAX_LEN = 32768
N_DIRECT_BLOCKS = 12

EXTENT_HEADER = struct.Struct("<HHHHI")
EXTENT_LEAF = struct.Struct("<IHHI")
EXTENT_INDEX = struct.Struct("<IIHH")
DIRENT = struct.Struct("<IHBB")

LE16 = "<H"
LE32 = "<I"


def read_little_endian(raw: bytes, offset: int, fmt: str):
    return struct.unpack_from(fmt, raw, offset)[0]


class Ext4Struct:

    FIELDS: List[Tuple[str, int, str]]

    @classmethod
    def from_bytes(cls, raw: bytes, **extra):
        kwargs = {}
        for attr, offset, fmt in cls.FIELDS:
            if offset + struct.calcsize(fmt) <= len(raw):
                kwargs[attr] = read_little_endian(raw, offset, fmt)
            else:
                kwargs[attr] = 0
        kwargs.update(extra)
        return cls(**kwargs)


# --- Superblock ---

EXT4SUPERBLOCK_FIELDS = [
    # attribute, offset, format
    ("s_inodes_count", 0x0, LE32),
    ("s_blocks_count_lo", 0x4, LE32),
    ("s_free_blocks_count_lo", 0xC, LE32),
    ("s_free_inodes_count", 0x10, LE32),
    ("s_first_data_block", 0x14, LE32),
    ("s_log_block_size", 0x18, LE32),
    ("s_blocks_per_group", 0x20, LE32),
    ("s_inodes_per_group", 0x28, LE32),
    ("s_magic", 0x38, LE16),
    ("s_rev_level", 0x4C, LE32),
    ("s_first_ino", 0x54, LE32),
    ("s_inode_size", 0x58, LE16),
    ("s_feature_compat", 0x5C, LE32),
    ("s_feature_incompat", 0x60, LE32),
    ("s_feature_ro_compat", 0x64, LE32),
    ("s_uuid", 0x68, "16s"),
    ("s_journal_inum", 0xE0, LE32),
    ("s_desc_size", 0xFE, LE16),
    ("s_default_mount_opts", 0x100, LE32),
    ("s_first_meta_bg", 0x104, LE32),
    ("s_blocks_count_hi", 0x150, LE32),
    ("s_free_blocks_count_hi", 0x158, LE32),
]


@dataclasses.dataclass
class Ext4Superblock(Ext4Struct):

    FIELDS = EXT4SUPERBLOCK_FIELDS

    s_inodes_count: int
    s_blocks_count_lo: int
    s_free_blocks_count_lo: int
    s_free_inodes_count: int
    s_first_data_block: int
    s_log_block_size: int
    s_blocks_per_group: int
    s_inodes_per_group: int
    s_magic: int
    s_rev_level: int
    s_first_ino: int
    s_inode_size: int
    s_feature_compat: int
    s_feature_incompat: int
    s_feature_ro_compat: int
    s_uuid: bytes
    s_journal_inum: int
    s_desc_size: int
    s_default_mount_opts: int
    s_first_meta_bg: int
    s_blocks_count_hi: int
    s_free_blocks_count_hi: int

    def __post_init__(self):
        if self.s_magic != EXT4_MAGIC:
            raise MagicError(f"no ext4 superblock: invalid magic number 0x{self.s_magic:04X}")

    @property
    def block_size(self) -> int:
        return 1024 << self.s_log_block_size

    @property
    def is_64bit(self) -> bool:
        return bool(self.s_feature_incompat & INCOMPAT_64BIT)

    @property
    def total_blocks(self) -> int:
        hi = self.s_blocks_count_hi if self.is_64bit else 0
        return (hi << 32) | self.s_blocks_count_lo

    @property
    def free_blocks(self) -> int:
        hi = self.s_free_blocks_count_hi if self.is_64bit else 0
        return (hi << 32) | self.s_free_blocks_count_lo

    @property
    def inode_size(self) -> int:
        return GOOD_OLD_INODE_SIZE if self.s_rev_level == 0 else self.s_inode_size

    @property
    def first_ino(self) -> int:
        return GOOD_OLD_FIRST_INO if self.s_rev_level == 0 else self.s_first_ino

    @property
    def desc_size(self) -> int:
        return self.s_desc_size if self.is_64bit and self.s_desc_size >= 32 else 32

    @property
    def group_count(self) -> int:
        span = self.total_blocks - self.s_first_data_block
        return (span + self.s_blocks_per_group - 1) // self.s_blocks_per_group

    @property
    def has_journal(self) -> bool:
        return bool(self.s_feature_compat & COMPAT_HAS_JOURNAL)

    @property
    def has_filetype(self) -> bool:
        return bool(self.s_feature_incompat & INCOMPAT_FILETYPE)

    @property
    def default_journal_mode(self) -> str:
        if self.s_default_mount_opts & DEFM_JMODE_DATA == DEFM_JMODE_DATA and not \
                self.s_default_mount_opts & DEFM_JMODE_ORDERED:
            return "data"
        return "ordered"

    def immutable_signature(self) -> tuple:
        """Fields that must never change after init"""
        return (
            self.s_inodes_count, self.total_blocks, self.s_first_data_block,
            self.s_log_block_size, self.s_blocks_per_group, self.s_inodes_per_group,
            self.s_magic, self.s_rev_level, self.s_first_ino, self.s_inode_size,
            self.s_feature_compat & STABLE_COMPAT,
            self.s_feature_incompat & STABLE_INCOMPAT,
            self.s_feature_ro_compat & STABLE_RO_COMPAT,
            self.s_uuid, self.s_journal_inum, self.s_desc_size,
        )

    def validate(self):
        """Refuse layouts the engine cannot decode safely"""
        if self.block_size not in (1024, 2048, 4096):
            raise UnsupportedFeature(f"block size {self.block_size}")
        if not self.s_feature_incompat & INCOMPAT_EXTENTS:
            raise UnsupportedFeature("extents feature absent")
        if self.s_feature_incompat & INCOMPAT_INLINE_DATA:
            raise UnsupportedFeature("inline_data")
        if self.s_feature_incompat & INCOMPAT_ENCRYPT:
            raise UnsupportedFeature("encrypt")
        if self.s_feature_incompat & INCOMPAT_JOURNAL_DEV:
            raise UnsupportedFeature("external journal device")
        if self.s_feature_compat & COMPAT_FAST_COMMIT:
            raise UnsupportedFeature("fast_commit")
        if self.s_feature_ro_compat & RO_COMPAT_BIGALLOC:
            raise UnsupportedFeature("bigalloc")
        if self.s_blocks_per_group == 0 or self.s_inodes_per_group == 0:
            raise CorruptStructure("zero blocks or inodes per group")


def decode_superblock(raw: bytes) -> Ext4Superblock:
    if len(raw) < SUPERBLOCK_SIZE:
        raise CorruptStructure(f"superblock too short ({len(raw)} bytes)")
    return Ext4Superblock.from_bytes(raw)


# --- Group descriptors ---

EXT4GROUP_DESCRIPTOR_FIELDS = [
    ("bg_block_bitmap_lo", 0x0, LE32),
    ("bg_inode_bitmap_lo", 0x4, LE32),
    ("bg_inode_table_lo", 0x8, LE32),
    ("bg_free_blocks_count_lo", 0xC, LE16),
    ("bg_free_inodes_count_lo", 0xE, LE16),
    ("bg_used_dirs_count_lo", 0x10, LE16),
    ("bg_flags", 0x12, LE16),
    ("bg_block_bitmap_hi", 0x20, LE32),
    ("bg_inode_bitmap_hi", 0x24, LE32),
    ("bg_inode_table_hi", 0x28, LE32),
    ("bg_free_blocks_count_hi", 0x2C, LE16),
    ("bg_free_inodes_count_hi", 0x2E, LE16),
]


@dataclasses.dataclass
class GroupDescriptor(Ext4Struct):

    FIELDS = EXT4GROUP_DESCRIPTOR_FIELDS

    bg_block_bitmap_lo: int
    bg_inode_bitmap_lo: int
    bg_inode_table_lo: int
    bg_free_blocks_count_lo: int
    bg_free_inodes_count_lo: int
    bg_used_dirs_count_lo: int
    bg_flags: int
    bg_block_bitmap_hi: int
    bg_inode_bitmap_hi: int
    bg_inode_table_hi: int
    bg_free_blocks_count_hi: int
    bg_free_inodes_count_hi: int
    group: int = 0

    @classmethod
    def decode(cls, raw: bytes, group: int) -> "GroupDescriptor":
        # 32-byte descriptors carry no high halves
        return cls.from_bytes(raw if len(raw) >= 64 else raw[:32], group=group)

    @property
    def block_bitmap(self) -> int:
        return (self.bg_block_bitmap_hi << 32) | self.bg_block_bitmap_lo

    @property
    def inode_bitmap(self) -> int:
        return (self.bg_inode_bitmap_hi << 32) | self.bg_inode_bitmap_lo

    @property
    def inode_table(self) -> int:
        return (self.bg_inode_table_hi << 32) | self.bg_inode_table_lo

    @property
    def free_blocks(self) -> int:
        return (self.bg_free_blocks_count_hi << 16) | self.bg_free_blocks_count_lo

    @property
    def free_inodes(self) -> int:
        return (self.bg_free_inodes_count_hi << 16) | self.bg_free_inodes_count_lo


# --- Inodes and extents ---

@dataclasses.dataclass(frozen=True)
class InodeLocator:
    inode_number: int
    offset: int
    size: int
    block_start: int
    block_end: int

    @property
    def end(self) -> int:
        return self.offset + self.size


@dataclasses.dataclass(frozen=True)
class LeafExtent:
    logical: int
    length: int
    physical: int
    unwritten: bool = False


@dataclasses.dataclass(frozen=True)
class IndexEntry:
    logical: int
    child: int


@dataclasses.dataclass
class ExtentNode:
    magic: int
    entry_count: int
    max_entries: int
    depth: int
    entries: list

    @classmethod
    def from_bytes(cls, raw: bytes, offset: int = 0) -> "ExtentNode":
        if is_all_zero(raw[:EXTENT_HEADER.size]):
            raise UninitializedBlock(offset)
        magic, count, maximum, depth, _ = EXTENT_HEADER.unpack_from(raw, 0)
        if magic != EXTENT_MAGIC:
            raise MagicError(f"Invalid extent header magic 0x{magic:04X} at offset {offset}")
        if count > maximum or EXTENT_HEADER.size + count * 12 > len(raw):
            raise CorruptStructure(f"extent node at {offset}: {count} entries, max {maximum}")
        if depth > EXTENT_MAX_DEPTH:
            raise CorruptStructure(f"extent depth {depth} exceeds {EXTENT_MAX_DEPTH}")
        entries = []
        for i in range(count):
            pos = EXTENT_HEADER.size + i * 12
            if depth == 0:
                block, length, start_hi, start_lo = EXTENT_LEAF.unpack_from(raw, pos)
                unwritten = length > EXT_INIT_MAX_LEN
                entries.append(LeafExtent(block, length - EXT_INIT_MAX_LEN if unwritten else length,
                                          (start_hi << 32) | start_lo, unwritten))
            else:
                block, leaf_lo, leaf_hi, _ = EXTENT_INDEX.unpack_from(raw, pos)
                entries.append(IndexEntry(block, (leaf_hi << 32) | leaf_lo))
        if any(a.logical >= b.logical for a, b in zip(entries, entries[1:])):
            raise CorruptStructure(f"extent entries out of order at offset {offset}")
        return cls(magic, count, maximum, depth, entries)


EXT4INODE_FIELDS = [
    ("i_mode", 0x0, LE16),
    ("i_size_lo", 0x4, LE32),
    ("i_mtime", 0x10, LE32),
    ("i_dtime", 0x14, LE32),
    ("i_links_count", 0x1A, LE16),
    ("i_blocks_lo", 0x1C, LE32),
    ("i_flags", 0x20, LE32),
    ("i_block", 0x28, "60s"),
    ("i_size_high", 0x6C, LE32),
]


@dataclasses.dataclass
class InodeRecord(Ext4Struct):

    FIELDS = EXT4INODE_FIELDS

    i_mode: int
    i_size_lo: int
    i_mtime: int
    i_dtime: int
    i_links_count: int
    i_blocks_lo: int
    i_flags: int
    i_block: bytes
    i_size_high: int
    inode_number: int = 0
    extent_root: Optional[ExtentNode] = None

    @property
    def size_bytes(self) -> int:
        return (self.i_size_high << 32) | self.i_size_lo

    @property
    def file_type(self) -> int:
        return self.i_mode & S_IFMT

    @property
    def is_dir(self) -> bool:
        return self.file_type == S_IFDIR

    @property
    def is_regular(self) -> bool:
        return self.file_type == S_IFREG

    @property
    def uses_extents(self) -> bool:
        return bool(self.i_flags & INODE_EXTENTS_FL)

    @property
    def append_only(self) -> bool:
        return bool(self.i_flags & INODE_APPEND_FL)

    @property
    def immutable(self) -> bool:
        return bool(self.i_flags & INODE_IMMUTABLE_FL)

    @property
    def protection_bits(self) -> int:
        return self.i_flags & (INODE_APPEND_FL | INODE_IMMUTABLE_FL)


def decode_inode(raw: bytes, inode_number: int = 0, offset: int = 0) -> InodeRecord:
    if is_all_zero(raw):
        raise UninitializedBlock(offset)
    if len(raw) < GOOD_OLD_INODE_SIZE:
        raise CorruptStructure(f"inode {inode_number} record too short ({len(raw)} bytes)")
    record = InodeRecord.from_bytes(raw, inode_number=inode_number)
    if record.uses_extents:
        try:
            record.extent_root = ExtentNode.from_bytes(record.i_block, offset + 0x28)
        except UninitializedBlock:
            raise MagicError(f"inode {inode_number}: extents flag set but i_block has no extent header")
    return record


@dataclasses.dataclass(frozen=True)
class BlockRun:
    """Logical run [logical, logical+length) mapped to physical, or a hole"""
    logical: int
    length: int
    physical: Optional[int]


def has_super(group: int, sparse: bool = True) -> bool:
    """sparse_super: backups only in groups 0, 1 and powers of 3, 5, 7"""
    if not sparse or group <= 1:
        return True
    for base in (3, 5, 7):
        n = base
        while n < group:
            n *= base
        if n == group:
            return True
    return False


class Ext4Volume:
    """Read-only view of an ext4 file system through a read(offset, length) callable"""

    def __init__(self, read: ReadFn, validate: bool = True):
        self.read = read
        self.sb = parse_superblock(read, validate=validate)
        self.block_size = self.sb.block_size
        self.descs_per_block = self.block_size // self.sb.desc_size
        self.gdt_ranges = self._gdt_ranges()
        self.journal_ranges: List[Tuple[int, int]] = []
        self.journal_blocks: List[int] = []
        if self.sb.has_journal and self.sb.s_journal_inum:
            self._map_journal()
        logger.debug(f"📂 ext4: {self.sb.total_blocks} blocks of {self.block_size}, {self.sb.group_count} group(s)")

    # --- geometry ---

    def group_first_block(self, group: int) -> int:
        return self.sb.s_first_data_block + group * self.sb.s_blocks_per_group

    def has_super(self, group: int) -> bool:
        return has_super(group, bool(self.sb.s_feature_ro_compat & RO_COMPAT_SPARSE_SUPER))

    def descriptor_block(self, group: int) -> int:
        meta_group = group // self.descs_per_block
        if self.sb.s_feature_incompat & INCOMPAT_META_BG and meta_group >= self.sb.s_first_meta_bg:
            first = meta_group * self.descs_per_block
            return self.group_first_block(first) + (1 if self.has_super(first) else 0)
        return self.sb.s_first_data_block + 1 + meta_group

    def descriptor_offset(self, group: int) -> int:
        index = group % self.descs_per_block
        return self.descriptor_block(group) * self.block_size + index * self.sb.desc_size

    def _gdt_ranges(self) -> List[Tuple[int, int]]:
        blocks = sorted({self.descriptor_block(g) for g in range(self.sb.group_count)})
        ranges: List[Tuple[int, int]] = []
        for block in blocks:
            start, end = block * self.block_size, (block + 1) * self.block_size
            if ranges and ranges[-1][1] == start:
                ranges[-1] = (ranges[-1][0], end)
            else:
                ranges.append((start, end))
        return ranges

    def group_descriptor(self, group: int) -> GroupDescriptor:
        if not 0 <= group < self.sb.group_count:
            raise CorruptStructure(f"group {group} out of range")
        offset = self.descriptor_offset(group)
        raw = self.read(offset, self.sb.desc_size)
        if is_all_zero(raw):
            raise UninitializedBlock(offset)
        return GroupDescriptor.decode(raw, group)

    def group_descriptors(self) -> List[GroupDescriptor]:
        return [self.group_descriptor(g) for g in range(self.sb.group_count)]

    def free_blocks_total(self) -> int:
        return sum(gd.free_blocks for gd in self.group_descriptors())

    # --- inodes ---

    def locate_inode(self, inode_number: int) -> InodeLocator:
        if not 1 <= inode_number <= self.sb.s_inodes_count:
            raise NotFound(f"inode {inode_number} out of range 1..{self.sb.s_inodes_count}")
        group, index = divmod(inode_number - 1, self.sb.s_inodes_per_group)
        table = self.group_descriptor(group).inode_table
        if table >= self.sb.total_blocks:
            raise CorruptStructure(f"inode table of group {group} beyond volume end")
        offset = table * self.block_size + index * self.sb.inode_size
        block_start = offset - offset % self.block_size
        return InodeLocator(inode_number, offset, self.sb.inode_size, block_start, block_start + self.block_size)

    def read_inode(self, inode_number: int, locator: Optional[InodeLocator] = None) -> InodeRecord:
        loc = locator or self.locate_inode(inode_number)
        return decode_inode(self.read(loc.offset, loc.size), inode_number, loc.offset)

    # --- block mapping ---

    def _read_block(self, block: int) -> bytes:
        if block >= self.sb.total_blocks:
            raise CorruptStructure(f"block {block} beyond volume end")
        return self.read(block * self.block_size, self.block_size)

    def _collect_extents(self, node: ExtentNode, lo: int, hi: int, budget: int, out: List[LeafExtent],
                         visited: Optional[List[int]] = None):
        if node.depth == 0:
            for extent in node.entries:
                if extent.logical < hi and lo < extent.logical + extent.length:
                    out.append(extent)
            return
        if budget == 0:
            raise CorruptStructure("extent tree deeper than allowed")
        for i, entry in enumerate(node.entries):
            span_end = node.entries[i + 1].logical if i + 1 < len(node.entries) else float("inf")
            if entry.logical < hi and lo < span_end:
                offset = entry.child * self.block_size
                if visited is not None:
                    visited.append(entry.child)
                child = ExtentNode.from_bytes(self._read_block(entry.child), offset)
                if child.depth != node.depth - 1:
                    raise CorruptStructure(f"extent node at {offset} has depth {child.depth}, expected {node.depth - 1}")
                self._collect_extents(child, lo, hi, budget - 1, out, visited)

    def _collect_blockmap(self, inode: InodeRecord, lo: int, hi: int) -> List[LeafExtent]:
        pointers = struct.unpack("<15I", inode.i_block)
        mapped = [(i, p) for i, p in enumerate(pointers[:N_DIRECT_BLOCKS]) if p]
        per_block = self.block_size // 4
        if hi > N_DIRECT_BLOCKS and pointers[12]:
            table = struct.unpack(f"<{per_block}I", self._read_block(pointers[12]))
            mapped += [(N_DIRECT_BLOCKS + i, p) for i, p in enumerate(table) if p]
        if hi > N_DIRECT_BLOCKS + per_block:
            raise UnsupportedFeature("double-indirect block maps")
        return [LeafExtent(i, 1, p) for i, p in mapped if lo <= i < hi]

    def map_blocks(self, inode: InodeRecord, first: int, count: int) -> List[BlockRun]:
        """Physical mapping of logical blocks [first, first+count), holes included"""
        hi = first + count
        if count <= 0:
            return []
        if inode.uses_extents:
            extents: List[LeafExtent] = []
            self._collect_extents(inode.extent_root, first, hi, EXTENT_MAX_DEPTH, extents)
        else:
            extents = self._collect_blockmap(inode, first, hi)

        runs: List[BlockRun] = []
        cursor = first
        for extent in sorted(extents, key=lambda e: e.logical):
            start = max(extent.logical, first)
            end = min(extent.logical + extent.length, hi)
            if start > cursor:
                runs.append(BlockRun(cursor, start - cursor, None))
            if end > start:
                physical = None if extent.unwritten else extent.physical + (start - extent.logical)
                if physical is not None and physical + (end - start) > self.sb.total_blocks:
                    raise CorruptStructure(f"extent maps beyond volume end (block {physical})")
                runs.append(BlockRun(start, end - start, physical))
            cursor = max(cursor, end)
        if cursor < hi:
            runs.append(BlockRun(cursor, hi - cursor, None))
        return runs

    def mapping_blocks(self, inode: InodeRecord, first: int, count: int) -> List[int]:
        """Extent tree or indirect blocks consulted to map logical blocks [first, first+count)"""
        if count <= 0:
            return []
        if not inode.uses_extents:
            (indirect,) = struct.unpack_from("<I", inode.i_block, 4 * N_DIRECT_BLOCKS)
            return [indirect] if first + count > N_DIRECT_BLOCKS and indirect else []
        visited: List[int] = []
        self._collect_extents(inode.extent_root, first, first + count, EXTENT_MAX_DEPTH, [], visited)
        return visited

    def physical_blocks(self, inode: InodeRecord, first: int, count: int) -> List[Optional[int]]:
        blocks: List[Optional[int]] = []
        for run in self.map_blocks(inode, first, count):
            if run.physical is None:
                blocks.extend([None] * run.length)
            else:
                blocks.extend(range(run.physical, run.physical + run.length))
        return blocks

    def read_blocks(self, inode: InodeRecord, first: int, count: int) -> List[bytes]:
        blocks = []
        for run in self.map_blocks(inode, first, count):
            if run.physical is None:
                raise MappingGap(run.logical)
            data = self.read(run.physical * self.block_size, run.length * self.block_size)
            blocks.extend(data[i * self.block_size:(i + 1) * self.block_size] for i in range(run.length))
        return blocks

    def read_file_range(self, inode: InodeRecord, start: int, end: int) -> bytes:
        if end > inode.size_bytes or start < 0 or start > end:
            raise RangeError(f"[{start}, {end}) of inode {inode.inode_number} (size {inode.size_bytes})")
        if start == end:
            return b""
        bs = self.block_size
        first = start // bs
        last = (end - 1) // bs
        data = b"".join(self.read_blocks(inode, first, last - first + 1))
        return data[start - first * bs:end - first * bs]

    # --- directories ---

    def iter_dir(self, inode: InodeRecord) -> Iterator[Tuple[str, int, int]]:
        if not inode.is_dir:
            raise NotADirectory(f"inode {inode.inode_number}")
        count = (inode.size_bytes + self.block_size - 1) // self.block_size
        for block in self.read_blocks(inode, 0, count):
            pos = 0
            while pos + DIRENT.size <= len(block):
                ino, rec_len, name_len, file_type = DIRENT.unpack_from(block, pos)
                if rec_len < DIRENT.size or pos + rec_len > len(block):
                    raise CorruptStructure(f"bad directory record length {rec_len} in inode {inode.inode_number}")
                if not self.sb.has_filetype:
                    name_len |= file_type << 8
                    file_type = 0
                if ino and name_len:
                    name = block[pos + DIRENT.size:pos + DIRENT.size + name_len]
                    yield name.decode("utf-8", errors="surrogateescape"), ino, file_type
                pos += rec_len

    def lookup(self, directory: InodeRecord, name: str) -> int:
        for entry_name, ino, _ in self.iter_dir(directory):
            if entry_name == name:
                return ino
        raise NotFound(name)

    def resolve_path(self, path: str) -> int:
        if not path.startswith("/"):
            raise NotFound(f"{path!r} is not absolute")
        current = ROOT_INODE
        for component in [c for c in path.split("/") if c]:
            directory = self.read_inode(current)
            if not directory.is_dir:
                raise NotADirectory(component)
            current = self.lookup(directory, component)
        return current

    # --- journal ---

    def journal_inode(self) -> InodeRecord:
        return self.read_inode(self.sb.s_journal_inum)

    def _map_journal(self):
        inode = self.journal_inode()
        count = inode.size_bytes // self.block_size
        self.journal_blocks = []
        for block in self.physical_blocks(inode, 0, count):
            if block is None:
                raise CorruptStructure("journal inode has holes")
            self.journal_blocks.append(block)
        ranges: List[Tuple[int, int]] = []
        for block in self.journal_blocks:
            start, end = block * self.block_size, (block + 1) * self.block_size
            if ranges and ranges[-1][1] == start:
                ranges[-1] = (ranges[-1][0], end)
            else:
                ranges.append((start, end))
        self.journal_ranges = ranges

    # --- write classification ---

    def classify_write(self, op, watched: Mapping[int, InodeLocator]) -> List[Classification]:
        """One entry per touched region in offset order; never empty"""
        result: List[Classification] = []
        covered = 0

        def region(kind: RegionKind, start: int, end: int, **extra):
            nonlocal covered
            lo, hi = max(start, op.offset), min(end, op.end)
            if lo < hi:
                result.append(Classification(kind, lo, hi, **extra))
                covered += hi - lo

        region(RegionKind.SUPERBLOCK_REGION, SUPERBLOCK_OFFSET, SUPERBLOCK_OFFSET + SUPERBLOCK_SIZE)
        for start, end in self.gdt_ranges:
            region(RegionKind.GROUP_DESCRIPTORS, start, end)
        for start, end in self.journal_ranges:
            region(RegionKind.JOURNAL_REGION, start, end)

        for log_id, loc in watched.items():
            if not op.overlaps(loc.offset, loc.end):
                continue
            record, error = None, None
            if op.offset <= loc.offset and loc.end <= op.end:
                try:
                    record = decode_inode(op.slice(loc.offset, loc.end), loc.inode_number, loc.offset)
                except FsError as e:
                    error = e
            region(RegionKind.WATCHED_INODE, loc.offset, loc.end, log_id=log_id, record=record, error=error)

        if covered < op.length:
            result.append(Classification(RegionKind.DATA_OR_OTHER, op.offset, op.end))
        result.sort(key=lambda c: (c.start, c.kind.value))
        return result


def parse_superblock(read: ReadFn, validate: bool = True) -> Ext4Superblock:
    raw = read(SUPERBLOCK_OFFSET, SUPERBLOCK_SIZE)
    sb = decode_superblock(raw)
    if validate:
        sb.validate()
    return sb
