"""Image formatting: a built-in minimal ext4/exFAT formatter and the system mkfs tools.

The encoders here are shared with the log writer and the simulated host driver.
"""
import dataclasses
import logging
import math
import shutil
import struct
import subprocess
import time
import uuid
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from app.models.schemas import FsKind, JournalMode
from app.services.exfat_reader import (
    ENTRY_BITMAP,
    ENTRY_SIZE,
    ENTRY_UPCASE,
    FAT_EOC,
    FIRST_CLUSTER,
    FS_NAME,
    boot_checksum,
)
from app.services.ext4_reader import (
    COMPAT_HAS_JOURNAL,
    DEFM_JMODE_DATA,
    DEFM_JMODE_ORDERED,
    EXT4_MAGIC,
    EXT_INIT_MAX_LEN,
    EXTENT_HEADER,
    EXTENT_INDEX,
    EXTENT_LEAF,
    EXTENT_MAGIC,
    DIRENT,
    INCOMPAT_EXTENTS,
    INCOMPAT_FILETYPE,
    INODE_EXTENTS_FL,
    RO_COMPAT_LARGE_FILE,
    RO_COMPAT_SPARSE_SUPER,
    ROOT_INODE,
    S_IFDIR,
    S_IFREG,
    SUPERBLOCK_OFFSET,
    SUPERBLOCK_SIZE,
    LeafExtent,
    has_super,
)
from app.services.jbd2_watch import (
    FEATURE_INCOMPAT_CSUM_V3,
    FEATURE_INCOMPAT_REVOKE,
    JBD2_MAGIC,
    MASK32,
    SUPERBLOCK_V2,
    kernel_crc32c,
)

logger = logging.getLogger(__name__)

WriteFn = Callable[[int, bytes], object]

RO_COMPAT_EXTRA_ISIZE = 0x40
BG_INODE_ZEROED = 0x4
JOURNAL_INODE = 8
LOST_FOUND_INODE = 11
FIRST_INO = 11
INODE_SIZE = 256
EXTRA_ISIZE = 32
INODE_ROOT_EXTENTS = 4
DIR_FILE_TYPE = 2
REG_FILE_TYPE = 1
JNL_BACKUP_BLOCKS = 1
MIN_KERNEL_JOURNAL = 1024
JBD2_CRC32C_CHKSUM = 4
JOURNAL_SB_SIZE = 1024
JOURNAL_SB_CHECKSUM = 0xFC

EXFAT_SECTOR = 512
EXFAT_FAT_OFFSET = 128
EXFAT_MEDIA = 0xFFFFFFF8
EXFAT_REVISION = 0x0100
ENTRY_VOLUME_LABEL = 0x83
UPCASE_ENTRIES = 128


class FormatError(Exception):
    fmt = "format error: {reason}"

    def __init__(self, reason: str = ""):
        self.reason = reason
        super().__init__(self.fmt.format(reason=reason))


class FormatterUnavailable(FormatError):
    fmt = "formatter unavailable: {reason}"


# --- field packing ---

def pack_fields(buf: bytearray, layout: Sequence[Tuple[str, int, str]], values: Dict[str, object], base: int = 0):
    """Write values into buf at the offsets named by layout (unlisted names are errors)"""
    offsets = {name: (offset, fmt) for name, offset, fmt in layout}
    for name, value in values.items():
        offset, fmt = offsets[name]
        struct.pack_into(fmt, buf, base + offset, value)


SUPERBLOCK_LAYOUT = [
    ("s_inodes_count", 0x0, "<I"),
    ("s_blocks_count_lo", 0x4, "<I"),
    ("s_r_blocks_count_lo", 0x8, "<I"),
    ("s_free_blocks_count_lo", 0xC, "<I"),
    ("s_free_inodes_count", 0x10, "<I"),
    ("s_first_data_block", 0x14, "<I"),
    ("s_log_block_size", 0x18, "<I"),
    ("s_log_cluster_size", 0x1C, "<I"),
    ("s_blocks_per_group", 0x20, "<I"),
    ("s_clusters_per_group", 0x24, "<I"),
    ("s_inodes_per_group", 0x28, "<I"),
    ("s_wtime", 0x30, "<I"),
    ("s_max_mnt_count", 0x36, "<H"),
    ("s_magic", 0x38, "<H"),
    ("s_state", 0x3A, "<H"),
    ("s_errors", 0x3C, "<H"),
    ("s_lastcheck", 0x40, "<I"),
    ("s_rev_level", 0x4C, "<I"),
    ("s_first_ino", 0x54, "<I"),
    ("s_inode_size", 0x58, "<H"),
    ("s_block_group_nr", 0x5A, "<H"),
    ("s_feature_compat", 0x5C, "<I"),
    ("s_feature_incompat", 0x60, "<I"),
    ("s_feature_ro_compat", 0x64, "<I"),
    ("s_uuid", 0x68, "16s"),
    ("s_volume_name", 0x78, "16s"),
    ("s_journal_inum", 0xE0, "<I"),
    ("s_hash_seed", 0xEC, "16s"),
    ("s_def_hash_version", 0xFC, "B"),
    ("s_jnl_backup_type", 0xFD, "B"),
    ("s_default_mount_opts", 0x100, "<I"),
    ("s_mkfs_time", 0x108, "<I"),
    ("s_jnl_blocks", 0x10C, "68s"),
    ("s_min_extra_isize", 0x15C, "<H"),
    ("s_want_extra_isize", 0x15E, "<H"),
]

DESCRIPTOR_LAYOUT = [
    ("bg_block_bitmap_lo", 0x0, "<I"),
    ("bg_inode_bitmap_lo", 0x4, "<I"),
    ("bg_inode_table_lo", 0x8, "<I"),
    ("bg_free_blocks_count_lo", 0xC, "<H"),
    ("bg_free_inodes_count_lo", 0xE, "<H"),
    ("bg_used_dirs_count_lo", 0x10, "<H"),
    ("bg_flags", 0x12, "<H"),
    ("bg_free_blocks_count_hi", 0x2C, "<H"),
    ("bg_free_inodes_count_hi", 0x2E, "<H"),
]

INODE_LAYOUT = [
    ("i_mode", 0x0, "<H"),
    ("i_size_lo", 0x4, "<I"),
    ("i_atime", 0x8, "<I"),
    ("i_ctime", 0xC, "<I"),
    ("i_mtime", 0x10, "<I"),
    ("i_dtime", 0x14, "<I"),
    ("i_links_count", 0x1A, "<H"),
    ("i_blocks_lo", 0x1C, "<I"),
    ("i_flags", 0x20, "<I"),
    ("i_block", 0x28, "60s"),
    ("i_generation", 0x64, "<I"),
    ("i_size_high", 0x6C, "<I"),
    ("i_extra_isize", 0x80, "<H"),
]

JOURNAL_SB_LAYOUT = [
    ("h_magic", 0x0, ">I"),
    ("h_blocktype", 0x4, ">I"),
    ("h_sequence", 0x8, ">I"),
    ("s_blocksize", 0xC, ">I"),
    ("s_maxlen", 0x10, ">I"),
    ("s_first", 0x14, ">I"),
    ("s_sequence", 0x18, ">I"),
    ("s_start", 0x1C, ">I"),
    ("s_feature_incompat", 0x28, ">I"),
    ("s_uuid", 0x30, "16s"),
    ("s_nr_users", 0x40, ">I"),
    ("s_checksum_type", 0x50, "B"),
    ("s_checksum", 0xFC, ">I"),
    ("s_users", 0x100, "16s"),
]

EXFAT_BOOT_LAYOUT = [
    ("jump_boot", 0, "3s"),
    ("fs_name", 3, "8s"),
    ("volume_length", 72, "<Q"),
    ("fat_offset", 80, "<I"),
    ("fat_length", 84, "<I"),
    ("cluster_heap_offset", 88, "<I"),
    ("cluster_count", 92, "<I"),
    ("root_directory_cluster", 96, "<I"),
    ("volume_serial_number", 100, "<I"),
    ("file_system_revision", 104, "<H"),
    ("bytes_per_sector_shift", 108, "B"),
    ("sectors_per_cluster_shift", 109, "B"),
    ("number_of_fats", 110, "B"),
    ("drive_select", 111, "B"),
    ("percent_in_use", 112, "B"),
    ("boot_signature", 510, "<H"),
]


# --- ext4 encoders ---

def encode_extent_node(entries: Sequence, depth: int, max_entries: int, length: int) -> bytes:
    """Extent header plus leaf or index entries, zero padded to length"""
    if len(entries) > max_entries:
        raise FormatError(f"{len(entries)} extents exceed node capacity {max_entries}")
    buf = bytearray(length)
    EXTENT_HEADER.pack_into(buf, 0, EXTENT_MAGIC, len(entries), max_entries, depth, 0)
    pos = EXTENT_HEADER.size
    for entry in entries:
        if depth == 0:
            if entry.length > EXT_INIT_MAX_LEN:
                raise FormatError(f"extent of {entry.length} blocks exceeds {EXT_INIT_MAX_LEN}")
            EXTENT_LEAF.pack_into(buf, pos, entry.logical, entry.length, entry.physical >> 32, entry.physical & MASK32)
        else:
            EXTENT_INDEX.pack_into(buf, pos, entry.logical, entry.child & MASK32, entry.child >> 32, 0)
        pos += 12
    return bytes(buf)


def extent_capacity(length: int) -> int:
    return (length - EXTENT_HEADER.size) // 12


def split_extents(first_logical: int, physical: int, count: int) -> List[LeafExtent]:
    extents = []
    while count:
        run = min(count, EXT_INIT_MAX_LEN)
        extents.append(LeafExtent(first_logical, run, physical))
        first_logical += run
        physical += run
        count -= run
    return extents


def encode_inode(mode: int, size: int, links: int, flags: int, i_block: bytes, blocks_512: int,
                 now: int, inode_size: int = INODE_SIZE, generation: int = 0) -> bytes:
    buf = bytearray(inode_size)
    values = dict(
        i_mode=mode, i_size_lo=size & MASK32, i_atime=now, i_ctime=now, i_mtime=now, i_dtime=0,
        i_links_count=links, i_blocks_lo=blocks_512, i_flags=flags, i_block=i_block,
        i_generation=generation, i_size_high=size >> 32,
    )
    if inode_size > 0x80:
        values["i_extra_isize"] = EXTRA_ISIZE
    pack_fields(buf, INODE_LAYOUT, values)
    return bytes(buf)


def dirent_length(name_len: int) -> int:
    return (DIRENT.size + name_len + 3) & ~3


def encode_dirent(inode: int, name: bytes, file_type: int, rec_len: int) -> bytes:
    buf = bytearray(rec_len)
    DIRENT.pack_into(buf, 0, inode, rec_len, len(name), file_type)
    buf[DIRENT.size:DIRENT.size + len(name)] = name
    return bytes(buf)


def set_bit(bitmap: bytearray, index: int):
    bitmap[index >> 3] |= 1 << (index & 7)


def clear_bit(bitmap: bytearray, index: int):
    bitmap[index >> 3] &= ~(1 << (index & 7)) & 0xFF


def bit_is_set(bitmap: bytes, index: int) -> bool:
    return bool(bitmap[index >> 3] & (1 << (index & 7)))


def encode_journal_superblock(block_size: int, maxlen: int, first: int, sequence: int, start: int,
                              fs_uuid: bytes, csum_v3: bool) -> bytes:
    """jbd2 v2 superblock block (revoke always on, crc32c v3 optional)"""
    buf = bytearray(block_size)
    incompat = FEATURE_INCOMPAT_REVOKE | (FEATURE_INCOMPAT_CSUM_V3 if csum_v3 else 0)
    pack_fields(buf, JOURNAL_SB_LAYOUT, dict(
        h_magic=JBD2_MAGIC, h_blocktype=SUPERBLOCK_V2, h_sequence=0,
        s_blocksize=block_size, s_maxlen=maxlen, s_first=first, s_sequence=sequence, s_start=start,
        s_feature_incompat=incompat, s_uuid=fs_uuid, s_nr_users=1, s_users=fs_uuid,
        s_checksum_type=JBD2_CRC32C_CHKSUM if csum_v3 else 0,
    ))
    if csum_v3:
        struct.pack_into(">I", buf, JOURNAL_SB_CHECKSUM, kernel_crc32c(MASK32, bytes(buf[:JOURNAL_SB_SIZE])))
    return bytes(buf)


# --- built-in ext4 ---

@dataclasses.dataclass
class Ext4Geometry:
    block_size: int
    total_blocks: int
    first_data_block: int
    blocks_per_group: int
    inodes_per_group: int
    group_count: int
    gdt_blocks: int

    @property
    def inode_table_blocks(self) -> int:
        return self.inodes_per_group * INODE_SIZE // self.block_size

    def group_start(self, group: int) -> int:
        return self.first_data_block + group * self.blocks_per_group

    def group_blocks(self, group: int) -> int:
        return min(self.blocks_per_group, self.total_blocks - self.group_start(group))

    def overhead(self, group: int) -> int:
        backup = 1 + self.gdt_blocks if has_super(group) else 0
        return backup + 2 + self.inode_table_blocks

    def metadata(self, group: int) -> Tuple[int, int, int]:
        """(block bitmap, inode bitmap, inode table) block numbers"""
        base = self.group_start(group) + (1 + self.gdt_blocks if has_super(group) else 0)
        return base, base + 1, base + 2


def ext4_geometry(capacity: int, block_size: int) -> Ext4Geometry:
    if block_size not in (1024, 2048, 4096):
        raise FormatError(f"built-in ext4 supports block sizes 1024, 2048 and 4096, not {block_size}")
    total = capacity // block_size
    first_data_block = 1 if block_size == 1024 else 0
    bpg = 8 * block_size
    per_block = block_size // INODE_SIZE
    while True:
        groups = max(1, math.ceil((total - first_data_block) / bpg))
        per_group = min(bpg, max(64, (total // groups) // 32))
        ipg = max(per_block, (per_group + per_block - 1) // per_block * per_block)
        gdt_blocks = math.ceil(groups * 32 / block_size)
        geometry = Ext4Geometry(block_size, total, first_data_block, bpg, ipg, groups, gdt_blocks)
        last = groups - 1
        if groups > 1 and geometry.group_blocks(last) < geometry.overhead(last) + 16:
            total = geometry.group_start(last)
            continue
        if geometry.group_blocks(0) < geometry.overhead(0) + 8:
            raise FormatError(f"image of {capacity} bytes is too small for ext4")
        return geometry


def format_ext4(write: WriteFn, capacity: int, block_size: int = 4096, journal_mode: JournalMode = JournalMode.NONE,
                journal_blocks: int = 1024, journal_csum: bool = False, fs_uuid: Optional[bytes] = None,
                now: Optional[int] = None) -> Ext4Geometry:
    """Write a minimal ext4: extents, filetype, sparse_super, large_file, optional jbd2 journal"""
    geo = ext4_geometry(capacity, block_size)
    bs = block_size
    fs_uuid = fs_uuid or uuid.uuid4().bytes
    now = int(time.time()) if now is None else now
    journaled = journal_mode != JournalMode.NONE

    used: List[set] = [set() for _ in range(geo.group_count)]
    for group in range(geo.group_count):
        start = geo.group_start(group)
        used[group].update(range(start, start + geo.overhead(group)))

    cursor = geo.group_start(0) + geo.overhead(0)
    root_block, lost_block = cursor, cursor + 1
    cursor += 2
    journal_start = cursor
    if journaled:
        if journal_blocks < 32:
            raise FormatError(f"journal of {journal_blocks} blocks is too small")
        if journal_blocks < MIN_KERNEL_JOURNAL:
            logger.warning(f"⚠️ Journal of {journal_blocks} blocks is below the kernel minimum of {MIN_KERNEL_JOURNAL}")
        if journal_start + journal_blocks > geo.group_start(0) + geo.group_blocks(0):
            raise FormatError(f"journal of {journal_blocks} blocks does not fit in group 0")
        cursor += journal_blocks
    used[0].update(range(root_block, cursor))

    # inode table and directories
    inodes: Dict[int, bytes] = {}
    root_extent = encode_extent_node([LeafExtent(0, 1, root_block)], 0, INODE_ROOT_EXTENTS, 60)
    lost_extent = encode_extent_node([LeafExtent(0, 1, lost_block)], 0, INODE_ROOT_EXTENTS, 60)
    sectors = bs // 512
    inodes[ROOT_INODE] = encode_inode(S_IFDIR | 0o755, bs, 3, INODE_EXTENTS_FL, root_extent, sectors, now)
    inodes[LOST_FOUND_INODE] = encode_inode(S_IFDIR | 0o700, bs, 2, INODE_EXTENTS_FL, lost_extent, sectors, now)
    write(root_block * bs, b"".join([
        encode_dirent(ROOT_INODE, b".", DIR_FILE_TYPE, 12),
        encode_dirent(ROOT_INODE, b"..", DIR_FILE_TYPE, 12),
        encode_dirent(LOST_FOUND_INODE, b"lost+found", DIR_FILE_TYPE, bs - 24),
    ]))
    write(lost_block * bs, encode_dirent(LOST_FOUND_INODE, b".", DIR_FILE_TYPE, 12) +
          encode_dirent(ROOT_INODE, b"..", DIR_FILE_TYPE, bs - 12))

    jnl_blocks = bytes(68)
    if journaled:
        extents = split_extents(0, journal_start, journal_blocks)
        if len(extents) > INODE_ROOT_EXTENTS:
            raise FormatError(f"journal of {journal_blocks} blocks needs more than {INODE_ROOT_EXTENTS} extents")
        i_block = encode_extent_node(extents, 0, INODE_ROOT_EXTENTS, 60)
        size = journal_blocks * bs
        inodes[JOURNAL_INODE] = encode_inode(S_IFREG | 0o600, size, 1, INODE_EXTENTS_FL, i_block,
                                             journal_blocks * sectors, now)
        jnl_blocks = i_block + struct.pack("<II", size >> 32, size & MASK32)
        write(journal_start * bs, encode_journal_superblock(bs, journal_blocks, 1, 1, 0, fs_uuid, journal_csum))

    table = geo.metadata(0)[2]
    for number, raw in inodes.items():
        write(table * bs + (number - 1) * INODE_SIZE, raw)

    # bitmaps and descriptors
    descriptors = bytearray(geo.gdt_blocks * bs)
    free_total = 0
    for group in range(geo.group_count):
        start, count = geo.group_start(group), geo.group_blocks(group)
        block_bitmap = bytearray(bs)
        for block in used[group]:
            set_bit(block_bitmap, block - start)
        for index in range(count, 8 * bs):
            set_bit(block_bitmap, index)
        inode_bitmap = bytearray(bs)
        used_inodes = FIRST_INO if group == 0 else 0
        for index in list(range(used_inodes)) + list(range(geo.inodes_per_group, 8 * bs)):
            set_bit(inode_bitmap, index)

        bb, ib, it = geo.metadata(group)
        write(bb * bs, bytes(block_bitmap))
        write(ib * bs, bytes(inode_bitmap))
        free_blocks = count - len(used[group])
        free_total += free_blocks
        pack_fields(descriptors, DESCRIPTOR_LAYOUT, dict(
            bg_block_bitmap_lo=bb, bg_inode_bitmap_lo=ib, bg_inode_table_lo=it,
            bg_free_blocks_count_lo=free_blocks, bg_free_inodes_count_lo=geo.inodes_per_group - used_inodes,
            bg_used_dirs_count_lo=2 if group == 0 else 0, bg_flags=BG_INODE_ZEROED,
        ), base=group * 32)

    mount_opts = 0
    if journal_mode == JournalMode.DATA:
        mount_opts = DEFM_JMODE_DATA
    elif journal_mode == JournalMode.ORDERED:
        mount_opts = DEFM_JMODE_ORDERED
    superblock = bytearray(SUPERBLOCK_SIZE)
    values = dict(
        s_inodes_count=geo.inodes_per_group * geo.group_count, s_blocks_count_lo=geo.total_blocks,
        s_r_blocks_count_lo=0, s_free_blocks_count_lo=free_total,
        s_free_inodes_count=geo.inodes_per_group * geo.group_count - FIRST_INO,
        s_first_data_block=geo.first_data_block, s_log_block_size=bs.bit_length() - 11,
        s_log_cluster_size=bs.bit_length() - 11, s_blocks_per_group=geo.blocks_per_group,
        s_clusters_per_group=geo.blocks_per_group, s_inodes_per_group=geo.inodes_per_group,
        s_wtime=now, s_max_mnt_count=0xFFFF, s_magic=EXT4_MAGIC, s_state=1, s_errors=1, s_lastcheck=now,
        s_rev_level=1, s_first_ino=FIRST_INO, s_inode_size=INODE_SIZE,
        s_feature_compat=COMPAT_HAS_JOURNAL if journaled else 0,
        s_feature_incompat=INCOMPAT_FILETYPE | INCOMPAT_EXTENTS,
        s_feature_ro_compat=RO_COMPAT_SPARSE_SUPER | RO_COMPAT_LARGE_FILE | RO_COMPAT_EXTRA_ISIZE,
        s_uuid=fs_uuid, s_volume_name=b"worm", s_journal_inum=JOURNAL_INODE if journaled else 0,
        s_hash_seed=uuid.uuid5(uuid.UUID(bytes=fs_uuid), "hash").bytes, s_def_hash_version=1,
        s_jnl_backup_type=JNL_BACKUP_BLOCKS if journaled else 0, s_default_mount_opts=mount_opts,
        s_mkfs_time=now, s_jnl_blocks=jnl_blocks, s_min_extra_isize=EXTRA_ISIZE, s_want_extra_isize=EXTRA_ISIZE,
    )
    pack_fields(superblock, SUPERBLOCK_LAYOUT, values)
    for group in range(geo.group_count):
        if not has_super(group):
            continue
        struct.pack_into("<H", superblock, 0x5A, group)
        if group == 0:
            write(SUPERBLOCK_OFFSET, bytes(superblock))
        else:
            write(geo.group_start(group) * bs, bytes(superblock))
        write((geo.group_start(group) + 1) * bs, bytes(descriptors))

    logger.info(f"🧱 Built ext4: {geo.total_blocks} blocks of {bs}, {geo.group_count} group(s), "
                f"journal={journal_mode.value}{' csum v3' if journaled and journal_csum else ''}")
    return geo


# --- built-in exFAT ---

def rotate_checksum32(data: bytes, checksum: int = 0) -> int:
    for byte in data:
        checksum = (((checksum << 31) | (checksum >> 1)) + byte) & MASK32
    return checksum


def upcase_table() -> bytes:
    return struct.pack(f"<{UPCASE_ENTRIES}H", *(ord(chr(c).upper()) if chr(c).islower() else c
                                                 for c in range(UPCASE_ENTRIES)))


@dataclasses.dataclass
class ExfatGeometry:
    volume_length: int
    fat_offset: int
    fat_length: int
    cluster_heap_offset: int
    cluster_count: int
    sectors_per_cluster_shift: int

    @property
    def cluster_size(self) -> int:
        return EXFAT_SECTOR << self.sectors_per_cluster_shift

    def cluster_offset(self, cluster: int) -> int:
        return self.cluster_heap_offset * EXFAT_SECTOR + (cluster - FIRST_CLUSTER) * self.cluster_size


def exfat_geometry(capacity: int, cluster_size: int) -> ExfatGeometry:
    if cluster_size < EXFAT_SECTOR or cluster_size & (cluster_size - 1) or cluster_size > 32 * 1024 * 1024:
        raise FormatError(f"invalid exFAT cluster size {cluster_size}")
    spc = cluster_size // EXFAT_SECTOR
    volume_length = capacity // EXFAT_SECTOR
    count = (volume_length - EXFAT_FAT_OFFSET) // spc
    while True:
        fat_length = math.ceil((count + 2) * 4 / EXFAT_SECTOR)
        heap = math.ceil((EXFAT_FAT_OFFSET + fat_length) / spc) * spc
        fitted = (volume_length - heap) // spc
        if fitted >= count:
            break
        count = fitted
    if count < 16:
        raise FormatError(f"image of {capacity} bytes is too small for exFAT")
    return ExfatGeometry(volume_length, EXFAT_FAT_OFFSET, fat_length, heap, count, spc.bit_length() - 1)


def exfat_boot_region(geo: ExfatGeometry, root_cluster: int, serial: int, percent_in_use: int) -> bytes:
    """Main boot region (12 sectors) with its checksum sector"""
    sectors = bytearray(12 * EXFAT_SECTOR)
    pack_fields(sectors, EXFAT_BOOT_LAYOUT, dict(
        jump_boot=b"\xEB\x76\x90", fs_name=FS_NAME, volume_length=geo.volume_length,
        fat_offset=geo.fat_offset, fat_length=geo.fat_length, cluster_heap_offset=geo.cluster_heap_offset,
        cluster_count=geo.cluster_count, root_directory_cluster=root_cluster, volume_serial_number=serial,
        file_system_revision=EXFAT_REVISION, bytes_per_sector_shift=9,
        sectors_per_cluster_shift=geo.sectors_per_cluster_shift, number_of_fats=1, drive_select=0x80,
        percent_in_use=percent_in_use, boot_signature=0xAA55,
    ))
    for sector in range(1, 9):
        struct.pack_into("<I", sectors, (sector + 1) * EXFAT_SECTOR - 4, 0xAA550000)
    checksum = boot_checksum(bytes(sectors), EXFAT_SECTOR)
    sectors[11 * EXFAT_SECTOR:] = struct.pack("<I", checksum) * (EXFAT_SECTOR // 4)
    return bytes(sectors)


def format_exfat(write: WriteFn, capacity: int, cluster_size: int = 4096, serial: Optional[int] = None) -> ExfatGeometry:
    """Write a minimal exFAT: boot regions, FAT, allocation bitmap, up-case table, root directory"""
    geo = exfat_geometry(capacity, cluster_size)
    cs = geo.cluster_size
    serial = uuid.uuid4().int & MASK32 if serial is None else serial

    bitmap_bytes = math.ceil(geo.cluster_count / 8)
    bitmap_clusters = math.ceil(bitmap_bytes / cs)
    bitmap_first = FIRST_CLUSTER
    upcase_cluster = bitmap_first + bitmap_clusters
    root_cluster = upcase_cluster + 1
    used = root_cluster - FIRST_CLUSTER + 1

    fat = bytearray(geo.fat_length * EXFAT_SECTOR)
    struct.pack_into("<II", fat, 0, EXFAT_MEDIA, FAT_EOC)
    for cluster in range(bitmap_first, upcase_cluster):
        struct.pack_into("<I", fat, 4 * cluster, cluster + 1 if cluster + 1 < upcase_cluster else FAT_EOC)
    struct.pack_into("<I", fat, 4 * upcase_cluster, FAT_EOC)
    struct.pack_into("<I", fat, 4 * root_cluster, FAT_EOC)
    write(geo.fat_offset * EXFAT_SECTOR, bytes(fat))

    bitmap = bytearray(bitmap_clusters * cs)
    for index in range(used):
        set_bit(bitmap, index)
    write(geo.cluster_offset(bitmap_first), bytes(bitmap))

    table = upcase_table()
    write(geo.cluster_offset(upcase_cluster), table)

    root = bytearray(cs)
    root[0] = ENTRY_VOLUME_LABEL
    root[ENTRY_SIZE] = ENTRY_BITMAP
    struct.pack_into("<IQ", root, ENTRY_SIZE + 20, bitmap_first, bitmap_bytes)
    root[2 * ENTRY_SIZE] = ENTRY_UPCASE
    struct.pack_into("<I", root, 2 * ENTRY_SIZE + 4, rotate_checksum32(table))
    struct.pack_into("<IQ", root, 2 * ENTRY_SIZE + 20, upcase_cluster, len(table))
    write(geo.cluster_offset(root_cluster), bytes(root))

    region = exfat_boot_region(geo, root_cluster, serial, used * 100 // geo.cluster_count)
    write(0, region)
    write(len(region), region)

    logger.info(f"🧱 Built exFAT: {geo.cluster_count} clusters of {cs}")
    return geo


# --- system tools ---

def system_format_command(path: str, fs_kind: FsKind, block_size: int, journal_mode: JournalMode,
                          journal_blocks: int) -> List[List[str]]:
    if fs_kind == FsKind.EXFAT:
        return [["mkfs.exfat", "-c", str(block_size), path]]
    features = "^metadata_csum,^uninit_bg,^fast_commit"
    if journal_mode == JournalMode.NONE:
        features += ",^has_journal"
    command = ["mkfs.ext4", "-F", "-q", "-b", str(block_size), "-O", features,
               "-E", "lazy_itable_init=0,lazy_journal_init=0"]
    if journal_mode != JournalMode.NONE:
        megabytes = max(1, journal_blocks * block_size // (1024 * 1024))
        command += ["-J", f"size={megabytes}"]
    commands = [command + [path]]
    if journal_mode == JournalMode.DATA:
        commands.append(["tune2fs", "-o", "journal_data", path])
    return commands


def system_format(path: str, fs_kind: FsKind, block_size: int = 4096, journal_mode: JournalMode = JournalMode.NONE,
                  journal_blocks: int = 1024):
    """Format the image file with the platform tools (mkfs.ext4 / mkfs.exfat)"""
    commands = system_format_command(path, fs_kind, block_size, journal_mode, journal_blocks)
    for command in commands:
        if shutil.which(command[0]) is None:
            raise FormatterUnavailable(f"{command[0]} not found")
    for command in commands:
        logger.info(f"🛠️ Running {' '.join(command)}")
        result = subprocess.run(command, capture_output=True, text=True)
        if result.returncode != 0:
            raise FormatError(f"{command[0]} failed ({result.returncode}): {result.stderr.strip()}")
