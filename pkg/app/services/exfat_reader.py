import dataclasses
import logging
import struct
from typing import Iterator, List, Mapping, Optional, Sequence, Tuple

from app.services.fs_common import (
    Classification,
    CorruptStructure,
    FsError,
    MagicError,
    MappingGap,
    NotFound,
    RangeError,
    ReadFn,
    RegionKind,
    UninitializedBlock,
    UnsupportedFeature,
)
from app.utils.helpers import is_all_zero

logger = logging.getLogger(__name__)

FS_NAME = b"EXFAT   "
BOOT_SIGNATURE = 0xAA55
BOOT_REGION_SECTORS = 24
BOOT_CHECKSUM_SECTORS = 11
# Bytes of the main boot sector the driver may rewrite while mounted
VOLUME_FLAGS_OFFSET = 106
PERCENT_IN_USE_OFFSET = 112
MUTABLE_BOOT_BYTES = (VOLUME_FLAGS_OFFSET, VOLUME_FLAGS_OFFSET + 1, PERCENT_IN_USE_OFFSET)
PERCENT_UNKNOWN = 0xFF

ENTRY_SIZE = 32
ENTRY_END = 0x00
ENTRY_BITMAP = 0x81
ENTRY_UPCASE = 0x82
ENTRY_FILE = 0x85
ENTRY_STREAM = 0xC0
ENTRY_NAME = 0xC1
IN_USE = 0x80
NAME_CHARS_PER_ENTRY = 15

STREAM_ALLOCATION_POSSIBLE = 0x1
STREAM_NO_FAT_CHAIN = 0x2

FAT_FREE = 0x00000000
FAT_BAD = 0xFFFFFFF7
FAT_EOC = 0xFFFFFFFF
FIRST_CLUSTER = 2
FAT_PAGE = 4096

ATTR_DIRECTORY = 0x10

FILE_ENTRY = struct.Struct("<BBHH")
STREAM_ENTRY = struct.Struct("<BBBBHHQIIQ")


class ExfatError(FsError):
    pass


class ChecksumMismatch(CorruptStructure):
    fmt = "Checksum mismatch: {self.reason}"


# --- checksums ---

def boot_checksum(raw: bytes, bytes_per_sector: int) -> int:
    """32-bit rotate checksum over sectors 0..10, skipping the mutable boot bytes"""
    checksum = 0
    for index, byte in enumerate(raw[:BOOT_CHECKSUM_SECTORS * bytes_per_sector]):
        if index in MUTABLE_BOOT_BYTES:
            continue
        checksum = (((checksum << 31) | (checksum >> 1)) + byte) & 0xFFFFFFFF
    return checksum


def set_checksum(raw: bytes) -> int:
    """16-bit entry set checksum; bytes 2..3 of the file entry hold it and are skipped"""
    checksum = 0
    for index, byte in enumerate(raw):
        if index in (2, 3):
            continue
        checksum = (((checksum << 15) | (checksum >> 1)) + byte) & 0xFFFF
    return checksum


def upcase(name: str) -> str:
    # one UTF-16 unit in, one out; multi-char expansions keep the original
    return "".join(u if len(u) == 1 else c for c, u in ((c, c.upper()) for c in name))


def name_hash(name: str) -> int:
    checksum = 0
    for byte in upcase(name).encode("utf-16-le"):
        checksum = (((checksum << 15) | (checksum >> 1)) + byte) & 0xFFFF
    return checksum


# --- boot sector ---

EXFATBOOT_FIELDS = [
    # attribute, offset, format
    ("fs_name", 3, "8s"),
    ("volume_length", 72, "<Q"),
    ("fat_offset", 80, "<I"),
    ("fat_length", 84, "<I"),
    ("cluster_heap_offset", 88, "<I"),
    ("cluster_count", 92, "<I"),
    ("root_directory_cluster", 96, "<I"),
    ("volume_flags", 106, "<H"),
    ("bytes_per_sector_shift", 108, "B"),
    ("sectors_per_cluster_shift", 109, "B"),
    ("number_of_fats", 110, "B"),
    ("percent_in_use", 112, "B"),
    ("boot_signature", 510, "<H"),
]


@dataclasses.dataclass
class ExfatBootSector:

    FIELDS = EXFATBOOT_FIELDS

    fs_name: bytes
    volume_length: int
    fat_offset: int
    fat_length: int
    cluster_heap_offset: int
    cluster_count: int
    root_directory_cluster: int
    volume_flags: int
    bytes_per_sector_shift: int
    sectors_per_cluster_shift: int
    number_of_fats: int
    percent_in_use: int
    boot_signature: int

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ExfatBootSector":
        if len(raw) < 512:
            raise CorruptStructure(f"boot sector too short ({len(raw)} bytes)")
        return cls(**{attr: struct.unpack_from(fmt, raw, offset)[0] for attr, offset, fmt in cls.FIELDS})

    def __post_init__(self):
        if self.fs_name != FS_NAME:
            raise MagicError(f"no exFAT boot sector: file system name {self.fs_name!r}")
        if self.boot_signature != BOOT_SIGNATURE:
            raise MagicError(f"bad boot signature 0x{self.boot_signature:04X}")
        if not 9 <= self.bytes_per_sector_shift <= 12:
            raise CorruptStructure(f"invalid bytes-per-sector shift {self.bytes_per_sector_shift}")
        if self.sectors_per_cluster_shift > 25 - self.bytes_per_sector_shift:
            raise CorruptStructure(f"invalid sectors-per-cluster shift {self.sectors_per_cluster_shift}")
        if self.number_of_fats not in (1, 2):
            raise CorruptStructure(f"{self.number_of_fats} FATs")
        if self.number_of_fats == 2:
            raise UnsupportedFeature("TexFAT (two FATs)")
        if self.fat_offset < BOOT_REGION_SECTORS or self.cluster_heap_offset < self.fat_offset + self.fat_length:
            raise CorruptStructure("FAT or cluster heap overlaps the preceding region")
        if not FIRST_CLUSTER <= self.root_directory_cluster < self.cluster_count + FIRST_CLUSTER:
            raise CorruptStructure(f"root directory cluster {self.root_directory_cluster} out of range")

    @property
    def bytes_per_sector(self) -> int:
        return 1 << self.bytes_per_sector_shift

    @property
    def sectors_per_cluster(self) -> int:
        return 1 << self.sectors_per_cluster_shift

    @property
    def cluster_size(self) -> int:
        return self.bytes_per_sector << self.sectors_per_cluster_shift


def parse_boot_sector(read: ReadFn) -> ExfatBootSector:
    raw = read(0, 512)
    if is_all_zero(raw):
        raise MagicError("no exFAT boot sector: sector 0 is zero")
    return ExfatBootSector.from_bytes(raw)


def boot_signature(region: bytes) -> bytes:
    """Boot region with the driver-mutable bytes masked out"""
    masked = bytearray(region)
    for offset in MUTABLE_BOOT_BYTES:
        if offset < len(masked):
            masked[offset] = 0
    return bytes(masked)


# --- directory entry sets ---

@dataclasses.dataclass
class DirEntrySet:
    name: str
    attributes: int
    secondary_count: int
    set_checksum: int
    stream_flags: int
    name_length: int
    name_hash: int
    valid_data_length: int
    first_cluster: int
    data_length: int
    offsets: Tuple[int, ...] = ()
    raw: bytes = dataclasses.field(default=b"", repr=False)

    @property
    def no_fat_chain(self) -> bool:
        return bool(self.stream_flags & STREAM_NO_FAT_CHAIN)

    @property
    def is_dir(self) -> bool:
        return bool(self.attributes & ATTR_DIRECTORY)

    @property
    def size_bytes(self) -> int:
        return self.valid_data_length


def decode_entry_set(raw: bytes, offsets: Sequence[int] = ()) -> DirEntrySet:
    origin = offsets[0] if offsets else 0
    if len(raw) < 3 * ENTRY_SIZE:
        raise CorruptStructure(f"entry set at {origin} shorter than three entries")
    if is_all_zero(raw[:ENTRY_SIZE]):
        raise UninitializedBlock(origin)
    entry_type, secondary_count, stored_checksum, attributes = FILE_ENTRY.unpack_from(raw, 0)
    if entry_type != ENTRY_FILE:
        raise MagicError(f"entry at {origin} has type 0x{entry_type:02X}, expected file entry")
    if secondary_count < 2 or len(raw) < (1 + secondary_count) * ENTRY_SIZE:
        raise CorruptStructure(f"entry set at {origin}: secondary count {secondary_count}")
    raw = raw[:(1 + secondary_count) * ENTRY_SIZE]
    computed = set_checksum(raw)
    if computed != stored_checksum:
        raise ChecksumMismatch(f"entry set at {origin}: stored 0x{stored_checksum:04X}, computed 0x{computed:04X}")

    (stream_type, flags, _, name_length, hash_value, _, valid_length, _,
     first_cluster, data_length) = STREAM_ENTRY.unpack_from(raw, ENTRY_SIZE)
    if stream_type != ENTRY_STREAM:
        raise CorruptStructure(f"entry set at {origin}: second entry type 0x{stream_type:02X}")
    if valid_length > data_length:
        raise CorruptStructure(f"entry set at {origin}: valid data length {valid_length} > data length {data_length}")

    pieces = []
    for index in range(2, 1 + secondary_count):
        pos = index * ENTRY_SIZE
        if raw[pos] == ENTRY_NAME:
            pieces.append(raw[pos + 2:pos + 2 + 2 * NAME_CHARS_PER_ENTRY])
    name = b"".join(pieces)[:2 * name_length].decode("utf-16-le", errors="surrogatepass")
    if len(name) != name_length:
        raise CorruptStructure(f"entry set at {origin}: name shorter than {name_length} characters")

    return DirEntrySet(
        name=name, attributes=attributes, secondary_count=secondary_count,
        set_checksum=stored_checksum, stream_flags=flags, name_length=name_length,
        name_hash=hash_value, valid_data_length=valid_length, first_cluster=first_cluster,
        data_length=data_length, offsets=tuple(offsets), raw=raw,
    )


class ExfatVolume:
    """Read-only view of an exFAT volume through a read(offset, length) callable"""

    def __init__(self, read: ReadFn):
        self.read = read
        self.boot = parse_boot_sector(read)
        self.bytes_per_sector = self.boot.bytes_per_sector
        self.cluster_size = self.boot.cluster_size
        self.boot_range = (0, BOOT_REGION_SECTORS * self.bytes_per_sector)
        fat_start = self.boot.fat_offset * self.bytes_per_sector
        self.fat_range = (fat_start, fat_start + self.boot.fat_length * self.bytes_per_sector)
        self.heap_offset = self.boot.cluster_heap_offset * self.bytes_per_sector
        logger.debug(f"📂 exFAT: {self.boot.cluster_count} clusters of {self.cluster_size} bytes")

    # --- clusters and the FAT ---

    def valid_cluster(self, cluster: int) -> bool:
        return FIRST_CLUSTER <= cluster < self.boot.cluster_count + FIRST_CLUSTER

    def cluster_offset(self, cluster: int) -> int:
        if not self.valid_cluster(cluster):
            raise CorruptStructure(f"cluster {cluster} outside the cluster heap")
        return self.heap_offset + (cluster - FIRST_CLUSTER) * self.cluster_size

    def fat_entry(self, cluster: int, pages: Optional[dict] = None) -> int:
        if pages is None:
            return struct.unpack("<I", self.read(self.fat_range[0] + 4 * cluster, 4))[0]
        page, index = divmod(4 * cluster, FAT_PAGE)
        if page not in pages:
            start = self.fat_range[0] + page * FAT_PAGE
            pages[page] = self.read(start, min(FAT_PAGE, self.fat_range[1] - start))
        return struct.unpack_from("<I", pages[page], index)[0]

    def chain(self, first: int, needed: Optional[int] = None) -> List[int]:
        """FAT chain from first; stops after needed clusters (the prefix) or at end of chain"""
        clusters: List[int] = []
        seen = set()
        pages: dict = {}
        cluster = first
        while needed is None or len(clusters) < needed:
            if cluster in seen:
                raise CorruptStructure(f"FAT chain from cluster {first} loops at cluster {cluster}")
            if not self.valid_cluster(cluster):
                raise CorruptStructure(f"FAT chain from cluster {first} reaches invalid cluster {cluster}")
            seen.add(cluster)
            clusters.append(cluster)
            if needed is not None and len(clusters) == needed:
                break
            following = self.fat_entry(cluster, pages)
            if following == FAT_EOC:
                if needed is not None:
                    raise MappingGap(len(clusters))
                break
            if following == FAT_FREE:
                raise MappingGap(len(clusters))
            if following == FAT_BAD:
                raise CorruptStructure(f"FAT chain from cluster {first} reaches a bad cluster")
            cluster = following
        return clusters

    def file_clusters(self, entry_set: DirEntrySet, needed: int) -> List[int]:
        if needed <= 0:
            return []
        if entry_set.first_cluster == 0:
            raise MappingGap(0)
        if entry_set.no_fat_chain:
            last = entry_set.first_cluster + needed - 1
            if not (self.valid_cluster(entry_set.first_cluster) and self.valid_cluster(last)):
                raise CorruptStructure(f"contiguous run {entry_set.first_cluster}..{last} outside the cluster heap")
            return list(range(entry_set.first_cluster, last + 1))
        return self.chain(entry_set.first_cluster, needed)

    def file_ranges(self, entry_set: DirEntrySet, start: int, end: int) -> List[Tuple[int, int]]:
        """Image byte ranges holding file bytes [start, end)"""
        if start >= end:
            return []
        cs = self.cluster_size
        first_index = start // cs
        clusters = self.file_clusters(entry_set, (end - 1) // cs + 1)
        ranges: List[Tuple[int, int]] = []
        for index in range(first_index, len(clusters)):
            base = self.cluster_offset(clusters[index])
            lo = max(start, index * cs) - index * cs
            hi = min(end, (index + 1) * cs) - index * cs
            if ranges and ranges[-1][1] == base + lo:
                ranges[-1] = (ranges[-1][0], base + hi)
            else:
                ranges.append((base + lo, base + hi))
        return ranges

    def read_file_range(self, entry_set: DirEntrySet, start: int, end: int) -> bytes:
        if start < 0 or start > end or end > entry_set.valid_data_length:
            raise RangeError(f"[{start}, {end}) of {entry_set.name!r} (valid length {entry_set.valid_data_length})")
        return b"".join(self.read(offset, hi - offset) for offset, hi in self.file_ranges(entry_set, start, end))

    # --- root directory ---

    def iter_root_entries(self) -> Iterator[Tuple[int, bytes]]:
        for cluster in self.chain(self.boot.root_directory_cluster):
            base = self.cluster_offset(cluster)
            data = self.read(base, self.cluster_size)
            for pos in range(0, self.cluster_size, ENTRY_SIZE):
                if data[pos] == ENTRY_END:
                    return
                yield base + pos, data[pos:pos + ENTRY_SIZE]

    def iter_root_entry_sets(self) -> Iterator[DirEntrySet]:
        entries = self.iter_root_entries()
        for offset, raw in entries:
            if raw[0] != ENTRY_FILE:
                continue
            offsets, pieces = [offset], [raw]
            for _ in range(raw[1]):
                following = next(entries, None)
                if following is None:
                    raise CorruptStructure(f"entry set at {offset} runs past the end of the directory")
                offsets.append(following[0])
                pieces.append(following[1])
            yield decode_entry_set(b"".join(pieces), offsets)

    def locate_direntry(self, name: str) -> DirEntrySet:
        for entry_set in self.iter_root_entry_sets():
            if entry_set.name == name:
                return entry_set
        raise NotFound(name)

    def read_entry_set_at(self, offsets: Sequence[int]) -> DirEntrySet:
        return decode_entry_set(b"".join(self.read(offset, ENTRY_SIZE) for offset in offsets), offsets)

    def free_root_slots(self, count: int) -> List[int]:
        """Offsets of count consecutive unused root entries (end marker included)"""
        run: List[int] = []
        for cluster in self.chain(self.boot.root_directory_cluster):
            base = self.cluster_offset(cluster)
            data = self.read(base, self.cluster_size)
            for pos in range(0, self.cluster_size, ENTRY_SIZE):
                if data[pos] & IN_USE:
                    run = []
                    continue
                run.append(base + pos)
                if len(run) == count:
                    return run
        raise ExfatError(f"root directory has no room for {count} entries")

    # --- boot region ---

    def boot_region(self) -> bytes:
        return self.read(*self.boot_range)

    def percent_in_use(self, boot_sector: Optional[bytes] = None) -> Optional[int]:
        raw = boot_sector if boot_sector is not None else self.read(0, 512)
        value = raw[PERCENT_IN_USE_OFFSET]
        return None if value == PERCENT_UNKNOWN else value

    # --- write classification ---

    def classify_write(self, op, watched: Mapping[int, Sequence[int]]) -> List[Classification]:
        """One entry per touched region in offset order; never empty"""
        result: List[Classification] = []
        covered = 0

        def region(kind: RegionKind, start: int, end: int, **extra):
            nonlocal covered
            lo, hi = max(start, op.offset), min(end, op.end)
            if lo < hi:
                result.append(Classification(kind, lo, hi, **extra))
                covered += hi - lo

        region(RegionKind.BOOT_REGION, *self.boot_range)
        region(RegionKind.FAT_REGION, *self.fat_range)

        for log_id, offsets in watched.items():
            touched = [o for o in offsets if op.overlaps(o, o + ENTRY_SIZE)]
            if not touched:
                continue
            record, error = None, None
            if all(op.offset <= o and o + ENTRY_SIZE <= op.end for o in offsets):
                try:
                    record = decode_entry_set(b"".join(op.slice(o, o + ENTRY_SIZE) for o in offsets), offsets)
                except FsError as e:
                    error = e
            for start, end in _merge(touched):
                region(RegionKind.WATCHED_DIRENT, start, end, log_id=log_id, record=record, error=error)

        if covered < op.length:
            result.append(Classification(RegionKind.DATA_OR_OTHER, op.offset, op.end))
        result.sort(key=lambda c: (c.start, c.kind.value))
        return result


def _merge(offsets: Sequence[int]) -> List[Tuple[int, int]]:
    ranges: List[Tuple[int, int]] = []
    for offset in sorted(offsets):
        if ranges and ranges[-1][1] == offset:
            ranges[-1] = (ranges[-1][0], offset + ENTRY_SIZE)
        else:
            ranges.append((offset, offset + ENTRY_SIZE))
    return ranges
