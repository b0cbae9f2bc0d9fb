"""File-system adapters used by the engine: record decoding, unit mapping, extraction."""
import dataclasses
import logging
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from app.models.schemas import FsKind
from app.services.exfat_reader import DirEntrySet, ExfatVolume
from app.services.ext4_reader import Ext4Volume, InodeLocator, InodeRecord
from app.services.fs_common import Classification, MappingGap, ReadFn, ZeroData
from app.utils.helpers import is_all_zero

logger = logging.getLogger(__name__)

# (image_start, image_end, file_offset)
DataRange = Tuple[int, int, int]
Span = Tuple[int, int]


@dataclasses.dataclass
class LogSpec:
    log_id: int
    path: str
    fs_kind: FsKind
    locator: Any
    initial_size: int = 0

    @property
    def name(self) -> str:
        return self.path.lstrip("/")

    def to_dict(self) -> Dict:
        if isinstance(self.locator, InodeLocator):
            locator = dataclasses.asdict(self.locator)
        else:
            locator = {"offsets": list(self.locator)}
        return {"log_id": self.log_id, "path": self.path, "fs_kind": self.fs_kind.value,
                "locator": locator, "initial_size": self.initial_size}

    @classmethod
    def from_dict(cls, data: Mapping) -> "LogSpec":
        kind = FsKind(data["fs_kind"])
        if kind == FsKind.EXT4:
            locator = InodeLocator(**data["locator"])
        else:
            locator = tuple(data["locator"]["offsets"])
        return cls(data["log_id"], data["path"], kind, locator, data.get("initial_size", 0))


def merge_ranges(ranges: Sequence[DataRange], more: Sequence[DataRange] = ()) -> List[DataRange]:
    merged: List[DataRange] = []
    for start, end, file_offset in list(ranges) + list(more):
        if merged:
            last_start, last_end, last_offset = merged[-1]
            if last_end == start and last_offset + (last_end - last_start) == file_offset:
                merged[-1] = (last_start, end, last_offset)
                continue
        merged.append((start, end, file_offset))
    return merged


def merge_spans(spans: Sequence[Span]) -> List[Span]:
    merged: List[Span] = []
    for start, end in sorted(spans):
        if merged and start <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(end, merged[-1][1]))
        else:
            merged.append((start, end))
    return merged


class FsInference:
    """Common extraction over fixed-size allocation units (ext4 blocks, exFAT clusters)"""

    kind: FsKind
    unit_size: int

    def __init__(self, volume):
        self.volume = volume
        self.read: ReadFn = volume.read

    def classify(self, op, watched: Mapping[int, Any]) -> List[Classification]:
        return self.volume.classify_write(op, watched)

    def read_record(self, locator):
        raise NotImplementedError

    def unit_offsets(self, record, first: int, count: int) -> List[int]:
        """Image offset of each unit in [first, first+count); MappingGap on a hole"""
        raise NotImplementedError

    def violation(self, old, new) -> Optional[str]:
        raise NotImplementedError

    def mapping_ranges(self, record, size: int) -> List[Span]:
        """Image ranges outside the record that decide where file bytes [0, size) live"""
        return []

    def size_of(self, record) -> int:
        return record.size_bytes

    def data_ranges(self, record, start: int, end: int) -> List[DataRange]:
        if start >= end:
            return []
        size = self.unit_size
        first = start // size
        offsets = self.unit_offsets(record, first, (end - 1) // size - first + 1)
        pieces = []
        for i, base in enumerate(offsets):
            unit_start = (first + i) * size
            lo, hi = max(start, unit_start), min(end, unit_start + size)
            pieces.append((base + lo - unit_start, base + hi - unit_start, lo))
        return merge_ranges(pieces)

    def extract(self, record, start: int, end: int, allow_zero: bool = False) -> bytes:
        """File bytes [start, end); ZeroData when a unit's new bytes are still zero"""
        # every range is read before any is judged, so one attempt sees all of them
        chunks = [(file_offset, self.read(image_start, image_end - image_start))
                  for image_start, image_end, file_offset in self.data_ranges(record, start, end)]
        if not allow_zero:
            size = self.unit_size
            for file_offset, data in chunks:
                pos = 0
                while pos < len(data):
                    unit = (file_offset + pos) // size
                    step = min(len(data) - pos, (unit + 1) * size - (file_offset + pos))
                    if is_all_zero(data[pos:pos + step]):
                        raise ZeroData(unit)
                    pos += step
        return b"".join(data for _, data in chunks)


class Ext4Inference(FsInference):
    kind = FsKind.EXT4

    def __init__(self, volume: Ext4Volume):
        super().__init__(volume)
        self.unit_size = volume.block_size

    def read_record(self, locator: InodeLocator) -> InodeRecord:
        return self.volume.read_inode(locator.inode_number, locator)

    def unit_offsets(self, record: InodeRecord, first: int, count: int) -> List[int]:
        offsets = []
        for i, block in enumerate(self.volume.physical_blocks(record, first, count)):
            if block is None:
                raise MappingGap(first + i)
            offsets.append(block * self.unit_size)
        return offsets

    def violation(self, old: Optional[InodeRecord], new: InodeRecord) -> Optional[str]:
        if new.i_links_count == 0 or new.i_dtime:
            return f"inode {new.inode_number} unlinked"
        if old is None:
            return None
        if new.file_type != old.file_type:
            return f"inode {new.inode_number} file type changed 0x{old.file_type:04X} -> 0x{new.file_type:04X}"
        if new.protection_bits != old.protection_bits:
            return f"inode {new.inode_number} append-only/immutable flags changed"
        if new.uses_extents != old.uses_extents:
            return f"inode {new.inode_number} extents flag changed"
        return None

    def mapping_ranges(self, record: InodeRecord, size: int) -> List[Span]:
        bs = self.unit_size
        blocks = self.volume.mapping_blocks(record, 0, -(-size // bs))
        return merge_spans([(block * bs, (block + 1) * bs) for block in blocks])

    def inode_block(self, locator: InodeLocator) -> int:
        return locator.block_start // self.unit_size


class ExfatInference(FsInference):
    kind = FsKind.EXFAT

    def __init__(self, volume: ExfatVolume):
        super().__init__(volume)
        self.unit_size = volume.cluster_size

    def read_record(self, locator: Sequence[int]) -> DirEntrySet:
        return self.volume.read_entry_set_at(locator)

    def unit_offsets(self, record: DirEntrySet, first: int, count: int) -> List[int]:
        clusters = self.volume.file_clusters(record, first + count)
        return [self.volume.cluster_offset(c) for c in clusters[first:]]

    def mapping_ranges(self, record: DirEntrySet, size: int) -> List[Span]:
        if record.no_fat_chain or size <= 0:
            return []
        fat = self.volume.fat_range[0]
        clusters = self.volume.file_clusters(record, -(-size // self.unit_size))
        return merge_spans([(fat + 4 * c, fat + 4 * c + 4) for c in clusters])

    def violation(self, old: Optional[DirEntrySet], new: DirEntrySet) -> Optional[str]:
        if old is None:
            return None
        if new.name != old.name:
            return f"entry set renamed {old.name!r} -> {new.name!r}"
        if new.is_dir != old.is_dir:
            return f"{new.name!r} directory attribute changed"
        if new.no_fat_chain and not old.no_fat_chain and old.first_cluster:
            return f"{new.name!r} NoFatChain set on a FAT-chained file"
        if old.first_cluster and new.first_cluster != old.first_cluster and old.valid_data_length:
            return f"{new.name!r} first cluster moved {old.first_cluster} -> {new.first_cluster}"
        return None


def open_inference(kind: FsKind, read: ReadFn, validate: bool = True) -> FsInference:
    if kind == FsKind.EXT4:
        return Ext4Inference(Ext4Volume(read, validate=validate))
    return ExfatInference(ExfatVolume(read))


def resolve_log_specs(read: ReadFn, kind: FsKind, paths: Sequence[str]) -> List[LogSpec]:
    """Locators of existing root-level logs; log ids follow the order of paths"""
    specs = []
    if kind == FsKind.EXT4:
        volume = Ext4Volume(read)
        for log_id, path in enumerate(paths, start=1):
            number = volume.resolve_path(path)
            record = volume.read_inode(number)
            specs.append(LogSpec(log_id, path, kind, volume.locate_inode(number), record.size_bytes))
    else:
        volume = ExfatVolume(read)
        for log_id, path in enumerate(paths, start=1):
            entry_set = volume.locate_direntry(path.lstrip("/"))
            specs.append(LogSpec(log_id, path, kind, entry_set.offsets, entry_set.valid_data_length))
    return specs
