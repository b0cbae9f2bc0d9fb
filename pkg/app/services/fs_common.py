"""Shared decode errors and write-classification types for the fs readers."""
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Optional

ReadFn = Callable[[int, int], bytes]


class FsError(Exception):
    fmt = "{self.reason}"

    def __init__(self, reason: str = ""):
        self.reason = reason

    def __str__(self):
        return self.fmt.format(self=self)


class MagicError(FsError):
    """Non-zero structure with a wrong magic value."""


class CorruptStructure(FsError):
    """Non-zero but malformed on-disk structure."""


class UnsupportedFeature(FsError):
    fmt = "Unsupported file system feature: {self.reason}"


class UninitializedBlock(FsError):
    """A structure read back as all zeros: not written yet."""
    fmt = "Uninitialized structure at offset {self.offset}"

    def __init__(self, offset: int):
        self.offset = offset
        self.reason = f"offset {offset}"


class MappingGap(FsError):
    """A logical range of a file has no (written) physical mapping."""
    fmt = "No mapping for logical unit {self.logical}"

    def __init__(self, logical: int):
        self.logical = logical
        self.reason = f"logical {logical}"


class NotFound(FsError):
    fmt = "Not found: {self.reason}"


class NotADirectory(FsError):
    fmt = "Not a directory: {self.reason}"


class RangeError(FsError):
    fmt = "Range beyond file size: {self.reason}"


class RegionKind(str, Enum):
    WATCHED_INODE = "WATCHED_INODE"
    WATCHED_DIRENT = "WATCHED_DIRENT"
    SUPERBLOCK_REGION = "SUPERBLOCK_REGION"
    GROUP_DESCRIPTORS = "GROUP_DESCRIPTORS"
    JOURNAL_REGION = "JOURNAL_REGION"
    FAT_REGION = "FAT_REGION"
    BOOT_REGION = "BOOT_REGION"
    DATA_OR_OTHER = "DATA_OR_OTHER"


@dataclass
class Classification:
    kind: RegionKind
    start: int
    end: int
    log_id: Optional[int] = None
    record: Any = None
    error: Optional[FsError] = None


class ZeroData(FsError):
    """Appended bytes inside one block or cluster still read back as zeros"""
    fmt = "Appended bytes in unit {self.logical} read as zeros"

    def __init__(self, logical: int):
        self.logical = logical
        self.reason = f"unit {logical}"
