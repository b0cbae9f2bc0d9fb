import struct

import pytest

from app.models.schemas import FsKind
from app.services.blockstore import WriteOp, open_image
from app.services.exfat_reader import (
    BOOT_CHECKSUM_SECTORS,
    ENTRY_SIZE,
    PERCENT_IN_USE_OFFSET,
    ChecksumMismatch,
    ExfatVolume,
    boot_checksum,
    boot_signature,
    decode_entry_set,
    name_hash,
)
from app.services.fs_common import MagicError, NotFound, RangeError, RegionKind, UninitializedBlock
from app.services.host_driver import HostDriver, ImageDevice
from conftest import build_image


@pytest.fixture
def exfat_image(tmp_path):
    path = str(tmp_path / "exfat.img")
    specs = build_image(path, FsKind.EXFAT, paths=("/log", "/audit"))
    image = open_image(path)
    yield image, specs
    image.close()


def test_boot_region_checksum_sector(exfat_image):
    image, _ = exfat_image
    volume = ExfatVolume(image.read_raw)
    region = volume.boot_region()
    sector = volume.bytes_per_sector
    (stored,) = struct.unpack_from("<I", region, BOOT_CHECKSUM_SECTORS * sector)
    assert stored == boot_checksum(region, sector)

    # percent-in-use is excluded from both the checksum and the signature
    patched = bytearray(region)
    patched[PERCENT_IN_USE_OFFSET] ^= 0x7F
    assert boot_checksum(bytes(patched), sector) == stored
    assert boot_signature(bytes(patched)) == boot_signature(region)
    assert volume.percent_in_use() is not None


def test_locate_created_logs(exfat_image):
    image, specs = exfat_image
    volume = ExfatVolume(image.read_raw)
    for spec in specs:
        entry_set = volume.locate_direntry(spec.path.lstrip("/"))
        assert entry_set.offsets == tuple(spec.locator)
        assert entry_set.valid_data_length == 0
        assert entry_set.name_hash == name_hash(entry_set.name)
        assert volume.read_entry_set_at(spec.locator) == entry_set
    with pytest.raises(NotFound):
        volume.locate_direntry("missing")


def test_entry_set_checksum_and_zero_detection(exfat_image):
    image, specs = exfat_image
    volume = ExfatVolume(image.read_raw)
    entry_set = volume.read_entry_set_at(specs[0].locator)
    raw = bytearray(entry_set.raw)
    raw[ENTRY_SIZE + 8] ^= 0x01
    with pytest.raises(ChecksumMismatch):
        decode_entry_set(bytes(raw), entry_set.offsets)
    with pytest.raises(UninitializedBlock):
        decode_entry_set(bytes(len(raw)), entry_set.offsets)
    raw = bytearray(entry_set.raw)
    raw[0] &= 0x7F
    with pytest.raises(MagicError):
        decode_entry_set(bytes(raw), entry_set.offsets)


def test_file_ranges_follow_the_cluster_chain(exfat_image):
    image, specs = exfat_image
    host = HostDriver(ImageDevice(image), FsKind.EXFAT)
    payload = bytes(i % 251 for i in range(3 * 4096 + 100))
    host.append("/log", payload[:5000])
    host.append("/audit", b"interleaved")
    host.append("/log", payload[5000:])

    volume = ExfatVolume(image.read_raw)
    entry_set = volume.read_entry_set_at(specs[0].locator)
    assert entry_set.valid_data_length == len(payload)
    assert entry_set.data_length == 4 * volume.cluster_size
    assert volume.read_file_range(entry_set, 0, len(payload)) == payload
    assert volume.read_file_range(entry_set, 4000, 9000) == payload[4000:9000]
    ranges = volume.file_ranges(entry_set, 0, len(payload))
    assert sum(hi - lo for lo, hi in ranges) == len(payload)
    assert len(volume.file_clusters(entry_set, 4)) == 4
    with pytest.raises(RangeError):
        volume.read_file_range(entry_set, 0, len(payload) + 1)


def test_classify_write_regions(exfat_image):
    image, specs = exfat_image
    volume = ExfatVolume(image.read_raw)
    watched = {spec.log_id: spec.locator for spec in specs}

    regions = volume.classify_write(WriteOp(1, 0, bytes(512)), watched)
    assert [r.kind for r in regions] == [RegionKind.BOOT_REGION]

    fat_start = volume.fat_range[0]
    regions = volume.classify_write(WriteOp(2, fat_start, bytes(64)), watched)
    assert [r.kind for r in regions] == [RegionKind.FAT_REGION]

    locator = specs[0].locator
    start, end = locator[0], locator[-1] + ENTRY_SIZE
    op = WriteOp(3, start, image.read_raw(start, end - start))
    dirent = [r for r in volume.classify_write(op, watched) if r.kind == RegionKind.WATCHED_DIRENT]
    assert {r.log_id for r in dirent} == {1}
    assert dirent[0].record.name == "log"
    assert dirent[0].error is None

    # a partial write of the set is classified but not decoded
    partial = volume.classify_write(WriteOp(4, start, image.read_raw(start, ENTRY_SIZE)), watched)
    assert partial[0].kind == RegionKind.WATCHED_DIRENT and partial[0].record is None

    far = volume.heap_offset + 200 * volume.cluster_size
    assert [r.kind for r in volume.classify_write(WriteOp(5, far, b"x"), watched)] == [RegionKind.DATA_OR_OTHER]
