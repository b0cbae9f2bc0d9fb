import pytest

from app.models.schemas import FsKind
from app.services.blockstore import create_image, open_image
from app.services.exfat_reader import ExfatVolume
from app.services.ext4_reader import Ext4Volume, LeafExtent
from app.services.log_writer import (
    DirtyUnit,
    NameCollision,
    WriterError,
    coalesce,
    create_empty_logs,
    flush_units,
    merge_extents,
    open_writer,
    root_name,
)
from conftest import build_image


def test_log_ids_follow_path_order(tmp_path):
    specs = build_image(str(tmp_path / "a.img"), FsKind.EXT4, paths=("/syslog", "/auth", "/kern"))
    assert [(s.log_id, s.path) for s in specs] == [(1, "/syslog"), (2, "/auth"), (3, "/kern")]
    assert all(s.initial_size == 0 for s in specs)


def test_duplicate_paths_are_refused(tmp_path):
    path = str(tmp_path / "a.img")
    with pytest.raises(NameCollision):
        build_image(path, FsKind.EXT4, paths=("/log", "/log"))


@pytest.mark.parametrize("fs_kind", [FsKind.EXT4, FsKind.EXFAT])
def test_existing_name_collides(tmp_path, fs_kind):
    path = str(tmp_path / "a.img")
    build_image(path, fs_kind, paths=("/log",))
    with open_image(path) as image:
        with pytest.raises(NameCollision):
            create_empty_logs(image, fs_kind, ["/log"])


def test_root_name():
    assert root_name("/log") == "log"
    for bad in ("log", "/", "/var/log"):
        with pytest.raises(WriterError):
            root_name(bad)


def test_open_writer_on_blank_image(tmp_path):
    path = str(tmp_path / "blank.img")
    create_image(path, 1024 * 1024)
    with open_image(path) as image:
        with pytest.raises(WriterError):
            open_writer(FsKind.EXT4, image.read_raw)
        with pytest.raises(WriterError):
            open_writer(FsKind.EXFAT, image.read_raw)


def test_coalesce_merges_adjacent_units():
    units = [DirtyUnit(5, b"b", False), DirtyUnit(4, b"a", True), DirtyUnit(9, b"z", False)]
    assert coalesce(units) == [(4, b"ab"), (9, b"z")]
    assert coalesce([DirtyUnit(i, b"x", False) for i in range(5)], max_units=2) == [
        (0, b"xx"), (2, b"xx"), (4, b"x")]


def test_merge_extents():
    merged = merge_extents([LeafExtent(2, 2, 102), LeafExtent(0, 2, 100), LeafExtent(4, 1, 200)])
    assert merged == [LeafExtent(0, 4, 100), LeafExtent(4, 1, 200)]


def test_ext4_interleaved_appends_keep_both_files_intact(tmp_path):
    path = str(tmp_path / "a.img")
    build_image(path, FsKind.EXT4, paths=("/a", "/b"))
    with open_image(path) as image:
        writer = open_writer(FsKind.EXT4, image.read_raw)
        a, b = writer.lookup("a"), writer.lookup("b")
        expected = {a: b"", b: b""}
        for round_ in range(12):
            for number, fill in ((a, b"A"), (b, b"B")):
                chunk = fill * (3000 + round_)
                writer.append(number, chunk)
                expected[number] += chunk
        flush_units(image, writer.cache.take_dirty(), writer.cache.unit_size)

        volume = Ext4Volume(image.read_raw)
        for number, content in expected.items():
            inode = volume.read_inode(number)
            assert volume.read_file_range(inode, 0, inode.size_bytes) == content
        assert len(volume.map_blocks(volume.read_inode(a), 0, 3)) >= 1


def test_exfat_chain_leaves_no_fat_chain_when_fragmented(tmp_path):
    path = str(tmp_path / "a.img")
    build_image(path, FsKind.EXFAT, paths=("/a", "/b"))
    with open_image(path) as image:
        writer = open_writer(FsKind.EXFAT, image.read_raw)
        a, b = writer.lookup("a"), writer.lookup("b")
        writer.append(a, b"1" * 5000)
        flush_units(image, writer.cache.take_dirty(), writer.cache.unit_size)
        assert ExfatVolume(image.read_raw).read_entry_set_at(a).no_fat_chain

        writer.append(b, b"2" * 100)
        writer.append(a, b"3" * 8000)
        flush_units(image, writer.cache.take_dirty(), writer.cache.unit_size)
        volume = ExfatVolume(image.read_raw)
        entry_set = volume.read_entry_set_at(a)
        assert not entry_set.no_fat_chain
        assert volume.read_file_range(entry_set, 0, 13000) == b"1" * 5000 + b"3" * 8000
        assert writer.size(a) == 13000


def test_truncate_cannot_grow(tmp_path):
    path = str(tmp_path / "a.img")
    build_image(path, FsKind.EXT4)
    with open_image(path) as image:
        writer = open_writer(FsKind.EXT4, image.read_raw)
        number = writer.lookup("log")
        writer.append(number, b"abc")
        with pytest.raises(WriterError):
            writer.truncate(number, 10)
        with pytest.raises(WriterError):
            writer.overwrite(number, 2, b"xyz")
