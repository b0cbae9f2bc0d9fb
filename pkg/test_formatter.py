import pytest

from app.models.schemas import FsKind, JournalMode
from app.services import formatter
from app.services.blockstore import create_image, open_image
from app.services.exfat_reader import ExfatVolume
from app.services.ext4_reader import Ext4Volume
from app.services.formatter import (
    FormatError,
    FormatterUnavailable,
    ext4_geometry,
    exfat_geometry,
    format_exfat,
    format_ext4,
    system_format,
    system_format_command,
)


def formatted(tmp_path, capacity, fmt):
    path = str(tmp_path / "fmt.img")
    create_image(path, capacity)
    image = open_image(path)
    fmt(image)
    return image


@pytest.mark.parametrize("journal_mode,expected", [
    (JournalMode.NONE, "none"),
    (JournalMode.ORDERED, "ordered"),
    (JournalMode.DATA, "data"),
])
def test_ext4_journal_modes(tmp_path, journal_mode, expected):
    image = formatted(tmp_path, 16 * 1024 * 1024,
                      lambda img: format_ext4(img.write, img.capacity_bytes, 4096, journal_mode, journal_blocks=1024))
    with image:
        volume = Ext4Volume(image.read_raw)
        assert volume.sb.has_journal == (journal_mode != JournalMode.NONE)
        if volume.sb.has_journal:
            assert volume.sb.default_journal_mode == expected
            assert len(volume.journal_blocks) == 1024


def test_ext4_multiple_groups_with_small_blocks(tmp_path):
    image = formatted(tmp_path, 32 * 1024 * 1024,
                      lambda img: format_ext4(img.write, img.capacity_bytes, 1024))
    with image:
        volume = Ext4Volume(image.read_raw)
        assert volume.block_size == 1024
        assert volume.sb.group_count == 4
        assert volume.sb.s_first_data_block == 1
        assert {"lost+found"} <= {name for name, _, _ in volume.iter_dir(volume.read_inode(2))}


def test_ext4_geometry_limits():
    with pytest.raises(FormatError):
        ext4_geometry(16 * 1024 * 1024, 8192)
    with pytest.raises(FormatError):
        ext4_geometry(32 * 1024, 4096)
    geo = ext4_geometry(16 * 1024 * 1024, 4096)
    assert geo.group_count == 1 and geo.total_blocks == 4096


def test_journal_must_fit(tmp_path):
    path = str(tmp_path / "small.img")
    create_image(path, 2 * 1024 * 1024)
    with open_image(path) as image:
        with pytest.raises(FormatError):
            format_ext4(image.write, image.capacity_bytes, 4096, JournalMode.ORDERED, journal_blocks=16)
        with pytest.raises(FormatError):
            format_ext4(image.write, image.capacity_bytes, 4096, JournalMode.ORDERED, journal_blocks=4096)


def test_exfat_layout(tmp_path):
    image = formatted(tmp_path, 16 * 1024 * 1024, lambda img: format_exfat(img.write, img.capacity_bytes, 4096))
    with image:
        volume = ExfatVolume(image.read_raw)
        geo = exfat_geometry(16 * 1024 * 1024, 4096)
        assert volume.cluster_size == 4096
        assert volume.boot.cluster_count == geo.cluster_count
        assert volume.boot_region()[:12 * 512] == image.read_raw(12 * 512, 12 * 512)
        assert list(volume.iter_root_entry_sets()) == []
        assert volume.percent_in_use() is not None and volume.percent_in_use() < 5


def test_exfat_geometry_limits():
    with pytest.raises(FormatError):
        exfat_geometry(16 * 1024 * 1024, 3000)
    with pytest.raises(FormatError):
        exfat_geometry(80 * 1024, 4096)


def test_system_format_commands():
    (command,) = system_format_command("/tmp/x.img", FsKind.EXFAT, 4096, JournalMode.NONE, 1024)
    assert command[0] == "mkfs.exfat" and command[-1] == "/tmp/x.img"

    (command,) = system_format_command("/tmp/x.img", FsKind.EXT4, 4096, JournalMode.NONE, 1024)
    assert "^has_journal" in " ".join(command)

    commands = system_format_command("/tmp/x.img", FsKind.EXT4, 4096, JournalMode.DATA, 1024)
    assert commands[0][0] == "mkfs.ext4" and "-J" in commands[0]
    assert commands[1] == ["tune2fs", "-o", "journal_data", "/tmp/x.img"]


def test_system_format_requires_the_tools(tmp_path, monkeypatch):
    monkeypatch.setattr(formatter.shutil, "which", lambda name: None)
    with pytest.raises(FormatterUnavailable):
        system_format(str(tmp_path / "x.img"), FsKind.EXT4)
