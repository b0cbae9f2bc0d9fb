import threading

import pytest

from app.models.schemas import FsKind, JournalMode
from app.services.blockstore import open_image
from app.services.ext4_reader import Ext4Volume
from app.services.host_driver import GroupCommitter, HostDriver, HostError, ImageDevice
from conftest import build_image


@pytest.fixture
def ext4(tmp_path):
    def factory(journal_mode=JournalMode.NONE):
        path = str(tmp_path / f"{journal_mode.value}.img")
        specs = build_image(path, FsKind.EXT4, journal_mode)
        image = open_image(path)
        images.append(image)
        return image, specs

    images = []
    yield factory
    for image in images:
        image.close()


def test_unknown_ordering_is_refused(ext4):
    image, _ = ext4()
    with pytest.raises(HostError):
        HostDriver(ImageDevice(image), FsKind.EXT4, ordering="sideways")


@pytest.mark.parametrize("ordering", ["data-first", "metadata-first"])
def test_write_ordering_without_journal(ext4, ordering):
    image, specs = ext4()
    inode_block = specs[0].locator.block_start // 4096
    host = HostDriver(ImageDevice(image), FsKind.EXT4, ordering=ordering)
    subscription = image.subscribe()
    host.append("/log", b"x" * 100)
    ops = subscription.drain()

    inode_seq = next(op.seq for op in ops if op.offset // 4096 <= inode_block < (op.end + 4095) // 4096)
    data_seq = next(op.seq for op in ops if op.payload.startswith(b"x" * 100))
    assert (data_seq < inode_seq) == (ordering == "data-first")


def test_ordered_journal_defers_metadata_until_checkpoint(ext4):
    image, specs = ext4(JournalMode.ORDERED)
    host = HostDriver(ImageDevice(image), FsKind.EXT4, checkpoint_every=100)
    host.append("/log", b"journaled\n")
    assert host.journal.transactions == 1

    # the home inode still says empty until the journal is checkpointed
    assert Ext4Volume(image.read_raw).read_inode(specs[0].locator.inode_number).size_bytes == 0
    assert host.read_file("/log") == b"journaled\n"
    host.sync()
    volume = Ext4Volume(image.read_raw)
    inode = volume.read_inode(specs[0].locator.inode_number)
    assert volume.read_file_range(inode, 0, inode.size_bytes) == b"journaled\n"


def test_data_journal_splits_large_appends(ext4):
    image, _ = ext4(JournalMode.DATA)
    host = HostDriver(ImageDevice(image), FsKind.EXT4)
    limit = host._chunk_limit()
    assert limit is not None
    payload = bytes(range(256)) * (2 * limit // 256 + 1)
    host.append("/log", payload)
    assert host.journal.transactions >= 3
    host.sync()
    assert host.read_file("/log") == payload


def test_concurrent_appends_are_group_committed(ext4):
    image, _ = ext4()
    host = HostDriver(ImageDevice(image), FsKind.EXT4)
    lines = [f"writer {n} line {i}\n".encode() for n in range(4) for i in range(25)]

    def worker(n):
        for i in range(25):
            host.append("/log", f"writer {n} line {i}\n".encode())

    threads = [threading.Thread(target=worker, args=(n,)) for n in range(4)]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()

    content = host.read_file("/log")
    assert sorted(content.splitlines(keepends=True)) == sorted(lines)
    assert host.bytes_appended == len(content)
    assert host.committer.batches <= len(lines)


def test_group_committer_hands_errors_to_every_waiter():
    def commit(items):
        raise RuntimeError("disk gone")

    committer = GroupCommitter(commit)
    with pytest.raises(RuntimeError):
        committer.submit("a")


@pytest.mark.parametrize("fs_kind", [FsKind.EXT4, FsKind.EXFAT])
def test_unrelated_files_and_free_space(tmp_path, fs_kind):
    path = str(tmp_path / "x.img")
    build_image(path, fs_kind)
    with open_image(path) as image:
        host = HostDriver(ImageDevice(image), fs_kind)
        before = host.free_fraction()
        host.write_file("/cache.bin", b"c" * 50_000)
        assert host.size("/cache.bin") == 50_000
        assert host.free_fraction() < before
        host.remove("/cache.bin")
        assert host.free_fraction() == pytest.approx(before)
