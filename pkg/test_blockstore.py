import os

import pytest

from app.services.blockstore import (
    BlockStoreError,
    CapacityError,
    ImageNotFound,
    OutOfRange,
    WriteOp,
    ZeroInjectingImage,
    create_image,
    file_digest,
    image_digest,
    open_image,
)
from conftest import FakeClock


@pytest.fixture
def image(tmp_path):
    path = str(tmp_path / "disk.img")
    create_image(path, 64 * 1024)
    img = open_image(path, clock=FakeClock())
    yield img
    img.close()


def test_create_image_is_zero_filled(tmp_path):
    path = str(tmp_path / "disk.img")
    create_image(path, 8192)
    assert os.path.getsize(path) == 8192
    with open(path, "rb") as f:
        assert f.read() == bytes(8192)


def test_create_image_rejects_bad_capacity(tmp_path):
    with pytest.raises(CapacityError):
        create_image(str(tmp_path / "a.img"), 1000)
    with pytest.raises(CapacityError):
        create_image(str(tmp_path / "b.img"), 0)


def test_create_image_refuses_existing_file(tmp_path):
    path = str(tmp_path / "disk.img")
    create_image(path, 512)
    with pytest.raises(BlockStoreError):
        create_image(path, 512)


def test_open_image_errors(tmp_path):
    with pytest.raises(ImageNotFound):
        open_image(str(tmp_path / "missing.img"))
    path = str(tmp_path / "disk.img")
    create_image(path, 4096)
    with pytest.raises(CapacityError):
        open_image(path, expected_capacity=8192)
    odd = tmp_path / "odd.img"
    odd.write_bytes(b"x" * 700)
    with pytest.raises(CapacityError):
        open_image(str(odd))


def test_write_assigns_increasing_sequence(image):
    first = image.write(0, b"abc")
    second = image.write(512, b"def")
    assert (first.seq, second.seq) == (1, 2)
    assert image.last_seq == 2
    assert first.arrival_time == image.clock.now
    assert image.read_raw(0, 3) == b"abc"
    assert image.read_range(512, 3) == b"def"


def test_explicit_arrival_time_is_kept(image):
    op = image.write(0, b"x", arrival_time=42)
    assert op.arrival_time == 42


def test_apply_write_rejects_sequence_regression(image):
    image.write(0, b"a")
    with pytest.raises(BlockStoreError):
        image.apply_write(WriteOp(seq=1, offset=0, payload=b"b"))
    assert image.apply_write(WriteOp(seq=5, offset=0, payload=b"c")) == 5
    assert image.last_seq == 5


def test_out_of_range_and_empty_writes(image):
    with pytest.raises(OutOfRange):
        image.write(image.capacity_bytes - 1, b"ab")
    with pytest.raises(OutOfRange):
        image.read_raw(image.capacity_bytes, 1)
    with pytest.raises(BlockStoreError):
        image.write(0, b"")
    assert image.last_seq == 0


def test_every_subscriber_sees_writes_in_order(image):
    engine = image.subscribe("engine")
    recorder = image.subscribe("recorder")
    image.write(0, b"1")
    image.write(10, b"22")
    assert [op.seq for op in engine.drain()] == [1, 2]
    assert [op.payload for op in recorder.drain()] == [b"1", b"22"]
    assert engine.depth() == 0


def test_unsubscribe_ends_iteration(image):
    subscription = image.subscribe()
    image.write(0, b"z")
    image.unsubscribe(subscription)
    image.write(1, b"y")
    assert [op.payload for op in subscription] == [b"z"]


def test_write_op_helpers():
    op = WriteOp(seq=1, offset=100, payload=b"0123456789")
    assert op.length == 10 and op.end == 110
    assert op.overlaps(105, 200)
    assert not op.overlaps(110, 120)
    assert op.slice(102, 105) == b"234"


def test_zero_injection_reads_even_writes_as_zeros_once(tmp_path):
    path = str(tmp_path / "disk.img")
    create_image(path, 8192)
    with open_image(path, zero_injection=True) as img:
        assert isinstance(img, ZeroInjectingImage)
        img.write(0, b"odd")
        img.write(512, b"even")
        assert img.poisoned_ranges == [(512, 516)]
        assert img.read_raw(512, 4) == b"even"
        assert img.read_range(0, 3) == b"odd"
        assert img.read_range(510, 8) == bytes(8)
        assert img.read_range(512, 4) == b"even"
        assert img.poisoned_ranges == []


def test_digests_agree(tmp_path, image):
    image.write(4096, b"payload")
    image.flush()
    assert image_digest(image) == file_digest(image.path)
