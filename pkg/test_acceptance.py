"""End-to-end properties of the device, each checked against the bytes a host would read back."""
import os
import random
import shutil
import struct

import pytest

from app.models.schemas import CoherencyConfig, EngineMode, FsKind, JournalMode, PolicyMode
from app.services.blockstore import open_image
from app.services.device_service import cmd_diff, read_img_log
from app.services.exfat_reader import ExfatVolume
from app.services.ext4_reader import SUPERBLOCK_OFFSET
from app.services.host_driver import HostDriver, ImageDevice
from app.services.rfs_engine import AppendBasis, IndicatorKind
from app.services.seal_store import SEAL_LOG, SealStore, log_file, verify_store
from app.services.trace_service import TraceRecorder, replay
from conftest import COHERENCY, SEED, FakeClock, build_image, committed_events

SIZES = (1, 7, 100, 4095, 4096, 4097, 20_000, 65_536, 131_072)


def host_workload(rng: random.Random, host: HostDriver, clock: FakeClock, paths, big: bool = False):
    """Appends of mixed sizes with unrelated file activity and pauses"""
    scratch = 0
    for step in range(8):
        path = rng.choice(paths)
        size = 1024 * 1024 if big and step == 3 else rng.choice(SIZES)
        clock.advance(rng.choice((1_000_000, 2_000_000, 300_000_000)))
        host.append(path, rng.randbytes(size))
        if rng.random() < 0.4:
            clock.advance(1_000_000)
            host.write_file(f"/scratch{scratch}", rng.randbytes(rng.choice(SIZES)))
            scratch += 1
    host.sync()


@pytest.mark.parametrize("seed", range(20))
def test_ext4_replay_matches_the_final_image(tmp_path, seed):
    rng = random.Random(seed)
    live = str(tmp_path / "live.img")
    specs = build_image(live, FsKind.EXT4, paths=("/log", "/audit"))
    base = str(tmp_path / "base.img")
    shutil.copyfile(live, base)

    clock = FakeClock()
    trace_path = str(tmp_path / "t.trace")
    with open_image(live, clock=clock) as image:
        recorder = TraceRecorder(image, trace_path, FsKind.EXT4)
        host_workload(rng, HostDriver(ImageDevice(image), FsKind.EXT4), clock, ("/log", "/audit"), big=seed == 0)
        recorder.stop()
        oracle = {spec.log_id: read_img_log(image, spec) for spec in specs}

    store = SealStore.init(str(tmp_path / "store"), [spec.log_id for spec in specs], str(tmp_path / "key"), seed=SEED)
    try:
        with open_image(base) as image:
            result = replay(trace_path, image, specs, EngineMode.EXT4_NOJOURNAL, coherency=COHERENCY, store=store)
        assert result.indicators == []
        for event in result.events:
            assert event.data == oracle[event.log_id][event.old_size:event.new_size]
        for log_id, content in oracle.items():
            assert store.read_log(log_id, 0, store.log_length(log_id)) == content
    finally:
        store.close()


@pytest.mark.parametrize("seed", range(6))
def test_exfat_rig_matches_the_final_image(make_rig, seed):
    rng = random.Random(seed)
    rig = make_rig(fs_kind=FsKind.EXFAT, paths=("/log", "/audit"))
    for path in ("/log", "/audit", "/log"):
        rig.append(path, rng.randbytes(5000))
    for step in range(10):
        path = ("/log", "/audit")[step % 2]
        rig.append(path, rng.randbytes(rng.choice(SIZES)))
        if rng.random() < 0.3:
            rig.settle()
    rig.settle()

    assert rig.indicators == []
    for spec in rig.specs:
        assert rig.real_log(spec.log_id) == read_img_log(rig.image, spec)
    chained = [ExfatVolume(rig.image.read_raw).read_entry_set_at(spec.locator).no_fat_chain for spec in rig.specs]
    assert False in chained


def test_exfat_contiguous_file_keeps_no_fat_chain(make_rig):
    rig = make_rig(fs_kind=FsKind.EXFAT)
    data = bytes(range(256)) * 64
    rig.append("/log", data)
    rig.settle()
    spec = rig.specs[0]
    assert ExfatVolume(rig.image.read_raw).read_entry_set_at(spec.locator).no_fat_chain
    assert rig.real_log() == data


@pytest.mark.parametrize("seed", range(4))
def test_data_journal_commits_without_waiting(make_rig, seed):
    rng = random.Random(seed)
    rig = make_rig(journal_mode=JournalMode.DATA)
    expected = b""
    for _ in range(6):
        chunk = rng.randbytes(rng.choice(SIZES[:7]))
        events = committed_events(rig.append("/log", chunk))
        expected += chunk
        assert events and all(e.basis == AppendBasis.JOURNAL_COMMIT for e in events)
        assert events[-1].new_size == len(expected)
        assert not rig.engine.pending
    rig.host.sync()
    assert rig.real_log() == expected == read_img_log(rig.image, rig.specs[0])


def _overwrite(rig):
    rig.host.overwrite("/log", 2, b"forged")


def _truncate(rig):
    rig.host.truncate("/log", 3)


def _superblock(rig):
    raw = bytearray(rig.image.read_raw(SUPERBLOCK_OFFSET, 1024))
    (inodes,) = struct.unpack_from("<I", raw, 0)
    struct.pack_into("<I", raw, 0, inodes + 8)
    rig.image.write(SUPERBLOCK_OFFSET, bytes(raw))


def _boot(rig):
    rig.image.write(100, b"\xde\xad\xbe\xef")


CRAFTED = [
    (FsKind.EXT4, _overwrite, IndicatorKind.NON_APPEND_WRITE),
    (FsKind.EXT4, _truncate, IndicatorKind.SIZE_SHRINK),
    (FsKind.EXT4, _superblock, IndicatorKind.FS_STRUCTURE_TAMPER),
    (FsKind.EXFAT, _overwrite, IndicatorKind.NON_APPEND_WRITE),
    (FsKind.EXFAT, _truncate, IndicatorKind.SIZE_SHRINK),
    (FsKind.EXFAT, _boot, IndicatorKind.FS_STRUCTURE_TAMPER),
]


@pytest.mark.parametrize("policy", [PolicyMode.READ_ONLY, PolicyMode.HONEYPOT])
@pytest.mark.parametrize("fs_kind,tamper,kind", CRAFTED, ids=lambda v: getattr(v, "__name__", None))
def test_crafted_tamper_is_detected_once(make_rig, policy, fs_kind, tamper, kind):
    rig = make_rig(fs_kind=fs_kind, policy=policy)
    genuine = b"2026-10-19 sshd accepted publickey\n"
    rig.append("/log", genuine)
    rig.settle()

    tamper(rig)
    rig.pump()
    assert rig.kinds().count(kind.value) == 1
    assert rig.indicators[0].kind == kind
    assert rig.engine.policy.activated
    assert rig.real_log() == genuine

    rig.append("/log", b"written after the attack\n")
    rig.settle()
    assert rig.real_log().startswith(genuine)
    rig.store.close()
    assert verify_store(rig.store_path, SEED).passed


def test_honeypot_diff_reports_the_attack(make_rig):
    rig = make_rig(policy=PolicyMode.HONEYPOT)
    entries = b"entry one\nentry two\n"
    rig.append("/log", entries)
    rig.settle()

    rig.host.overwrite("/log", 6, b"ONE")
    rig.host.truncate("/log", 15)
    rig.pump()
    assert rig.store.frozen
    rig.image.flush()

    report = cmd_diff(rig.store_path, rig.image_path)
    (entry,) = report.logs
    assert entry.ranges == [(6, 9)]
    assert entry.length_delta == -5
    assert entry.real_length == len(entries)


@pytest.fixture
def sealed_store(tmp_path):
    rng = random.Random(7)
    path = str(tmp_path / "store")
    store = SealStore.init(path, [1, 2], str(tmp_path / "key"), seed=SEED)
    offsets = {1: 0, 2: 0}
    for _ in range(50):
        log_id = rng.choice((1, 2))
        data = rng.randbytes(rng.randint(1, 24))
        store.append(log_id, offsets[log_id], data)
        offsets[log_id] += len(data)
    store.close()
    return path


def _sweep(path: str):
    """Every single-byte flip and every proper prefix of the file"""
    with open(path, "rb") as f:
        original = f.read()
    try:
        for pos in range(len(original)):
            flipped = bytearray(original)
            flipped[pos] ^= 0x01
            with open(path, "wb") as f:
                f.write(flipped)
            yield f"flip at {pos}"
        for length in range(len(original)):
            with open(path, "wb") as f:
                f.write(original[:length])
            yield f"truncated to {length}"
    finally:
        with open(path, "wb") as f:
            f.write(original)


@pytest.mark.parametrize("target", ["log1", "log2", "seal"])
def test_forward_integrity_sweep(sealed_store, target):
    assert verify_store(sealed_store, SEED).passed
    path = {
        "log1": log_file(sealed_store, 1),
        "log2": log_file(sealed_store, 2),
        "seal": os.path.join(sealed_store, SEAL_LOG),
    }[target]
    for damage in _sweep(path):
        assert not verify_store(sealed_store, SEED).passed, damage
    assert verify_store(sealed_store, SEED).passed


@pytest.mark.parametrize("fs_kind", [FsKind.EXT4, FsKind.EXFAT])
def test_zero_injection_never_commits_corrupt_bytes(make_rig, fs_kind):
    rng = random.Random(11)
    rig = make_rig(fs_kind=fs_kind, zero_injection=True)
    for _ in range(8):
        rig.append("/log", rng.randbytes(rng.choice(SIZES[:7])))
        rig.settle()
    final = read_img_log(rig.image, rig.specs[0])
    events = committed_events(rig.effects)
    assert events
    for event in events:
        assert event.data == final[event.old_size:event.new_size]
    assert rig.real_log() == final
    assert rig.indicators == []


def test_quiescent_trace_commits_within_tau_plus_one_tick(make_rig):
    coherency = CoherencyConfig(lambda_ms=10, omega_ms=1000)
    rig = make_rig(coherency=coherency)
    rig.append("/log", b"first\n")
    first_write = rig.clock.now
    for _ in range(5):
        rig.append("/log", b"more\n")

    deadline = first_write + coherency.tau_ns + coherency.tick_ns
    events = []
    while not events:
        now = rig.clock.advance(coherency.tick_ns)
        assert now <= deadline, "pending append outlived tau plus one tick"
        events = rig.engine.tick(now)
    assert events[0].new_size == len(b"first\n") + 5 * len(b"more\n")
    assert coherency.tau_ns + coherency.tick_ns <= 1_015_000_000
