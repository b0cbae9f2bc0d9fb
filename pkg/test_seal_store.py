import hashlib
import hmac
import json
import os
import stat

import pytest

from app.services.seal_store import (
    DIVERGENCE_FILE,
    FROZEN_LOG_ID,
    INCIDENT_LOG_ID,
    MANIFEST_FILE,
    RECORD,
    RECORD_HEADER,
    RECORD_SIZE,
    SEAL_LOG,
    EntropyError,
    OffsetMismatch,
    SealStore,
    SealStoreError,
    StoreCorrupt,
    StoreExists,
    StoreLocked,
    export_for_audit,
    iter_records,
    load_divergence,
    load_manifest,
    log_file,
    verify_store,
)
from conftest import SEED


def oracle_mac(key: bytes, header: bytes, data: bytes) -> bytes:
    return hmac.new(key, header + data, hashlib.sha256).digest()


def oracle_next(key: bytes) -> bytes:
    return hmac.new(key, b"ratchet", hashlib.sha256).digest()


@pytest.fixture
def store_path(tmp_path):
    return str(tmp_path / "store")


@pytest.fixture
def key_path(tmp_path):
    return str(tmp_path / "auditor.key")


@pytest.fixture
def store(store_path, key_path):
    s = SealStore.init(store_path, [1, 2], key_path, seed=SEED)
    yield s
    s.close()


def seal_bytes(path: str) -> bytes:
    with open(os.path.join(path, SEAL_LOG), "rb") as f:
        return f.read()


def test_init_writes_key_and_empty_logs(store, store_path, key_path):
    with open(key_path, "rb") as f:
        assert f.read() == SEED
    assert stat.S_IMODE(os.stat(key_path).st_mode) == 0o600
    for log_id in (1, 2, INCIDENT_LOG_ID):
        assert os.path.getsize(log_file(store_path, log_id)) == 0
    assert seal_bytes(store_path) == b""
    assert store.key_index == 0 and store.record_count == 0


def test_init_refuses_existing_store(store, store_path, key_path, tmp_path):
    with pytest.raises(StoreExists):
        SealStore.init(store_path, [1], str(tmp_path / "other.key"), seed=SEED)
    with pytest.raises(StoreExists):
        SealStore.init(str(tmp_path / "fresh"), [1], key_path, seed=SEED)


def test_init_rejects_reserved_ids_and_bad_entropy(tmp_path):
    with pytest.raises(SealStoreError):
        SealStore.init(str(tmp_path / "a"), [FROZEN_LOG_ID], str(tmp_path / "a.key"), seed=SEED)
    with pytest.raises(EntropyError):
        SealStore.init(str(tmp_path / "b"), [1], str(tmp_path / "b.key"), seed=b"short")

    def broken(n):
        raise OSError("no entropy")

    with pytest.raises(EntropyError):
        SealStore.init(str(tmp_path / "c"), [1], str(tmp_path / "c.key"), entropy=broken)


def test_append_records_match_hmac_ratchet(store, store_path):
    store.append(1, 0, b"hello ")
    store.append(2, 0, b"other")
    store.append(1, 6, b"world\n")

    key = SEED
    records = list(iter_records(seal_bytes(store_path)))
    assert [(r.record_index, r.log_id, r.offset, r.length) for r in records] == [
        (0, 1, 0, 6), (1, 2, 0, 5), (2, 1, 6, 6)]
    payloads = [b"hello ", b"other", b"world\n"]
    for index, (record, data) in enumerate(zip(records, payloads)):
        header = RECORD_HEADER.pack(index, record.log_id, index, record.offset, record.length)
        assert record.mac == oracle_mac(key, header, data)
        key = oracle_next(key)
    assert store.read_log(1, 0, 12) == b"hello world\n"
    assert len(seal_bytes(store_path)) == 3 * RECORD_SIZE == 3 * RECORD.size


def test_ratchet_state_holds_only_the_current_key(store):
    store.append(1, 0, b"a")
    store.append(1, 1, b"b")
    state = store.ratchet_state_bytes
    assert SEED not in state
    assert oracle_next(oracle_next(SEED)) in state


def test_append_errors(store):
    with pytest.raises(SealStoreError):
        store.append(9, 0, b"x")
    with pytest.raises(SealStoreError):
        store.append(1, 0, b"")
    store.append(1, 0, b"abc")
    with pytest.raises(OffsetMismatch):
        store.append(1, 1, b"d")


def test_lock_is_exclusive(store, store_path):
    store.lock()
    other = SealStore(store_path)
    try:
        with pytest.raises(StoreLocked):
            other.lock()
    finally:
        other.close()


def test_reopen_continues_the_chain(store, store_path):
    store.append(1, 0, b"first")
    store.close()
    reopened = SealStore(store_path)
    try:
        assert reopened.log_length(1) == 5
        reopened.append(1, 5, b"second")
        assert reopened.key_index == 2
    finally:
        reopened.close()
    assert verify_store(store_path, SEED).passed


def test_verify_passes_and_counts_bytes(store, store_path):
    store.append(1, 0, b"abc")
    store.append(2, 0, b"de")
    store.append_incident(b'{"kind":"X"}\n')
    store.close()
    report = verify_store(store_path, SEED)
    assert report.passed
    assert report.record_count == 3
    assert report.logs[1].verified_bytes == 3
    assert report.logs[2].verified_bytes == 2
    assert report.logs[INCIDENT_LOG_ID].record_count == 1


def test_verify_detects_modified_real_log(store, store_path):
    store.append(1, 0, b"original")
    store.close()
    with open(log_file(store_path, 1), "r+b") as f:
        f.write(b"O")
    report = verify_store(store_path, SEED)
    assert not report.passed
    assert report.first_failure.record_index == 0
    assert "MAC" in report.first_failure.reason
    assert not report.logs[1].passed


def test_verify_detects_appended_unsealed_bytes(store, store_path):
    store.append(1, 0, b"sealed")
    store.close()
    with open(log_file(store_path, 1), "ab") as f:
        f.write(b"forged")
    report = verify_store(store_path, SEED)
    assert not report.passed
    assert "authenticated" in report.first_failure.reason


def test_verify_detects_truncated_seal_log(store, store_path):
    store.append(1, 0, b"one")
    store.append(1, 3, b"two")
    store.close()
    raw = seal_bytes(store_path)
    with open(os.path.join(store_path, SEAL_LOG), "wb") as f:
        f.write(raw[:-10])
    report = verify_store(store_path, SEED)
    assert not report.passed
    assert report.first_failure.record_index == 1


def test_verify_detects_reordered_records(store, store_path):
    store.append(1, 0, b"aa")
    store.append(1, 2, b"bb")
    store.close()
    raw = seal_bytes(store_path)
    with open(os.path.join(store_path, SEAL_LOG), "wb") as f:
        f.write(raw[RECORD_SIZE:] + raw[:RECORD_SIZE])
    report = verify_store(store_path, SEED)
    assert not report.passed
    assert report.first_failure.record_index == 0


def test_verify_with_wrong_key_fails(store, store_path):
    store.append(1, 0, b"data")
    store.close()
    assert not verify_store(store_path, bytes(32)).passed


def test_freeze_suppresses_appends(store, store_path):
    store.append(1, 0, b"before")
    marker = store.freeze()
    assert marker.log_id == FROZEN_LOG_ID and (marker.offset, marker.length) == (0, 0)
    assert store.freeze() == marker
    assert store.append(1, 6, b"after") is None
    assert store.append_incident(b"late\n") is None
    assert store.divergence_count == 1
    assert store.suppressed_bytes == {"1": 5}
    store.close()

    report = verify_store(store_path, SEED)
    assert report.passed
    assert report.frozen
    assert report.logs[1].verified_bytes == 6


def test_divergence_state_survives_reopen(store, store_path):
    store.append(1, 0, b"before")
    marker = store.freeze()
    store.append(1, 6, b"after")
    store.close()

    assert not [name for name in os.listdir(store_path) if name.endswith(".tmp")]
    assert load_divergence(store_path) == {
        "frozen": True,
        "frozen_at": marker.record_index,
        "divergence_count": 1,
        "suppressed_bytes": {"1": 5},
    }
    reopened = SealStore(store_path)
    try:
        assert reopened.frozen
        assert reopened.frozen_at == marker.record_index
        assert reopened.suppressed_bytes == {"1": 5}
        assert reopened.append(1, 6, b"again") is None
    finally:
        reopened.close()


@pytest.mark.parametrize("content", [
    b'{"algorithm": "hmac-sha',
    b'["not", "an", "object"]',
    b'{"algorithm": "md5-chain", "log_ids": [1, 2]}',
    b'{"algorithm": null, "log_ids": 7}',
    b"\xff\xfe",
])
def test_unreadable_manifest_is_store_corrupt(store, store_path, content):
    assert load_manifest(store_path)["log_ids"] == [1, 2]
    store.close()
    with open(os.path.join(store_path, MANIFEST_FILE), "wb") as f:
        f.write(content)
    assert load_manifest(store_path) is None
    with pytest.raises(StoreCorrupt):
        SealStore(store_path)
    assert not verify_store(store_path, SEED).passed


def test_missing_divergence_file_means_not_frozen(store, store_path):
    store.append(1, 0, b"entry")
    store.close()
    os.remove(os.path.join(store_path, DIVERGENCE_FILE))
    assert load_divergence(store_path) == {}
    reopened = SealStore(store_path)
    try:
        assert not reopened.frozen
        assert reopened.divergence_count == 0
    finally:
        reopened.close()


def test_verify_rejects_records_after_freeze(store, store_path):
    store.freeze()
    store.close()
    raw = seal_bytes(store_path)
    with open(os.path.join(store_path, SEAL_LOG), "ab") as f:
        f.write(raw)
    report = verify_store(store_path, SEED)
    assert not report.passed
    assert "frozen marker" in report.first_failure.reason


def test_verify_rejects_missing_frozen_marker(store, store_path):
    store.append(1, 0, b"x")
    store.freeze()
    store.close()
    raw = seal_bytes(store_path)
    with open(os.path.join(store_path, SEAL_LOG), "wb") as f:
        f.write(raw[:RECORD_SIZE])
    report = verify_store(store_path, SEED)
    assert not report.passed
    assert not report.frozen


def test_export_bundle_is_read_only_and_verifiable(store, store_path, tmp_path):
    store.append(1, 0, b"exported")
    store.close()
    bundle = str(tmp_path / "bundle")
    export_for_audit(store_path, bundle, {"note.json": {"ok": True}})
    assert verify_store(bundle, SEED).passed
    assert not os.path.exists(os.path.join(bundle, "ratchet.state"))
    with open(os.path.join(bundle, "note.json")) as f:
        assert json.load(f) == {"ok": True}
    mode = stat.S_IMODE(os.stat(log_file(bundle, 1)).st_mode)
    assert not mode & (stat.S_IWUSR | stat.S_IWGRP | stat.S_IWOTH)
    with pytest.raises(StoreExists):
        export_for_audit(store_path, bundle)
