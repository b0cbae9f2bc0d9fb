import dataclasses
import fcntl
import hmac as stdlib_hmac
import json
import logging
import os
import shutil
import stat
import struct
from datetime import datetime, timezone
from typing import Callable, Dict, Iterator, List, Optional, TypedDict

from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives import hmac as crypto_hmac

from app.models.schemas import LogStatus, VerifyReport
from app.utils.helpers import read_json_object, write_json_object

logger = logging.getLogger(__name__)

ALGORITHM_ID = "HMAC-SHA256/ratchet-HMAC(K,'ratchet')/v1"
RATCHET_LABEL = b"ratchet"
KEY_SIZE = 32

RECORD = struct.Struct("<QIQQQ32s")
RECORD_HEADER = struct.Struct("<QIQQQ")
RECORD_SIZE = RECORD.size  # 68

INCIDENT_LOG_ID = 0xFFFFFFFE
FROZEN_LOG_ID = 0xFFFFFFFF

SEAL_LOG = "SEAL_log"
LOGS_DIR = "logs"
STATE_FILE = "ratchet.state"
DIVERGENCE_FILE = "divergence.json"
MANIFEST_FILE = "store.json"
LOCK_FILE = "store.lock"

STATE = struct.Struct("<4sQ32sQ")
STATE_MAGIC = b"WRS1"


class SealStoreError(Exception):
    fmt = "seal store error: {reason}"

    def __init__(self, reason: str = ""):
        self.reason = reason
        super().__init__(self.fmt.format(reason=reason))


class StoreExists(SealStoreError):
    fmt = "refusing to initialize over existing data: {reason}"


class StoreLocked(SealStoreError):
    fmt = "store is in use by another session: {reason}"


class OffsetMismatch(SealStoreError):
    fmt = "append offset mismatch: {reason}"


class EntropyError(SealStoreError):
    fmt = "entropy source failure: {reason}"


class StoreCorrupt(SealStoreError):
    fmt = "store corrupt: {reason}"


def mac(key: bytes, header: bytes, data: bytes) -> bytes:
    h = crypto_hmac.HMAC(key, hashes.SHA256())
    h.update(header)
    h.update(data)
    return h.finalize()


def next_key(key: bytes) -> bytes:
    """K_{i+1} = HMAC(K_i, "ratchet")"""
    h = crypto_hmac.HMAC(key, hashes.SHA256())
    h.update(RATCHET_LABEL)
    return h.finalize()


def wipe(buffer: bytearray):
    for i in range(len(buffer)):
        buffer[i] = 0


@dataclasses.dataclass(frozen=True)
class SealRecord:
    record_index: int
    log_id: int
    key_index: int
    offset: int
    length: int
    mac: bytes = dataclasses.field(repr=False)

    @property
    def header(self) -> bytes:
        return RECORD_HEADER.pack(self.record_index, self.log_id, self.key_index, self.offset, self.length)

    def pack(self) -> bytes:
        return RECORD.pack(self.record_index, self.log_id, self.key_index, self.offset, self.length, self.mac)

    @classmethod
    def unpack(cls, raw: bytes) -> "SealRecord":
        return cls(*RECORD.unpack(raw))

    @property
    def is_frozen_marker(self) -> bool:
        return self.log_id == FROZEN_LOG_ID


class StoreManifest(TypedDict):
    algorithm: str
    log_ids: List[int]
    record_size: int
    created_at: str


class DivergenceState(TypedDict, total=False):
    frozen: bool
    frozen_at: Optional[int]
    divergence_count: int
    suppressed_bytes: Dict[str, int]


def load_manifest(store_path: str) -> Optional[StoreManifest]:
    """The store manifest, or None when it is absent, unreadable or for another algorithm"""
    manifest = read_json_object(os.path.join(store_path, MANIFEST_FILE))
    if manifest is None or manifest.get("algorithm") != ALGORITHM_ID:
        return None
    if not isinstance(manifest.get("log_ids"), list):
        return None
    return manifest  # type: ignore[return-value]


def load_divergence(store_path: str) -> DivergenceState:
    return read_json_object(os.path.join(store_path, DIVERGENCE_FILE)) or {}  # type: ignore[return-value]


def log_file(store_path: str, log_id: int) -> str:
    return os.path.join(store_path, LOGS_DIR, str(log_id))


def iter_records(raw: bytes) -> Iterator[SealRecord]:
    for pos in range(0, len(raw) - len(raw) % RECORD_SIZE, RECORD_SIZE):
        yield SealRecord.unpack(raw[pos:pos + RECORD_SIZE])


class SealStore:
    """Real logs plus the SEAL_log of one device; appends are serialized store-wide"""

    def __init__(self, path: str, fsync_each: bool = False):
        self.path = path
        self.fsync_each = fsync_each
        manifest = load_manifest(path)
        if manifest is None:
            raise StoreCorrupt(f"{path} has no valid {MANIFEST_FILE}")
        self.log_ids: List[int] = manifest["log_ids"]
        self._state_fd = os.open(os.path.join(path, STATE_FILE), os.O_RDWR)
        raw = os.pread(self._state_fd, STATE.size, 0)
        if len(raw) != STATE.size:
            raise StoreCorrupt("ratchet state truncated")
        magic, self.key_index, key, self.record_count = STATE.unpack(raw)
        if magic != STATE_MAGIC:
            raise StoreCorrupt("ratchet state magic")
        self._key = bytearray(key)
        self._seal_fd = os.open(os.path.join(path, SEAL_LOG), os.O_RDWR | os.O_APPEND)
        seal_size = os.fstat(self._seal_fd).st_size
        if seal_size != self.record_count * RECORD_SIZE:
            raise StoreCorrupt(f"SEAL_log holds {seal_size} bytes, state expects {self.record_count} records")
        self._log_fds: Dict[int, int] = {}
        self.lengths: Dict[int, int] = {}
        for log_id in self.log_ids + [INCIDENT_LOG_ID]:
            fd = os.open(log_file(path, log_id), os.O_RDWR | os.O_APPEND)
            self._log_fds[log_id] = fd
            self.lengths[log_id] = os.fstat(fd).st_size
        divergence = load_divergence(path)
        self.frozen: bool = divergence.get("frozen", False)
        self.divergence_count: int = divergence.get("divergence_count", 0)
        self.suppressed_bytes: Dict[str, int] = divergence.get("suppressed_bytes", {})
        self.frozen_at: Optional[int] = divergence.get("frozen_at")
        self._lock_fd: Optional[int] = None

    # --- lifecycle ---

    @classmethod
    def init(cls, path: str, log_ids: List[int], auditor_key_path: str, seed: Optional[bytes] = None,
             entropy: Callable[[int], bytes] = os.urandom) -> "SealStore":
        """Create an empty store; K_0 goes to the auditor key file"""
        if os.path.isdir(path) and any(name != "catalog.db" for name in os.listdir(path)):
            raise StoreExists(path)
        if os.path.exists(auditor_key_path):
            raise StoreExists(auditor_key_path)
        if any(log_id >= INCIDENT_LOG_ID for log_id in log_ids):
            raise SealStoreError("log ids 0xFFFFFFFE and 0xFFFFFFFF are reserved")
        try:
            k0 = seed if seed is not None else entropy(KEY_SIZE)
        except Exception as e:
            raise EntropyError(str(e)) from e
        if not isinstance(k0, (bytes, bytearray)) or len(k0) != KEY_SIZE:
            raise EntropyError(f"expected {KEY_SIZE} key bytes")

        os.makedirs(os.path.join(path, LOGS_DIR), exist_ok=True)
        for log_id in list(log_ids) + [INCIDENT_LOG_ID]:
            open(log_file(path, log_id), "wb").close()
        open(os.path.join(path, SEAL_LOG), "wb").close()
        with open(os.path.join(path, STATE_FILE), "wb") as f:
            f.write(STATE.pack(STATE_MAGIC, 0, bytes(k0), 0))
            f.flush()
            os.fsync(f.fileno())
        manifest: StoreManifest = {
            "algorithm": ALGORITHM_ID,
            "log_ids": sorted(log_ids),
            "record_size": RECORD_SIZE,
            "created_at": datetime.now(timezone.utc).isoformat(),
        }
        write_json_object(os.path.join(path, MANIFEST_FILE), manifest)
        write_json_object(os.path.join(path, DIVERGENCE_FILE), DivergenceState(frozen=False, divergence_count=0))

        key_parent = os.path.dirname(auditor_key_path)
        if key_parent:
            os.makedirs(key_parent, exist_ok=True)
        fd = os.open(auditor_key_path, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o600)
        try:
            os.write(fd, bytes(k0))
            os.fsync(fd)
        finally:
            os.close(fd)
        logger.info(f"🔐 Seal store initialized at {path} for {len(log_ids)} log(s); auditor key written")
        return cls(path)

    def lock(self):
        """Exclusive session lock (one serve per store)"""
        fd = os.open(os.path.join(self.path, LOCK_FILE), os.O_RDWR | os.O_CREAT, 0o600)
        try:
            fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError as e:
            os.close(fd)
            raise StoreLocked(self.path) from e
        self._lock_fd = fd

    def sync(self):
        for fd in [self._seal_fd, self._state_fd, *self._log_fds.values()]:
            os.fsync(fd)

    def close(self):
        if self._seal_fd < 0:
            return
        self.sync()
        wipe(self._key)
        for fd in [self._seal_fd, self._state_fd, *self._log_fds.values()]:
            os.close(fd)
        self._seal_fd = -1
        if self._lock_fd is not None:
            fcntl.flock(self._lock_fd, fcntl.LOCK_UN)
            os.close(self._lock_fd)
            self._lock_fd = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # --- reads ---

    def log_length(self, log_id: int) -> int:
        return self.lengths[log_id]

    def read_log(self, log_id: int, offset: int, length: int) -> bytes:
        return os.pread(self._log_fds[log_id], length, offset)

    # --- appends ---

    def _seal(self, log_id: int, offset: int, data: bytes) -> SealRecord:
        header = RECORD_HEADER.pack(self.record_count, log_id, self.key_index, offset, len(data))
        record = SealRecord(self.record_count, log_id, self.key_index, offset, len(data),
                            mac(bytes(self._key), header, data))
        if data:
            os.write(self._log_fds[log_id], data)
            self.lengths[log_id] += len(data)
        os.write(self._seal_fd, record.pack())
        self._advance()
        if self.fsync_each:
            self.sync()
        return record

    def _advance(self):
        new_key = next_key(bytes(self._key))
        wipe(self._key)
        self._key[:] = new_key
        self.key_index += 1
        self.record_count += 1
        # overwrite in place: the previous key never survives in the state file
        os.pwrite(self._state_fd, STATE.pack(STATE_MAGIC, self.key_index, bytes(self._key), self.record_count), 0)

    def append(self, log_id: int, offset: int, data: bytes) -> Optional[SealRecord]:
        """Append to a real log and seal it; suppressed (None) once frozen"""
        if log_id not in self._log_fds:
            raise SealStoreError(f"unknown log id {log_id}")
        if not data:
            raise SealStoreError("empty append")
        if self.frozen:
            self.divergence_count += 1
            key = str(log_id)
            self.suppressed_bytes[key] = self.suppressed_bytes.get(key, 0) + len(data)
            self._save_divergence()
            logger.info(f"🍯 Store frozen: append of {len(data)} bytes to log {log_id} suppressed")
            return None
        if offset != self.lengths[log_id]:
            raise OffsetMismatch(f"log {log_id} has {self.lengths[log_id]} bytes, append at {offset}")
        return self._seal(log_id, offset, data)

    def append_incident(self, line: bytes) -> Optional[SealRecord]:
        if self.frozen:
            return None
        return self._seal(INCIDENT_LOG_ID, self.lengths[INCIDENT_LOG_ID], line)

    def freeze(self) -> SealRecord:
        """Seal point for honeypot mode; idempotent"""
        if self.frozen:
            raw = os.pread(self._seal_fd, RECORD_SIZE, self.frozen_at * RECORD_SIZE)
            return SealRecord.unpack(raw)
        record = self._seal(FROZEN_LOG_ID, 0, b"")
        self.frozen = True
        self.frozen_at = record.record_index
        self._save_divergence()
        self.sync()
        logger.warning(f"🧊 Seal store frozen at record {record.record_index}")
        return record

    def _save_divergence(self):
        write_json_object(os.path.join(self.path, DIVERGENCE_FILE), DivergenceState(
            frozen=self.frozen,
            frozen_at=self.frozen_at,
            divergence_count=self.divergence_count,
            suppressed_bytes=self.suppressed_bytes,
        ))

    @property
    def ratchet_state_bytes(self) -> bytes:
        return os.pread(self._state_fd, STATE.size, 0)


def verify_store(path: str, seed: bytes) -> VerifyReport:
    """Auditor check of an in-place store or an exported bundle"""
    report = VerifyReport()
    manifest = load_manifest(path)
    if manifest is None:
        report.fail(0, f"missing or unknown {MANIFEST_FILE}")
        return report
    log_ids = list(manifest["log_ids"]) + [INCIDENT_LOG_ID]
    logs: Dict[int, bytes] = {}
    for log_id in log_ids:
        report.logs[log_id] = LogStatus(log_id=log_id)
        try:
            with open(log_file(path, log_id), "rb") as f:
                logs[log_id] = f.read()
        except FileNotFoundError:
            logs[log_id] = b""
            report.fail(0, f"real log {log_id} missing", log_id)
        report.logs[log_id].actual_length = len(logs[log_id])

    try:
        with open(os.path.join(path, SEAL_LOG), "rb") as f:
            seal = f.read()
    except FileNotFoundError:
        report.fail(0, "SEAL_log missing")
        return report
    if len(seal) % RECORD_SIZE:
        report.fail(len(seal) // RECORD_SIZE, f"SEAL_log truncated mid-record ({len(seal)} bytes)")

    if len(seed) != KEY_SIZE:
        report.fail(0, f"auditor key must be {KEY_SIZE} bytes")
        return report
    key = bytearray(seed)
    expected_offset = {log_id: 0 for log_id in log_ids}
    frozen_marker: Optional[int] = None

    for index, record in enumerate(iter_records(seal)):
        report.record_count = index + 1
        if frozen_marker is not None:
            report.fail(index, f"record after frozen marker {frozen_marker}")
            break
        if record.record_index != index or record.key_index != index:
            report.fail(index, f"record numbering: index {record.record_index}, key index {record.key_index}")
            break
        if record.is_frozen_marker:
            data = b""
            if record.offset or record.length:
                report.fail(index, "frozen marker carries data")
                break
        elif record.log_id not in expected_offset:
            report.fail(index, f"unknown log id {record.log_id}")
            break
        else:
            if record.offset != expected_offset[record.log_id]:
                report.fail(index, f"log {record.log_id}: offset {record.offset}, expected {expected_offset[record.log_id]}",
                            record.log_id)
                break
            data = logs[record.log_id][record.offset:record.offset + record.length]
            if len(data) != record.length:
                report.fail(index, f"log {record.log_id}: real log shorter than record", record.log_id)
                break
        if not stdlib_hmac.compare_digest(mac(bytes(key), record.header, data), record.mac):
            report.fail(index, "MAC mismatch", None if record.is_frozen_marker else record.log_id)
            break
        if record.is_frozen_marker:
            frozen_marker = index
        else:
            status = report.logs[record.log_id]
            status.verified_bytes += record.length
            status.record_count += 1
            expected_offset[record.log_id] += record.length
        new_key = next_key(bytes(key))
        wipe(key)
        key[:] = new_key
    wipe(key)

    report.frozen = frozen_marker is not None
    divergence = load_divergence(path)
    if divergence.get("frozen") and frozen_marker is None:
        report.fail(report.record_count, "store marked frozen but the frozen marker record is missing")
    if report.first_failure is None:
        for log_id, status in report.logs.items():
            if status.actual_length != status.verified_bytes:
                report.fail(report.record_count,
                            f"log {log_id}: real log holds {status.actual_length} bytes, "
                            f"{status.verified_bytes} authenticated", log_id)
    return report


def export_for_audit(path: str, destination: str, extra: Optional[Dict[str, object]] = None) -> str:
    """Read-only bundle: real logs, SEAL_log, manifest and divergence metadata (no key material)"""
    if os.path.exists(destination) and os.listdir(destination):
        raise StoreExists(destination)
    os.makedirs(os.path.join(destination, LOGS_DIR), exist_ok=True)
    for name in (SEAL_LOG, MANIFEST_FILE, DIVERGENCE_FILE):
        source = os.path.join(path, name)
        if os.path.exists(source):
            shutil.copyfile(source, os.path.join(destination, name))
    for name in os.listdir(os.path.join(path, LOGS_DIR)):
        shutil.copyfile(os.path.join(path, LOGS_DIR, name), os.path.join(destination, LOGS_DIR, name))
    for name, payload in (extra or {}).items():
        with open(os.path.join(destination, name), "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, default=str)

    read_only = stat.S_IRUSR | stat.S_IRGRP | stat.S_IROTH
    for root, _, files in os.walk(destination):
        for name in files:
            os.chmod(os.path.join(root, name), read_only)
    logger.info(f"📦 Audit bundle exported to {destination}")
    return destination
