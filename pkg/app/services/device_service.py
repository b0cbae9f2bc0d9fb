"""Operator workflows: init (Stage 1), serve (Stage 2), audit/export/diff (Stage 3), trace and bench."""
import json
import logging
import os
import shutil
import signal
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

from app.models.database import Catalog
from app.models.schemas import DeviceConfig, DiffReport, FsKind, LogDiff, VerifyReport
from app.services.bench_service import (
    BenchError,
    DEFAULT_RECORD_SIZE,
    LoopbackSession,
    check_bench_args,
    mount_available,
    run_loopback,
    run_mounted,
)
from app.services.blockstore import BlockImage, create_image, open_image
from app.services.exfat_reader import ExfatVolume
from app.services.ext4_reader import Ext4Volume
from app.services.formatter import FormatError, format_exfat, format_ext4, system_format
from app.services.fs_common import FsError
from app.services.inference import LogSpec, open_inference, resolve_log_specs
from app.services.log_writer import create_empty_logs
from app.services.nbd_service import KernelAttachment, NbdServer
from app.services.rfs_engine import EngineRunner, RfsEngine
from app.services.seal_store import SealStore, StoreExists, export_for_audit, log_file, verify_store
from app.services.trace_service import ReplayResult, TraceRecorder, replay
from app.utils.helpers import differing_ranges, format_size, parse_endpoint
from app.utils.settings import ConfigError

logger = logging.getLogger(__name__)


def auditor_key_path(config: DeviceConfig) -> str:
    return config.auditor_key_path or config.seal_store_path.rstrip("/") + ".auditor.key"


# --- Stage 1 ---

def prepare_image(config: DeviceConfig):
    """Create and format the image when absent; a present image is taken as pre-formatted"""
    if os.path.exists(config.image_path):
        logger.info(f"💾 Using pre-formatted image {config.image_path}")
        return
    if not config.image_size_bytes:
        raise ConfigError("IMAGE_SIZE_BYTES is required to create a new image")
    create_image(config.image_path, config.image_size_bytes)
    try:
        if config.formatter == "system":
            system_format(config.image_path, config.fs_kind, config.block_size, config.journal_mode,
                          config.journal_blocks)
            return
        with open_image(config.image_path) as image:
            if config.fs_kind == FsKind.EXT4:
                format_ext4(image.write, image.capacity_bytes, config.block_size, config.journal_mode,
                            config.journal_blocks, config.journal_csum)
            else:
                format_exfat(image.write, image.capacity_bytes, config.block_size)
            image.flush()
    except FormatError:
        os.unlink(config.image_path)
        raise


def cmd_init(config: DeviceConfig) -> List[LogSpec]:
    key_path = auditor_key_path(config)
    store_path = config.seal_store_path
    if os.path.isdir(store_path) and os.listdir(store_path):
        raise StoreExists(store_path)
    if os.path.exists(key_path):
        raise StoreExists(key_path)
    prepare_image(config)
    with open_image(config.image_path, expected_capacity=config.image_size_bytes) as image:
        # refuses unsupported features before anything is written
        try:
            open_inference(config.fs_kind, image.read_raw)
        except FsError as e:
            raise FormatError(str(e)) from e
        specs = create_empty_logs(image, config.fs_kind, config.log_paths)

    store = SealStore.init(config.seal_store_path, [spec.log_id for spec in specs], key_path, seed=config.seed_bytes)
    store.close()
    catalog = Catalog(config.seal_store_path)
    try:
        catalog.save_log_specs([spec.to_dict() for spec in specs])
    finally:
        catalog.close()
    logger.info(f"🎉 Device initialized: {len(specs)} log(s), auditor key at {key_path}")
    return specs


def load_specs(store_path: str) -> List[LogSpec]:
    catalog = Catalog(store_path)
    try:
        rows = catalog.load_log_specs()
    finally:
        catalog.close()
    if not rows:
        raise ConfigError(f"no log specs in the catalog of {store_path}; run init first")
    return [LogSpec.from_dict(row) for row in rows]


# --- Stage 2 ---

class DeviceSession:
    """One serve session: image, locked seal store, catalog, engine and its runner"""

    def __init__(self, config: DeviceConfig, trace_path: Optional[str] = None):
        self.config = config
        self.specs = load_specs(config.seal_store_path)
        self.image: BlockImage = open_image(config.image_path, zero_injection=config.zero_injection,
                                            high_water=config.queue_high_water)
        self.store: Optional[SealStore] = None
        self.catalog: Optional[Catalog] = None
        self.recorder: Optional[TraceRecorder] = None
        try:
            self.store = SealStore(config.seal_store_path)
            self.store.lock()
            self.catalog = Catalog(config.seal_store_path)
            self.engine = RfsEngine(self.image, self.specs, config.engine_mode, coherency=config.coherency(),
                                    policy=config.policy, store=self.store, catalog=self.catalog,
                                    min_free_percent=config.min_free_percent)
            if trace_path:
                self.recorder = TraceRecorder(self.image, trace_path, config.fs_kind)
            self.runner = EngineRunner(self.engine, self.image.subscribe("engine"))
        except BaseException:
            self._release()
            raise
        self.session_id: Optional[int] = None
        self.committed_sizes: Dict[int, int] = {}

    def start(self):
        self.runner.start()
        self.session_id = self.catalog.start_session(self.config.listen, self.config.engine_mode.value)

    def outcome(self) -> str:
        if self.engine.policy.activated:
            return f"policy-{self.config.policy.value}"
        return "clean"

    def close(self, flush: bool = True) -> Dict[int, int]:
        self.committed_sizes = self.runner.stop(self.image, flush=flush)
        if self.recorder is not None:
            self.recorder.stop()
        if self.session_id is not None:
            self.catalog.end_session(self.session_id, self.committed_sizes, self.outcome())
        for log_id, size in sorted(self.committed_sizes.items()):
            logger.info(f"📏 Log {log_id}: {size} bytes committed")
        self._release()
        return self.committed_sizes

    def _release(self):
        if self.store is not None:
            self.store.close()
        if self.catalog is not None:
            self.catalog.close()
        self.image.close()

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, *exc):
        self.close()


def _install_stop_handlers(stop: threading.Event) -> Dict[int, object]:
    """Route SIGINT/SIGTERM to the stop event; returns the handlers to restore"""
    if threading.current_thread() is not threading.main_thread():
        return {}
    previous = {}
    for signum in (signal.SIGINT, signal.SIGTERM):
        previous[signum] = signal.signal(signum, lambda *_: stop.set())
    return previous


def cmd_serve(config: DeviceConfig, trace_path: Optional[str] = None, stop: Optional[threading.Event] = None,
              workload: Optional[Callable[[LoopbackSession], None]] = None) -> DeviceSession:
    """Serve until stopped (signal or event); loopback runs `workload` against an in-process session"""
    transport, address = parse_endpoint(config.listen)
    if transport == "loopback" and workload is None:
        raise ConfigError("LISTEN=loopback serves an in-process workload only (see bench)")
    stop = stop or threading.Event()
    previous = _install_stop_handlers(stop)
    try:
        return _serve(config, transport, address, stop, trace_path, workload)
    finally:
        for signum, handler in previous.items():
            signal.signal(signum, handler)


def _serve(config: DeviceConfig, transport: str, address, stop: threading.Event, trace_path: Optional[str],
           workload: Optional[Callable[[LoopbackSession], None]]) -> DeviceSession:
    session = DeviceSession(config, trace_path)
    with session:
        server = NbdServer(session.image, config.export_config(session.image.capacity_bytes),
                           gate=session.engine.gate, read=session.engine.serve_read)
        if transport == "loopback":
            with LoopbackSession(session.image, config.export_config(session.image.capacity_bytes),
                                 config.fs_kind, gate=session.engine.gate,
                                 read=session.engine.serve_read) as loopback:
                workload(loopback)
        elif transport == "kernel":
            attachment = KernelAttachment(server, address, config.block_size)
            attachment.attach()
            try:
                stop.wait()
            finally:
                attachment.detach()
        else:
            server.start()
            try:
                stop.wait()
            finally:
                server.stop()
        logger.info("🛑 Stopping: flushing pending windows")
    return session


def cmd_trace_record(config: DeviceConfig, trace_path: str, base_copy: Optional[str] = None,
                     stop: Optional[threading.Event] = None,
                     workload: Optional[Callable[[LoopbackSession], None]] = None) -> DeviceSession:
    """Serve with a trace recorder attached; base_copy keeps the image the trace replays onto"""
    if base_copy:
        shutil.copyfile(config.image_path, base_copy)
        logger.info(f"💾 Base image saved to {base_copy}")
    return cmd_serve(config, trace_path=trace_path, stop=stop, workload=workload)


def cmd_bench(config: DeviceConfig, processes: int, duration_s: float, record_size: int = DEFAULT_RECORD_SIZE,
              mount_point: Optional[str] = None, log_path: Optional[str] = None):
    check_bench_args(processes, duration_s, record_size)
    log_path = log_path or config.log_paths[0]
    if log_path not in config.log_paths:
        raise BenchError(f"{log_path} is not a configured log")
    min_free = config.min_free_percent / 100

    if mount_point is not None:
        if mount_available(mount_point):
            return run_mounted(mount_point, log_path, processes, duration_s, record_size, min_free)
        logger.warning(f"⚠️ {mount_point} is not mounted, falling back to in-process loopback")

    results = []
    loopback_config = config.model_copy(update={"listen": "loopback"})
    cmd_serve(loopback_config, workload=lambda session: results.append(
        run_loopback(session, log_path, processes, duration_s, record_size, min_free)))
    result = results[0]
    logger.info(f"🏁 Bench: {processes} writer(s), {format_size(result.bytes_written)} in {result.elapsed_s:.1f}s "
                f"= {result.bandwidth_MBps:.2f} MB/s, mean latency {result.latency_mean_ms:.2f} ms")
    return result


# --- Stage 3 ---

def read_key(key_path: str) -> bytes:
    if not os.path.exists(key_path):
        raise ConfigError(f"auditor key not found: {key_path}")
    with open(key_path, "rb") as f:
        return f.read()


def cmd_audit(store_path: str, key_path: str) -> VerifyReport:
    report = verify_store(store_path, read_key(key_path))
    glyph = "✅" if report.passed else "❌"
    logger.info(f"{glyph} Audit of {store_path}: {report.record_count} record(s), "
                f"{'PASS' if report.passed else 'FAIL'}")
    return report


def read_img_log(image: BlockImage, spec: LogSpec) -> bytes:
    """Current content of the img log, read the way a host would"""
    if spec.fs_kind == FsKind.EXT4:
        volume = Ext4Volume(image.read_raw)
        inode = volume.read_inode(spec.locator.inode_number, spec.locator)
        return volume.read_file_range(inode, 0, inode.size_bytes)
    volume = ExfatVolume(image.read_raw)
    entry_set = volume.read_entry_set_at(spec.locator)
    return volume.read_file_range(entry_set, 0, entry_set.valid_data_length)


def diff_log(spec: LogSpec, real: bytes, img: Optional[bytes], problem: Optional[str] = None) -> LogDiff:
    if img is None:
        return LogDiff(log_id=spec.log_id, path=spec.path, real_length=len(real), img_length=0,
                       note=f"img log unreadable: {problem}")
    common = min(len(real), len(img))
    note = None
    if len(img) < len(real):
        note = f"img shorter by {len(real) - len(img)} bytes"
    elif len(img) > len(real):
        note = f"img longer by {len(img) - len(real)} bytes"
    return LogDiff(log_id=spec.log_id, path=spec.path, real_length=len(real), img_length=len(img),
                   ranges=differing_ranges(real[:common], img[:common]), note=note)


def cmd_diff(store_path: str, image_path: str) -> DiffReport:
    """Honeypot forensics: where each img log departs from its sealed real log"""
    report = DiffReport()
    specs = load_specs(store_path)
    with open_image(image_path) as image:
        for spec in specs:
            with open(log_file(store_path, spec.log_id), "rb") as f:
                real = f.read()
            try:
                entry = diff_log(spec, real, read_img_log(image, spec))
            except FsError as e:
                entry = diff_log(spec, real, None, str(e))
            report.logs.append(entry)
            if not entry.empty:
                logger.warning(f"🔎 {spec.path}: {len(entry.ranges)} differing range(s)"
                               f"{', ' + entry.note if entry.note else ''}")
    return report


def cmd_export(store_path: str, destination: str) -> str:
    catalog = Catalog(store_path)
    try:
        extra = {
            "log_specs.json": catalog.load_log_specs(),
            "incidents.json": [
                {"id": row.id, "kind": row.kind, "severity": row.severity, "seq": row.seq, "log_id": row.log_id,
                 "description": row.description, "ranges": json.loads(row.ranges or "[]"),
                 "policy_action": row.policy_action, "sealed": bool(row.sealed), "created_at": row.created_at}
                for row in catalog.incidents()
            ],
            "sessions.json": [
                {"id": row.id, "listen": row.listen, "engine_mode": row.engine_mode, "started_at": row.started_at,
                 "stopped_at": row.stopped_at, "committed_sizes": json.loads(row.committed_sizes or "{}"),
                 "outcome": row.outcome}
                for row in catalog.sessions()
            ],
        }
    finally:
        catalog.close()
    return export_for_audit(store_path, destination, extra)


# --- traces ---

@dataclass
class ReplayOutcome:
    result: ReplayResult
    specs: List[LogSpec] = field(default_factory=list)


def cmd_trace_replay(config: DeviceConfig, trace_path: str, base_image: str, speed: float = 0.0,
                     time_scale: float = 1.0) -> ReplayOutcome:
    """Replay onto a copy of the base image (IMAGE_PATH) into a fresh store (SEAL_STORE_PATH)"""
    if os.path.exists(config.image_path):
        raise ConfigError(f"{config.image_path} exists; replay writes a fresh copy of the base image")
    shutil.copyfile(base_image, config.image_path)
    with open_image(config.image_path, zero_injection=config.zero_injection) as image:
        specs = resolve_log_specs(image.read_raw, config.fs_kind, config.log_paths)
        store = SealStore.init(config.seal_store_path, [spec.log_id for spec in specs], auditor_key_path(config),
                               seed=config.seed_bytes)
        catalog = Catalog(config.seal_store_path)
        catalog.save_log_specs([spec.to_dict() for spec in specs])
        try:
            result = replay(trace_path, image, specs, config.engine_mode, coherency=config.coherency(),
                            policy=config.policy, store=store, catalog=catalog,
                            min_free_percent=config.min_free_percent, speed=speed, time_scale=time_scale)
        finally:
            store.close()
            catalog.close()
    return ReplayOutcome(result, specs)
