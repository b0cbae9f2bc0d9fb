"""Append-only workload: N concurrent writers appending fixed-size records to one log."""
import logging
import os
import socket
import threading
import time
from typing import Callable, List, Optional

import numpy as np

from app.models.schemas import BenchResult, ExportConfig, FsKind
from app.services.blockstore import BlockImage
from app.services.host_driver import HostDriver
from app.services.log_writer import WriterError
from app.services.nbd_client import NbdClient
from app.services.nbd_service import NbdServer

logger = logging.getLogger(__name__)

DEFAULT_RECORD_SIZE = 16 * 1024


class BenchError(Exception):
    fmt = "bench error: {reason}"

    def __init__(self, reason: str = ""):
        self.reason = reason
        super().__init__(self.fmt.format(reason=reason))


def record_payload(worker: int, index: int, size: int) -> bytes:
    """Recognisable record: worker/index stamp padded to size, newline terminated"""
    stamp = f"w{worker:03d} r{index:08d} ".encode()
    body = (stamp * (size // len(stamp) + 1))[:size - 1]
    return body + b"\n"


def summarize(latencies_ns: List[int], **fields) -> BenchResult:
    lat = np.asarray(latencies_ns, dtype=np.float64) / 1e6
    if lat.size == 0:
        lat = np.zeros(1)
    return BenchResult(
        latency_mean_ms=float(lat.mean()),
        latency_p50_ms=float(np.percentile(lat, 50)),
        latency_p95_ms=float(np.percentile(lat, 95)),
        latency_p99_ms=float(np.percentile(lat, 99)),
        **fields,
    )


class LoopbackSession:
    """In-process NBD session: server on one end of a socketpair, client plus host driver on the other"""

    def __init__(self, image: BlockImage, cfg: ExportConfig, fs_kind: FsKind,
                 gate: Optional[Callable] = None, ordering: str = "data-first",
                 read: Optional[Callable[[int, int], bytes]] = None):
        server_sock, client_sock = socket.socketpair(socket.AF_UNIX, socket.SOCK_STREAM)
        self.server = NbdServer(image, cfg, gate=gate, read=read)
        self._thread = threading.Thread(target=self.server.serve_local, args=(server_sock,),
                                        name="nbd-loopback", daemon=True)
        self._thread.start()
        self.client = NbdClient(client_sock, cfg.export_name, negotiate=False)
        self.driver = HostDriver(self.client, fs_kind, ordering=ordering)
        logger.info("🔁 Loopback NBD session up")

    def close(self):
        try:
            self.driver.sync()
        except Exception as e:
            logger.warning(f"⚠️ Final host sync failed: {e}")
        self.client.close()
        self._thread.join(timeout=5)
        logger.info(f"🔁 Loopback session closed ({self.server.last_outcome})")

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _run_workers(processes: int, duration_s: float, append: Callable[[int, int], int],
                 low_on_space: Callable[[], bool], clock: Callable[[], int]) -> dict:
    latencies: List[List[int]] = [[] for _ in range(processes)]
    written = [0] * processes
    stop = threading.Event()
    stopped_early = threading.Event()
    errors: List[BaseException] = []

    def worker(n: int):
        index = 0
        while not stop.is_set():
            if low_on_space():
                stopped_early.set()
                stop.set()
                return
            started = clock()
            try:
                written[n] += append(n, index)
            except WriterError as e:
                logger.warning(f"⚠️ Writer {n} stopped: {e}")
                stopped_early.set()
                stop.set()
                return
            except Exception as e:
                errors.append(e)
                stop.set()
                return
            latencies[n].append(clock() - started)
            index += 1

    threads = [threading.Thread(target=worker, args=(n,), name=f"bench-{n}", daemon=True)
               for n in range(processes)]
    begin = clock()
    for thread in threads:
        thread.start()
    stop.wait(duration_s)
    stop.set()
    for thread in threads:
        thread.join()
    elapsed = (clock() - begin) / 1e9
    if errors:
        raise BenchError(f"writer failed: {errors[0]}")
    return {
        "latencies": [value for per_worker in latencies for value in per_worker],
        "bytes_written": sum(written),
        "elapsed_s": elapsed,
        "stopped_early": stopped_early.is_set(),
    }


def run_loopback(session: LoopbackSession, log_path: str, processes: int, duration_s: float,
                 record_size: int = DEFAULT_RECORD_SIZE, min_free_fraction: float = 0.01,
                 clock: Callable[[], int] = time.perf_counter_ns) -> BenchResult:
    driver = session.driver
    # keep one batch worth of headroom above the floor
    floor = min_free_fraction + processes * record_size / max(1, session.server.image.capacity_bytes)

    def append(worker: int, index: int) -> int:
        driver.append(log_path, record_payload(worker, index, record_size))
        return record_size

    run = _run_workers(processes, duration_s, append, lambda: driver.free_fraction() < floor, clock)
    return summarize(run["latencies"], processes=processes, duration_s=duration_s, mode="loopback",
                     record_size=record_size, operations=len(run["latencies"]),
                     bytes_written=run["bytes_written"], elapsed_s=run["elapsed_s"],
                     stopped_early=run["stopped_early"])


def run_mounted(mount_point: str, log_path: str, processes: int, duration_s: float,
                record_size: int = DEFAULT_RECORD_SIZE, min_free_fraction: float = 0.01,
                clock: Callable[[], int] = time.perf_counter_ns) -> BenchResult:
    """Kernel path: O_APPEND writes plus fdatasync on a file system mounted from the export"""
    target = os.path.join(mount_point, log_path.lstrip("/"))
    fds = [os.open(target, os.O_WRONLY | os.O_APPEND) for _ in range(processes)]

    def append(worker: int, index: int) -> int:
        payload = record_payload(worker, index, record_size)
        os.write(fds[worker], payload)
        os.fdatasync(fds[worker])
        return len(payload)

    def low_on_space() -> bool:
        st = os.statvfs(mount_point)
        return st.f_bavail / max(1, st.f_blocks) < min_free_fraction

    try:
        run = _run_workers(processes, duration_s, append, low_on_space, clock)
    finally:
        for fd in fds:
            os.close(fd)
    return summarize(run["latencies"], processes=processes, duration_s=duration_s, mode="kernel",
                     record_size=record_size, operations=len(run["latencies"]),
                     bytes_written=run["bytes_written"], elapsed_s=run["elapsed_s"],
                     stopped_early=run["stopped_early"])


def check_bench_args(processes: int, duration_s: float, record_size: int):
    if duration_s <= 0:
        raise BenchError(f"duration must be > 0 (got {duration_s})")
    if processes < 1:
        raise BenchError(f"need at least one writer (got {processes})")
    if record_size < 1:
        raise BenchError(f"record size must be positive (got {record_size})")


def mount_available(mount_point: Optional[str]) -> bool:
    return bool(mount_point) and os.path.ismount(mount_point)
