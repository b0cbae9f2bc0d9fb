"""Write-stream traces: recording from a live image and deterministic replay into the engine."""
import json
import logging
import struct
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import BinaryIO, Callable, Dict, Iterator, List, Optional, Sequence

from app.models.schemas import CoherencyConfig, EngineMode, FsKind, PolicyMode
from app.services.blockstore import BlockImage, BlockStoreError, WriteOp, image_digest
from app.services.inference import LogSpec
from app.services.rfs_engine import AppendEvent, CompromiseIndicator, RfsEngine

logger = logging.getLogger(__name__)

TRACE_FORMAT = "worm-trace/1"
RECORD = struct.Struct("<QqQI")  # seq, arrival_delta_ns, offset, length


class TraceError(Exception):
    fmt = "trace error: {reason}"

    def __init__(self, reason: str = ""):
        self.reason = reason
        super().__init__(self.fmt.format(reason=reason))


class ImageMismatch(TraceError):
    fmt = "base image does not match trace: {reason}"


@dataclass
class TraceHeader:
    fs_kind: FsKind
    image_sha256: str
    capacity: int
    created: str = ""

    def to_line(self) -> bytes:
        return json.dumps({
            "format": TRACE_FORMAT,
            "fs_kind": self.fs_kind.value,
            "image_sha256": self.image_sha256,
            "capacity": self.capacity,
            "created": self.created,
        }, sort_keys=True).encode() + b"\n"

    @classmethod
    def from_line(cls, line: bytes) -> "TraceHeader":
        try:
            data = json.loads(line)
        except ValueError as e:
            raise TraceError(f"header is not JSON: {e}") from e
        if data.get("format") != TRACE_FORMAT:
            raise TraceError(f"unknown trace format {data.get('format')!r}")
        return cls(FsKind(data["fs_kind"]), data["image_sha256"], int(data["capacity"]), data.get("created", ""))


class TraceWriter:
    """Header line, then one fixed record plus verbatim payload per WriteOp"""

    def __init__(self, path: str, header: TraceHeader, start_time: int):
        self.path = path
        self.header = header
        self._file: BinaryIO = open(path, "wb")
        self._file.write(header.to_line())
        self._last_time = start_time
        self.count = 0

    def write_op(self, op: WriteOp):
        delta = op.arrival_time - self._last_time
        self._last_time = op.arrival_time
        self._file.write(RECORD.pack(op.seq, delta, op.offset, op.length))
        self._file.write(op.payload)
        self.count += 1

    def close(self):
        if not self._file.closed:
            self._file.flush()
            self._file.close()


class TraceRecorder:
    """Taps an image as an extra subscriber; the header identifies the image state at start"""

    def __init__(self, image: BlockImage, path: str, fs_kind: FsKind):
        self.image = image
        header = TraceHeader(fs_kind, image_digest(image), image.capacity_bytes,
                             datetime.now(timezone.utc).isoformat())
        self.writer = TraceWriter(path, header, image.clock())
        self.subscription = image.subscribe("trace-recorder")
        self._thread = threading.Thread(target=self._consume, name="trace-recorder", daemon=True)
        self._thread.start()
        logger.info(f"🎥 Recording write trace to {path}")

    def _consume(self):
        for op in self.subscription:
            self.writer.write_op(op)

    def stop(self) -> int:
        self.image.unsubscribe(self.subscription)
        self._thread.join(timeout=10)
        self.writer.close()
        logger.info(f"🎬 Trace closed: {self.writer.count} write(s) in {self.writer.path}")
        return self.writer.count


class TraceReader:
    def __init__(self, path: str):
        self.path = path
        try:
            with open(path, "rb") as f:
                self.header = TraceHeader.from_line(f.readline())
                self._data_start = f.tell()
        except OSError as e:
            raise TraceError(str(e)) from e

    def __iter__(self) -> Iterator[WriteOp]:
        """WriteOps with arrival times relative to the recording start"""
        now = 0
        with open(self.path, "rb") as f:
            f.seek(self._data_start)
            while True:
                raw = f.read(RECORD.size)
                if not raw:
                    return
                if len(raw) != RECORD.size:
                    raise TraceError(f"truncated record header in {self.path}")
                seq, delta, offset, length = RECORD.unpack(raw)
                payload = f.read(length)
                if len(payload) != length:
                    raise TraceError(f"truncated payload of op {seq}")
                now += delta
                yield WriteOp(seq=seq, offset=offset, payload=payload, arrival_time=now)

    def ops(self) -> List[WriteOp]:
        return list(self)


@dataclass
class ReplayResult:
    applied: int = 0
    rejected: int = 0
    events: List[AppendEvent] = field(default_factory=list)
    indicators: List[CompromiseIndicator] = field(default_factory=list)
    committed_sizes: Dict[int, int] = field(default_factory=dict)
    end_time_ns: int = 0


class VirtualClock:
    def __init__(self, start: int = 0):
        self.now = start

    def __call__(self) -> int:
        return self.now


def check_base_image(image: BlockImage, header: TraceHeader):
    if image.capacity_bytes != header.capacity:
        raise ImageMismatch(f"capacity {image.capacity_bytes} != {header.capacity}")
    digest = image_digest(image)
    if digest != header.image_sha256:
        raise ImageMismatch(f"sha256 {digest[:16]}... != {header.image_sha256[:16]}...")


def replay(trace_path: str, image: BlockImage, specs: Sequence[LogSpec], mode: EngineMode,
           coherency: Optional[CoherencyConfig] = None, policy: PolicyMode = PolicyMode.READ_ONLY,
           store=None, catalog=None, min_free_percent: float = 1.0, speed: float = 0.0,
           time_scale: float = 1.0, sleep: Callable[[float], None] = time.sleep) -> ReplayResult:
    """Feed a trace through the write gate into a fresh engine on a virtual clock

    Ticks are issued every tick period of trace time and the tail is drained by
    advancing the clock until no window is pending, so the outcome does not
    depend on `speed`, which only paces real sleeping (0 = no sleeping).
    `time_scale` divides recorded gaps and the coherency timers alike.
    """
    reader = TraceReader(trace_path)
    check_base_image(image, reader.header)
    coherency = coherency or CoherencyConfig()
    if time_scale != 1.0:
        coherency = coherency.scaled(time_scale)

    clock = VirtualClock()
    engine = RfsEngine(image, specs, mode, coherency=coherency, policy=policy, store=store,
                       catalog=catalog, min_free_percent=min_free_percent, clock=clock)
    tick_ns = coherency.tick_ns
    next_tick = tick_ns
    result = ReplayResult()

    def advance(target: int):
        nonlocal next_tick
        while next_tick <= target:
            clock.now = next_tick
            engine.tick(next_tick)
            next_tick += tick_ns
        clock.now = max(clock.now, target)

    logger.info(f"⏯️ Replaying {trace_path} ({mode.value}, speed={speed or 'max'}, scale={time_scale})")
    previous = 0
    for recorded in reader:
        at = int(recorded.arrival_time / time_scale)
        if speed > 0 and at > previous:
            sleep((at - previous) / 1e9 / speed)
        previous = at
        advance(at)
        if not engine.gate():
            result.rejected += 1
            continue
        try:
            op = image.write(recorded.offset, recorded.payload, arrival_time=at)
        except BlockStoreError as e:
            raise TraceError(f"op {recorded.seq}: {e}") from e
        engine.ingest(op)
        result.applied += 1

    # generous bound: every window may DEFER its full retry budget
    limit = clock.now + (coherency.max_zero_retries + 2) * (coherency.tau_ns + tick_ns) * max(1, len(specs))
    while engine.pending and clock.now < limit:
        deadline = engine.next_deadline()
        advance(max(deadline if deadline is not None else clock.now, clock.now + tick_ns))
    if engine.pending:
        logger.warning("⚠️ Windows still pending at the end of replay, draining")
        engine.drain(clock.now)

    result.events = list(engine.events)
    result.indicators = list(engine.indicators)
    result.committed_sizes = engine.committed_sizes()
    result.end_time_ns = clock.now
    logger.info(f"✅ Replay done: {result.applied} applied, {result.rejected} rejected, "
                f"{len(result.events)} append(s), {len(result.indicators)} indicator(s)")
    return result
