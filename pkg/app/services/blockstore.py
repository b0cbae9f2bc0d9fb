import hashlib
import logging
import os
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator, List, Optional, Tuple

logger = logging.getLogger(__name__)

SECTOR_SIZE = 512
ZERO_CHUNK = 1024 * 1024


class BlockStoreError(Exception):
    fmt = "block store error: {reason}"

    def __init__(self, reason: str = "", **kwargs):
        self.reason = reason
        self.__dict__.update(kwargs)
        super().__init__(self.fmt.format(reason=reason, **kwargs))


class ImageNotFound(BlockStoreError):
    fmt = "image not found: {reason}"


class CapacityError(BlockStoreError):
    fmt = "bad image capacity: {reason}"


class OutOfRange(BlockStoreError):
    fmt = "out-of-range access: offset={offset} length={length} capacity={capacity}"


class StorageError(BlockStoreError):
    fmt = "storage I/O failure: {reason}"


@dataclass(frozen=True)
class WriteOp:
    seq: int
    offset: int
    payload: bytes = field(repr=False)
    arrival_time: int = 0

    @property
    def length(self) -> int:
        return len(self.payload)

    @property
    def end(self) -> int:
        return self.offset + len(self.payload)

    def overlaps(self, start: int, end: int) -> bool:
        return self.offset < end and start < self.end

    def slice(self, start: int, end: int) -> bytes:
        """Payload bytes for image range [start, end) (must lie inside the op)"""
        return self.payload[start - self.offset:end - self.offset]


class Subscription:
    """Unbounded, in-order queue of applied writes for one consumer"""

    def __init__(self, name: str, high_water: int = 10000):
        self.name = name
        self.high_water = high_water
        self._queue: "queue.Queue[Optional[WriteOp]]" = queue.Queue()
        self._above_high_water = False
        self.closed = False

    def _deliver(self, op: WriteOp):
        self._queue.put(op)
        depth = self._queue.qsize()
        if depth >= self.high_water and not self._above_high_water:
            self._above_high_water = True
            logger.warning(f"⚠️ Subscriber '{self.name}' queue depth {depth} crossed high-water mark {self.high_water}")
        elif depth < self.high_water // 2:
            self._above_high_water = False

    def get(self, timeout: Optional[float] = None) -> Optional[WriteOp]:
        try:
            return self._queue.get(timeout=timeout)
        except queue.Empty:
            return None

    def drain(self) -> List[WriteOp]:
        ops = []
        while True:
            try:
                op = self._queue.get_nowait()
            except queue.Empty:
                return ops
            if op is not None:
                ops.append(op)

    def depth(self) -> int:
        return self._queue.qsize()

    def close(self):
        self.closed = True
        self._queue.put(None)

    def __iter__(self) -> Iterator[WriteOp]:
        while True:
            op = self._queue.get()
            if op is None:
                return
            yield op


class BlockImage:
    """Raw image file served as a block device"""

    sector_size = SECTOR_SIZE

    def __init__(self, path: str, fd: int, capacity_bytes: int,
                 clock: Callable[[], int] = time.monotonic_ns, high_water: int = 10000):
        self.path = path
        self.fd = fd
        self.capacity_bytes = capacity_bytes
        self.clock = clock
        self.high_water = high_water
        self.last_seq = 0
        self._lock = threading.Lock()
        self._subscribers: List[Subscription] = []

    def _check_range(self, offset: int, length: int):
        if offset < 0 or length < 0 or offset + length > self.capacity_bytes:
            raise OutOfRange(offset=offset, length=length, capacity=self.capacity_bytes)

    def read_raw(self, offset: int, length: int) -> bytes:
        """Image bytes, bypassing any fault injection"""
        self._check_range(offset, length)
        try:
            data = os.pread(self.fd, length, offset)
        except OSError as e:
            raise StorageError(str(e)) from e
        if len(data) != length:
            raise StorageError(f"short read at {offset}: {len(data)}/{length}")
        return data

    def read_range(self, offset: int, length: int) -> bytes:
        return self.read_raw(offset, length)

    def write(self, offset: int, payload: bytes, arrival_time: Optional[int] = None) -> WriteOp:
        """Assign the next sequence number and apply"""
        with self._lock:
            op = WriteOp(
                seq=self.last_seq + 1,
                offset=offset,
                payload=bytes(payload),
                arrival_time=self.clock() if arrival_time is None else arrival_time,
            )
            self._apply_locked(op)
        return op

    def apply_write(self, op: WriteOp) -> int:
        """Persist op and forward it to every subscriber; returns the acknowledged seq"""
        with self._lock:
            if op.seq <= self.last_seq:
                raise BlockStoreError(f"sequence regression: {op.seq} after {self.last_seq}")
            self._apply_locked(op)
        return op.seq

    def _apply_locked(self, op: WriteOp):
        if op.length == 0:
            raise BlockStoreError("zero-length write")
        self._check_range(op.offset, op.length)
        try:
            written = os.pwrite(self.fd, op.payload, op.offset)
        except OSError as e:
            raise StorageError(str(e)) from e
        if written != op.length:
            raise StorageError(f"short write at {op.offset}: {written}/{op.length}")
        self.last_seq = op.seq
        self._on_applied(op)
        for subscriber in self._subscribers:
            subscriber._deliver(op)

    def _on_applied(self, op: WriteOp):
        pass

    def flush(self):
        """Barrier: every acknowledged write is durable when this returns"""
        with self._lock:
            try:
                os.fsync(self.fd)
            except OSError as e:
                raise StorageError(str(e)) from e

    def subscribe(self, name: str = "engine") -> Subscription:
        subscription = Subscription(name, self.high_water)
        with self._lock:
            self._subscribers.append(subscription)
        logger.debug(f"📡 Subscriber '{name}' attached at seq {self.last_seq}")
        return subscription

    def unsubscribe(self, subscription: Subscription):
        with self._lock:
            if subscription in self._subscribers:
                self._subscribers.remove(subscription)
        subscription.close()

    def close(self):
        for subscription in list(self._subscribers):
            self.unsubscribe(subscription)
        if self.fd >= 0:
            os.close(self.fd)
            self.fd = -1

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class ZeroInjectingImage(BlockImage):
    """Test device: every second write reads back as zeros once"""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._poisoned: List[Tuple[int, int]] = []
        self._poison_lock = threading.Lock()

    def _on_applied(self, op: WriteOp):
        if op.seq % 2 == 0:
            with self._poison_lock:
                self._poisoned.append((op.offset, op.end))

    def read_range(self, offset: int, length: int) -> bytes:
        data = super().read_range(offset, length)
        end = offset + length
        with self._poison_lock:
            hits = [r for r in self._poisoned if r[0] < end and offset < r[1]]
            if not hits:
                return data
            self._poisoned = [r for r in self._poisoned if r not in hits]
        buf = bytearray(data)
        for start, stop in hits:
            lo, hi = max(start, offset), min(stop, end)
            buf[lo - offset:hi - offset] = bytes(hi - lo)
        logger.debug(f"💉 Injected zeros into {len(hits)} range(s) of read at {offset}")
        return bytes(buf)

    @property
    def poisoned_ranges(self) -> List[Tuple[int, int]]:
        with self._poison_lock:
            return list(self._poisoned)


def create_image(path: str, capacity_bytes: int):
    """Write a zero-filled image (explicit zeros, never sparse)"""
    if capacity_bytes <= 0 or capacity_bytes % SECTOR_SIZE:
        raise CapacityError(f"{capacity_bytes} is not a positive multiple of {SECTOR_SIZE}")
    if os.path.exists(path):
        raise BlockStoreError(f"{path} already exists")
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    chunk = bytes(ZERO_CHUNK)
    with open(path, "wb") as f:
        remaining = capacity_bytes
        while remaining:
            n = min(remaining, ZERO_CHUNK)
            f.write(chunk[:n])
            remaining -= n
        f.flush()
        os.fsync(f.fileno())
    logger.info(f"💾 Created zero-filled image {path} ({capacity_bytes} bytes)")


def open_image(path: str, expected_capacity: Optional[int] = None, zero_injection: bool = False,
               clock: Callable[[], int] = time.monotonic_ns, high_water: int = 10000) -> BlockImage:
    if not os.path.exists(path):
        raise ImageNotFound(path)
    try:
        fd = os.open(path, os.O_RDWR)
    except OSError as e:
        raise StorageError(str(e)) from e
    capacity = os.fstat(fd).st_size
    if capacity % SECTOR_SIZE or capacity == 0:
        os.close(fd)
        raise CapacityError(f"capacity not sector-aligned ({capacity} bytes)")
    if expected_capacity is not None and capacity != expected_capacity:
        os.close(fd)
        raise CapacityError(f"size mismatch: expected {expected_capacity}, found {capacity}")

    image_class = ZeroInjectingImage if zero_injection else BlockImage
    if zero_injection:
        logger.warning("⚠️ Zero-injection test device enabled")
    logger.info(f"💾 Opened image {path} ({capacity} bytes)")
    return image_class(path, fd, capacity, clock=clock, high_water=high_water)


def image_digest(img: BlockImage) -> str:
    digest = hashlib.sha256()
    for offset in range(0, img.capacity_bytes, ZERO_CHUNK):
        digest.update(img.read_raw(offset, min(ZERO_CHUNK, img.capacity_bytes - offset)))
    return digest.hexdigest()


def file_digest(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(ZERO_CHUNK), b""):
            digest.update(chunk)
    return digest.hexdigest()
