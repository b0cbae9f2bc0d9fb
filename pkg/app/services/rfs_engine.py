import bisect
import dataclasses
import json
import logging
import threading
import time
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from app.models.schemas import CoherencyConfig, EngineMode, FsKind, PolicyMode
from app.services.blockstore import BlockImage, Subscription, WriteOp
from app.services.ext4_reader import SUPERBLOCK_OFFSET, SUPERBLOCK_SIZE, GroupDescriptor, decode_superblock
from app.services.exfat_reader import boot_signature, PERCENT_IN_USE_OFFSET, PERCENT_UNKNOWN
from app.services.fs_common import (
    Classification,
    FsError,
    MappingGap,
    RegionKind,
    UninitializedBlock,
    ZeroData,
)
from app.services.inference import DataRange, FsInference, LogSpec, Span, merge_ranges, open_inference
from app.services.jbd2_watch import JournalEventKind, JournalTransaction, JournalWatcher, parse_journal_superblock
from app.utils.helpers import differing_ranges, is_all_zero

logger = logging.getLogger(__name__)


class EngineError(Exception):
    fmt = "engine error: {reason}"

    def __init__(self, reason: str = ""):
        self.reason = reason
        super().__init__(self.fmt.format(reason=reason))


class IndicatorKind(str, Enum):
    NON_APPEND_WRITE = "NON_APPEND_WRITE"
    SIZE_SHRINK = "SIZE_SHRINK"
    METADATA_VIOLATION = "METADATA_VIOLATION"
    FS_STRUCTURE_TAMPER = "FS_STRUCTURE_TAMPER"
    VOLUME_EXHAUSTION = "VOLUME_EXHAUSTION"


class Severity(str, Enum):
    COMPROMISE = "COMPROMISE"
    WARNING = "WARNING"


class AppendBasis(str, Enum):
    QUIESCENCE_WINDOW = "QUIESCENCE_WINDOW"
    JOURNAL_COMMIT = "JOURNAL_COMMIT"


class DeferReason(str, Enum):
    ZERO_DATA = "zero-data"
    MAPPING_GAP = "mapping-gap"
    UNINITIALIZED = "uninitialized-metadata"


@dataclasses.dataclass
class Window:
    first_change_time: int
    zero_retries: int = 0
    last_defer: Optional[DeferReason] = None


@dataclasses.dataclass
class WatchState:
    log_id: int
    committed_size: int
    observed_size: int
    window: Optional[Window] = None
    record: object = dataclasses.field(default=None, repr=False)
    committed_ranges: List[DataRange] = dataclasses.field(default_factory=list, repr=False)
    # extent tree blocks or FAT entries behind committed_ranges
    map_ranges: List[Span] = dataclasses.field(default_factory=list, repr=False)
    _starts: List[int] = dataclasses.field(default_factory=list, repr=False)
    _map_starts: List[int] = dataclasses.field(default_factory=list, repr=False)

    @staticmethod
    def normalize(ranges: Sequence[DataRange]) -> List[DataRange]:
        """Maximal runs, ordered by image offset"""
        return sorted(merge_ranges(sorted(ranges, key=lambda r: r[2])))

    def set_ranges(self, ranges: Sequence[DataRange]):
        self.committed_ranges = self.normalize(ranges)
        self._starts = [r[0] for r in self.committed_ranges]

    def set_map(self, spans: List[Span]):
        self.map_ranges = spans
        self._map_starts = [s[0] for s in spans]

    def maps_into(self, start: int, end: int) -> bool:
        i = bisect.bisect_right(self._map_starts, start) - 1
        if i >= 0 and self.map_ranges[i][1] > start:
            return True
        return i + 1 < len(self.map_ranges) and self.map_ranges[i + 1][0] < end

    def overlapping(self, start: int, end: int) -> List[DataRange]:
        i = max(0, bisect.bisect_right(self._starts, start) - 1)
        hits = []
        while i < len(self.committed_ranges) and self.committed_ranges[i][0] < end:
            r = self.committed_ranges[i]
            if r[1] > start:
                hits.append(r)
            i += 1
        return hits


@dataclasses.dataclass
class AppendEvent:
    log_id: int
    old_size: int
    new_size: int
    data: bytes = dataclasses.field(repr=False)
    basis: AppendBasis
    commit_time: int

    def __post_init__(self):
        if self.new_size <= self.old_size or len(self.data) != self.new_size - self.old_size:
            raise EngineError(f"inconsistent append {self.old_size}->{self.new_size} with {len(self.data)} bytes")


@dataclasses.dataclass
class CompromiseIndicator:
    kind: IndicatorKind
    severity: Severity
    seq: Optional[int]
    log_id: Optional[int]
    description: str
    ranges: List[Tuple[int, int]] = dataclasses.field(default_factory=list)

    def to_json(self) -> bytes:
        return (json.dumps({
            "kind": self.kind.value,
            "severity": self.severity.value,
            "seq": self.seq,
            "log_id": self.log_id,
            "description": self.description,
            "ranges": [list(r) for r in self.ranges],
        }, sort_keys=True) + "\n").encode("utf-8")


@dataclasses.dataclass
class ResponsePolicy:
    mode: PolicyMode
    activated: bool = False
    activation_time: Optional[int] = None


# --- effects returned by ingest ---

@dataclasses.dataclass
class WindowOpened:
    log_id: int
    at: int


@dataclasses.dataclass
class WindowExtended:
    log_id: int
    observed_size: int


@dataclasses.dataclass
class JournalForwarded:
    journal_blocks: Tuple[int, ...]


@dataclasses.dataclass
class IndicatorRaised:
    indicator: CompromiseIndicator
    policy_action: str


@dataclasses.dataclass
class AppendCommitted:
    event: AppendEvent


class RfsEngine:
    """Reverse file system: turns the block write stream into real-log appends and indicators"""

    def __init__(self, image: BlockImage, specs: Sequence[LogSpec], mode: EngineMode,
                 coherency: Optional[CoherencyConfig] = None, policy: PolicyMode = PolicyMode.READ_ONLY,
                 store=None, catalog=None, min_free_percent: float = 1.0,
                 clock: Callable[[], int] = time.monotonic_ns):
        self.image = image
        self.specs: Dict[int, LogSpec] = {spec.log_id: spec for spec in specs}
        self.mode = mode
        self.coherency = coherency or CoherencyConfig()
        self.policy = ResponsePolicy(policy)
        self.store = store
        self.catalog = catalog
        self.min_free_percent = min_free_percent
        self.clock = clock
        self.overlay: Dict[int, bytes] = {}
        self.indicators: List[CompromiseIndicator] = []
        self.events: List[AppendEvent] = []
        self.last_write_time: Optional[int] = None
        self._exhaustion_raised = False

        fs_kind = FsKind.EXFAT if mode == EngineMode.EXFAT else FsKind.EXT4
        if any(spec.fs_kind != fs_kind for spec in specs):
            raise EngineError(f"log specs do not match engine mode {mode.value}")
        try:
            self.fs: FsInference = open_inference(fs_kind, self._read_through)
        except FsError as e:
            raise EngineError(f"cannot decode image: {e}") from e
        self.unit_size = self.fs.unit_size
        self.watched = {spec.log_id: spec.locator for spec in specs}

        self._init_structures(fs_kind)
        self._init_journal()
        self.states: Dict[int, WatchState] = {}
        for spec in specs:
            self.states[spec.log_id] = self._initial_state(spec)
        logger.info(f"🧭 Engine ready: mode={mode.value}, {len(specs)} log(s), "
                    f"lambda={self.coherency.lambda_ms}ms omega={self.coherency.omega_ms}ms, policy={policy.value}")

    # --- setup ---

    def _init_structures(self, fs_kind: FsKind):
        """Shadow copies of the immutable structures, patched from the write stream"""
        self.shadows: Dict[RegionKind, Tuple[int, bytearray]] = {}
        if fs_kind == FsKind.EXT4:
            self.shadows[RegionKind.SUPERBLOCK_REGION] = (
                SUPERBLOCK_OFFSET, bytearray(self.image.read_raw(SUPERBLOCK_OFFSET, SUPERBLOCK_SIZE)))
            self._structure_signature = self._superblock_signature()
            start, end = self.fs.volume.gdt_ranges[0][0], self.fs.volume.gdt_ranges[-1][1]
            self.shadows[RegionKind.GROUP_DESCRIPTORS] = (start, bytearray(self.image.read_raw(start, end - start)))
            groups = self._group_descriptors()
            self._gdt_layout = self._layout(groups) if groups is not None else "undecodable"
        else:
            start, end = self.fs.volume.boot_range
            self.shadows[RegionKind.BOOT_REGION] = (start, bytearray(self.image.read_raw(start, end - start)))
            self._structure_signature = self._boot_signature()

    def _init_journal(self):
        self.watcher: Optional[JournalWatcher] = None
        self._jblock_of: Dict[int, int] = {}
        self.inode_blocks: Dict[int, int] = {}
        if self.mode == EngineMode.EXFAT:
            return
        volume = self.fs.volume
        journaled = self.mode in (EngineMode.EXT4_ORDERED, EngineMode.EXT4_DATA)
        if journaled != volume.sb.has_journal:
            raise EngineError(f"mode {self.mode.value} does not match the image "
                              f"({'has' if volume.sb.has_journal else 'has no'} journal)")
        if not journaled:
            return
        bs = self.unit_size
        blocks = volume.journal_blocks
        jsb = parse_journal_superblock(self.image.read_raw(blocks[0] * bs, bs), bs, len(blocks))
        self._jblock_of = {block: index for index, block in enumerate(blocks)}
        self.watcher = JournalWatcher(jsb, lambda jblock: self.image.read_raw(blocks[jblock] * bs, bs))
        self.inode_blocks = {log_id: self.fs.inode_block(loc) for log_id, loc in self.watched.items()}
        logger.info(f"📓 Watching jbd2 journal: {len(blocks)} blocks, sequence {jsb.s_sequence}, "
                    f"checksums={'v3' if jsb.csum_v3 else 'v2' if jsb.csum_v2 else 'off'}")

    def _initial_state(self, spec: LogSpec) -> WatchState:
        committed = self.store.log_length(spec.log_id) if self.store is not None else spec.initial_size
        state = WatchState(spec.log_id, committed, committed)
        try:
            record = self.fs.read_record(spec.locator)
        except FsError as e:
            raise EngineError(f"log {spec.path}: {e}") from e
        state.record = record
        size = self.fs.size_of(record)
        state.observed_size = max(size, committed)
        try:
            state.set_ranges(self.fs.data_ranges(record, 0, committed))
        except FsError as e:
            raise EngineError(f"log {spec.path}: committed bytes unreadable: {e}") from e
        self._track_mapping(state)
        if size > committed:
            logger.warning(f"⚠️ Log {spec.path} holds {size - committed} uncommitted bytes; scheduling extraction")
            state.window = Window(self.clock())
        elif size < committed:
            self._raise(IndicatorKind.SIZE_SHRINK, None, spec.log_id,
                        f"{spec.path} is {size} bytes, {committed} committed")
        return state

    # --- reads ---

    def _read_through(self, offset: int, length: int) -> bytes:
        """Image bytes with committed journal copies laid over them"""
        data = self.image.read_range(offset, length)
        if not self.overlay:
            return data
        bs = self.unit_size
        first, last = offset // bs, (offset + length - 1) // bs
        hits = [b for b in range(first, last + 1) if b in self.overlay]
        if not hits:
            return data
        buf = bytearray(data)
        for block in hits:
            lo, hi = max(block * bs, offset), min((block + 1) * bs, offset + length)
            buf[lo - offset:hi - offset] = self.overlay[block][lo - block * bs:hi - block * bs]
        return bytes(buf)

    def serve_read(self, offset: int, length: int) -> bytes:
        """Reads never consult the real logs"""
        return self.image.read_raw(offset, length)

    def gate(self, request=None) -> bool:
        return not (self.policy.activated and self.policy.mode == PolicyMode.READ_ONLY)

    # --- ingest ---

    def ingest(self, op: WriteOp, classification: Optional[List[Classification]] = None) -> list:
        """Non-blocking: classify one applied write and update windows and indicators"""
        self.last_write_time = op.arrival_time
        effects: list = []
        if self.overlay:
            for block in range(op.offset // self.unit_size, (op.end - 1) // self.unit_size + 1):
                self.overlay.pop(block, None)

        if classification is None:
            classification = self.fs.classify(op, self.watched)
        observed = {region.log_id for region in classification if region.log_id is not None}
        for region in classification:
            kind = region.kind
            if kind in (RegionKind.SUPERBLOCK_REGION, RegionKind.BOOT_REGION):
                effects += self._check_structure(op, kind)
            elif kind == RegionKind.GROUP_DESCRIPTORS:
                effects += self._check_group_descriptors(op)
            elif kind == RegionKind.JOURNAL_REGION:
                effects += self._forward_journal(op, region)
            elif kind in (RegionKind.WATCHED_INODE, RegionKind.WATCHED_DIRENT):
                effects += self._observe_metadata(op, region)
        for state in self.states.values():
            if state.log_id not in observed and state.maps_into(op.offset, op.end):
                effects += self._reobserve(state, op.seq, op.arrival_time, (op.offset, op.end))
        effects += self._check_committed_overwrite(op)
        return effects

    def _patch(self, op: WriteOp, kind: RegionKind):
        start, shadow = self.shadows[kind]
        lo, hi = max(op.offset, start), min(op.end, start + len(shadow))
        if lo < hi:
            shadow[lo - start:hi - start] = op.slice(lo, hi)

    def _superblock_signature(self):
        return decode_superblock(bytes(self.shadows[RegionKind.SUPERBLOCK_REGION][1])).immutable_signature()

    def _boot_signature(self):
        return boot_signature(bytes(self.shadows[RegionKind.BOOT_REGION][1]))

    def _check_structure(self, op: WriteOp, kind: RegionKind) -> list:
        self._patch(op, kind)
        effects = []
        try:
            if kind == RegionKind.SUPERBLOCK_REGION:
                signature = self._superblock_signature()
            else:
                signature = self._boot_signature()
                effects += self._check_percent_in_use(op)
        except FsError as e:
            signature = f"undecodable: {e}"
        if signature != self._structure_signature:
            self._structure_signature = signature
            start, shadow = self.shadows[kind]
            effects.append(self._raise(IndicatorKind.FS_STRUCTURE_TAMPER, op.seq, None,
                                       f"{kind.value} immutable fields rewritten",
                                       [(max(op.offset, start), min(op.end, start + len(shadow)))]))
        return effects

    def _group_descriptors(self) -> Optional[List[GroupDescriptor]]:
        volume = self.fs.volume
        start, shadow = self.shadows[RegionKind.GROUP_DESCRIPTORS]
        groups = []
        for group in range(volume.sb.group_count):
            offset = volume.descriptor_offset(group) - start
            raw = bytes(shadow[offset:offset + volume.sb.desc_size])
            if len(raw) < volume.sb.desc_size or is_all_zero(raw):
                return None
            groups.append(GroupDescriptor.decode(raw, group))
        return groups

    @staticmethod
    def _layout(groups: List[GroupDescriptor]) -> tuple:
        return tuple((g.block_bitmap, g.inode_bitmap, g.inode_table) for g in groups)

    def _check_group_descriptors(self, op: WriteOp) -> list:
        self._patch(op, RegionKind.GROUP_DESCRIPTORS)
        groups = self._group_descriptors()
        start, shadow = self.shadows[RegionKind.GROUP_DESCRIPTORS]
        evidence = [(max(op.offset, start), min(op.end, start + len(shadow)))]
        layout = self._layout(groups) if groups is not None else "undecodable"
        effects = []
        if layout != self._gdt_layout:
            self._gdt_layout = layout
            effects.append(self._raise(IndicatorKind.FS_STRUCTURE_TAMPER, op.seq, None,
                                       "group descriptor bitmap/inode table locations rewritten", evidence))
        if groups is None or self._exhaustion_raised:
            return effects
        volume = self.fs.volume
        free = sum(g.free_blocks for g in groups)
        floor = volume.sb.total_blocks * self.min_free_percent / 100
        if free < floor:
            self._exhaustion_raised = True
            effects.append(self._raise(IndicatorKind.VOLUME_EXHAUSTION, op.seq, None,
                                       f"{free} free blocks below floor of {floor:.0f}", evidence))
        return effects

    def _check_percent_in_use(self, op: WriteOp) -> list:
        if self._exhaustion_raised:
            return []
        value = self.shadows[RegionKind.BOOT_REGION][1][PERCENT_IN_USE_OFFSET]
        if value != PERCENT_UNKNOWN and value > 100 - self.min_free_percent:
            self._exhaustion_raised = True
            return [self._raise(IndicatorKind.VOLUME_EXHAUSTION, op.seq, None, f"volume {value}% in use")]
        return []

    def _check_committed_overwrite(self, op: WriteOp) -> list:
        effects = []
        for state in self.states.values():
            changed: List[Tuple[int, int]] = []
            for image_start, image_end, file_offset in state.overlapping(op.offset, op.end):
                lo, hi = max(image_start, op.offset), min(image_end, op.end)
                committed = self._committed_bytes(state.log_id, file_offset + lo - image_start, hi - lo)
                written = op.slice(lo, lo + len(committed))
                changed += [(lo + a, lo + b) for a, b in differing_ranges(written, committed)]
            if changed:
                effects.append(self._raise(IndicatorKind.NON_APPEND_WRITE, op.seq, state.log_id,
                                           f"write changes committed bytes of {self.specs[state.log_id].path}",
                                           changed))
        return effects

    def _committed_bytes(self, log_id: int, offset: int, length: int) -> bytes:
        if self.store is None:
            return b""
        available = max(0, min(length, self.store.log_length(log_id) - offset))
        return self.store.read_log(log_id, offset, available) if available else b""

    def _observe_metadata(self, op: WriteOp, region: Classification) -> list:
        state = self.states[region.log_id]
        record, error = region.record, region.error
        if record is None and error is None:
            try:
                record = self.fs.read_record(self.watched[region.log_id])
            except FsError as e:
                error = e
        return self._observe(state, record, error, op.seq, op.arrival_time, (region.start, region.end))

    def _reobserve(self, state: WatchState, seq: Optional[int], at: int, evidence: Tuple[int, int]) -> list:
        try:
            record, error = self.fs.read_record(self.watched[state.log_id]), None
        except FsError as e:
            record, error = None, e
        return self._observe(state, record, error, seq, at, evidence)

    def _observe(self, state: WatchState, record, error: Optional[FsError], seq: Optional[int], at: int,
                 evidence: Tuple[int, int]) -> list:
        path = self.specs[state.log_id].path
        if error is not None:
            if isinstance(error, (UninitializedBlock, MappingGap)):
                return self._touch_window(state, at)
            return [self._raise(IndicatorKind.FS_STRUCTURE_TAMPER, seq, state.log_id,
                                f"{path} metadata undecodable: {error}", [evidence])]
        effects = []
        problem = self.fs.violation(state.record, record)
        state.record = record
        if problem:
            effects.append(self._raise(IndicatorKind.METADATA_VIOLATION, seq, state.log_id, problem, [evidence]))
        try:
            effects += self._verify_mapping(state, record, seq)
        except FsError as e:
            # a tree block or FAT entry may land after the record; re-checked when the window resolves
            logger.debug(f"🔎 Log {state.log_id}: committed mapping not readable yet ({e})")
            effects += self._touch_window(state, at)
        size = self.fs.size_of(record)
        if size < state.observed_size:
            effects.append(self._raise(IndicatorKind.SIZE_SHRINK, seq, state.log_id,
                                       f"{path} size {state.observed_size} -> {size}", [evidence]))
            state.observed_size = size
        elif size > state.committed_size and (size != state.observed_size or state.window is None):
            state.observed_size = size
            effects += self._touch_window(state, at)
        return effects

    def _verify_mapping(self, state: WatchState, record, seq: Optional[int]) -> list:
        """Committed bytes must stay where they were sealed; FsError when the mapping cannot be read"""
        current = WatchState.normalize(self.fs.data_ranges(record, 0, state.committed_size))
        if current == state.committed_ranges:
            self._track_mapping(state)
            return []
        moved = [(r[0], r[1]) for r in current if r not in state.committed_ranges]
        state.set_ranges(current)
        self._track_mapping(state)
        return [self._raise(IndicatorKind.METADATA_VIOLATION, seq, state.log_id,
                            f"{self.specs[state.log_id].path}: mapping of committed bytes changed", moved)]

    def _track_mapping(self, state: WatchState):
        try:
            state.set_map(self.fs.mapping_ranges(state.record, state.committed_size))
        except FsError as e:
            logger.debug(f"🔎 Log {state.log_id}: keeping previous mapping blocks ({e})")

    def _touch_window(self, state: WatchState, at: int) -> list:
        if state.window is None:
            state.window = Window(at)
            logger.debug(f"🪟 Window opened for log {state.log_id} at {at}")
            return [WindowOpened(state.log_id, at)]
        return [WindowExtended(state.log_id, state.observed_size)]

    # --- journal ---

    def _forward_journal(self, op: WriteOp, region: Classification) -> list:
        if self.watcher is None:
            return []
        bs = self.unit_size
        effects: list = []
        forwarded = []
        for block in range(region.start // bs, (region.end - 1) // bs + 1):
            jblock = self._jblock_of.get(block)
            if jblock is None:
                continue
            lo, hi = block * bs, (block + 1) * bs
            raw = op.slice(lo, hi) if op.offset <= lo and hi <= op.end else self.image.read_raw(lo, bs)
            forwarded.append(jblock)
            for event in self.watcher.ingest(jblock, raw):
                if event.kind == JournalEventKind.COMMITTED:
                    effects += self._apply_commit(event.txn, op)
                elif event.kind == JournalEventKind.REVOKED:
                    for revoked in event.blocks:
                        self.overlay.pop(revoked, None)
                elif event.is_indicator:
                    effects.append(self._raise(IndicatorKind.FS_STRUCTURE_TAMPER, op.seq, None,
                                               f"journal {event.kind.value}: {event.detail}", [(lo, hi)]))
        return [JournalForwarded(tuple(forwarded))] + effects

    def _apply_commit(self, txn: JournalTransaction, op: WriteOp) -> list:
        for block, data in self.watcher.committed_view(txn):
            self.overlay[block] = data
        touched = {tag.final_block for tag in txn.tags}
        bs = self.unit_size
        effects: list = []
        for log_id, block in self.inode_blocks.items():
            state = self.states[log_id]
            if block in touched:
                if self.mode != EngineMode.EXT4_DATA:
                    effects += self._reobserve(state, op.seq, op.arrival_time, (op.offset, op.end))
            elif any(state.maps_into(b * bs, (b + 1) * bs) for b in touched):
                effects += self._reobserve(state, op.seq, op.arrival_time, (op.offset, op.end))
        if self.mode == EngineMode.EXT4_DATA:
            effects += [AppendCommitted(event) for event in self.on_journal_commit(txn, op.arrival_time, op.seq)]
        return effects

    def on_journal_commit(self, txn: JournalTransaction, commit_time: int, seq: Optional[int] = None) -> List[AppendEvent]:
        """journal_data: committed growth becomes an append at once, no window wait"""
        events: List[AppendEvent] = []
        touched = {tag.final_block for tag in txn.tags}
        for log_id, block in self.inode_blocks.items():
            if block not in touched:
                continue
            state = self.states[log_id]
            try:
                record, error = self.fs.read_record(self.watched[log_id]), None
            except FsError as e:
                record, error = None, e
            self._observe(state, record, error, seq, commit_time, (block * self.unit_size, (block + 1) * self.unit_size))
            if error is not None or state.observed_size <= state.committed_size:
                continue
            try:
                data = self.fs.extract(state.record, state.committed_size, state.observed_size)
            except (ZeroData, MappingGap, UninitializedBlock) as e:
                logger.warning(f"⚠️ Log {log_id}: committed transaction {txn.sequence} not extractable yet ({e})")
                self._touch_window(state, commit_time)
                continue
            except FsError as e:
                self._raise(IndicatorKind.FS_STRUCTURE_TAMPER, seq, log_id, f"extraction failed: {e}")
                continue
            events.append(self._commit(state, state.observed_size, data, AppendBasis.JOURNAL_COMMIT, commit_time))
        return events

    # --- windows ---

    def tick(self, now: int) -> List[AppendEvent]:
        """Resolve windows whose quiescence and fixed window have both elapsed"""
        if self.last_write_time is not None and now - self.last_write_time < self.coherency.lambda_ns:
            return []
        events = []
        for state in self.states.values():
            window = state.window
            if window is not None and now - window.first_change_time >= self.coherency.tau_ns:
                event = self.extract_append(state, now)
                if event is not None:
                    events.append(event)
        return events

    @property
    def pending(self) -> bool:
        return any(state.window is not None for state in self.states.values())

    def next_deadline(self) -> Optional[int]:
        """Earliest time at which tick could resolve a window"""
        deadlines = [state.window.first_change_time + self.coherency.tau_ns
                     for state in self.states.values() if state.window is not None]
        if not deadlines:
            return None
        deadline = min(deadlines)
        if self.last_write_time is not None:
            deadline = max(deadline, self.last_write_time + self.coherency.lambda_ns)
        return deadline

    def extract_append(self, state: WatchState, now: int) -> Optional[AppendEvent]:
        """Commit [committed_size, observed_size) of one log, or DEFER and keep the window open"""
        spec = self.specs[state.log_id]
        try:
            record = self.fs.read_record(spec.locator)
        except (UninitializedBlock, MappingGap):
            return self._defer(state, now, DeferReason.UNINITIALIZED)
        except FsError as e:
            state.window = None
            self._raise(IndicatorKind.FS_STRUCTURE_TAMPER, None, state.log_id, f"{spec.path} metadata: {e}")
            return None

        self._observe(state, record, None, None, now, (0, 0))
        try:
            self._verify_mapping(state, record, None)
            if state.observed_size <= state.committed_size:
                state.window = None
                return None
            data = self.fs.extract(record, state.committed_size, state.observed_size)
        except ZeroData:
            return self._defer(state, now, DeferReason.ZERO_DATA)
        except (MappingGap, UninitializedBlock):
            return self._defer(state, now, DeferReason.MAPPING_GAP)
        except FsError as e:
            state.window = None
            self._raise(IndicatorKind.FS_STRUCTURE_TAMPER, None, state.log_id, f"{spec.path} extraction: {e}")
            return None
        return self._commit(state, state.observed_size, data, AppendBasis.QUIESCENCE_WINDOW, now)

    def _defer(self, state: WatchState, now: int, reason: DeferReason) -> Optional[AppendEvent]:
        window = state.window
        window.last_defer = reason
        if window.zero_retries < self.coherency.max_zero_retries:
            window.zero_retries += 1
            window.first_change_time = now
            logger.debug(f"⏳ Log {state.log_id}: DEFER ({reason.value}), retry {window.zero_retries}")
            return None

        path = self.specs[state.log_id].path
        if reason == DeferReason.ZERO_DATA:
            try:
                data = self.fs.extract(state.record, state.committed_size, state.observed_size, allow_zero=True)
            except FsError as e:
                state.window = None
                self._raise(IndicatorKind.METADATA_VIOLATION, None, state.log_id, f"{path}: {e}")
                return None
            self._raise(IndicatorKind.METADATA_VIOLATION, None, state.log_id,
                        f"{path}: appended bytes still zero after {window.zero_retries} retries, committed as read",
                        severity=Severity.WARNING)
            return self._commit(state, state.observed_size, data, AppendBasis.QUIESCENCE_WINDOW, now)

        state.window = None
        self._raise(IndicatorKind.METADATA_VIOLATION, None, state.log_id,
                    f"{path}: {reason.value} persisted for {window.zero_retries} retries")
        return None

    def _commit(self, state: WatchState, new_size: int, data: bytes, basis: AppendBasis, now: int) -> AppendEvent:
        event = AppendEvent(state.log_id, state.committed_size, new_size, data, basis, now)
        try:
            added = self.fs.data_ranges(state.record, state.committed_size, new_size)
        except FsError:
            added = []
        if self.store is not None:
            self.store.append(state.log_id, event.old_size, data)
        state.set_ranges(state.committed_ranges + added)
        state.committed_size = new_size
        state.window = None
        self._track_mapping(state)
        self.events.append(event)
        logger.info(f"✅ Log {state.log_id}: appended {len(data)} bytes ({event.old_size} -> {new_size}, {basis.value})")
        return event

    def drain(self, now: Optional[int] = None) -> List[AppendEvent]:
        """Shutdown: one last extraction attempt per open window, timers ignored"""
        now = self.clock() if now is None else now
        events = []
        for state in self.states.values():
            if state.window is not None:
                state.window.zero_retries = self.coherency.max_zero_retries
                event = self.extract_append(state, now)
                if event is not None:
                    events.append(event)
        return events

    def committed_sizes(self) -> Dict[int, int]:
        return {log_id: state.committed_size for log_id, state in self.states.items()}

    # --- indicators and policy ---

    def _raise(self, kind: IndicatorKind, seq: Optional[int], log_id: Optional[int], description: str,
               ranges: Optional[List[Tuple[int, int]]] = None,
               severity: Severity = Severity.COMPROMISE) -> IndicatorRaised:
        indicator = CompromiseIndicator(kind, severity, seq, log_id, description, list(ranges or []))
        self.indicators.append(indicator)
        glyph = "🚨" if severity == Severity.COMPROMISE else "⚠️"
        logger.warning(f"{glyph} {kind.value} ({severity.value}) seq={seq} log={log_id}: {description}")
        sealed = False
        if self.store is not None and not self.store.frozen:
            sealed = self.store.append_incident(indicator.to_json()) is not None
        action = self.apply_policy(indicator)
        if self.catalog is not None:
            self.catalog.record_incident(indicator, policy_action=action, sealed=sealed)
        return IndicatorRaised(indicator, action)

    def apply_policy(self, indicator: CompromiseIndicator) -> str:
        if indicator.severity != Severity.COMPROMISE or self.policy.activated:
            return "recorded"
        self.policy.activated = True
        self.policy.activation_time = self.clock()
        if self.policy.mode == PolicyMode.READ_ONLY:
            logger.warning("🔒 Policy read-only: write gate closed")
            return "write-gate-closed"
        if self.store is not None:
            self.store.freeze()
        logger.warning("🍯 Policy honeypot: real logs frozen, image keeps accepting writes")
        return "store-frozen"


class EngineRunner:
    """Live session host: consumer and timer threads, engine calls serialized by one lock"""

    def __init__(self, engine: RfsEngine, subscription: Subscription, clock: Callable[[], int] = time.monotonic_ns):
        self.engine = engine
        self.subscription = subscription
        self.clock = clock
        self.lock = threading.Lock()
        self._stop = threading.Event()
        self._threads: List[threading.Thread] = []
        self.errors: List[BaseException] = []

    def start(self):
        self._threads = [
            threading.Thread(target=self._consume, name="rfs-consumer", daemon=True),
            threading.Thread(target=self._timer, name="rfs-timer", daemon=True),
        ]
        for thread in self._threads:
            thread.start()

    def _consume(self):
        for op in self.subscription:
            with self.lock:
                try:
                    self.engine.ingest(op)
                except Exception as e:
                    logger.exception(f"❌ Engine failed on op {op.seq}: {e}")
                    self.errors.append(e)

    def _timer(self):
        period = self.engine.coherency.tick_ns / 1e9
        while not self._stop.wait(period):
            with self.lock:
                try:
                    self.engine.tick(self.clock())
                except Exception as e:
                    logger.exception(f"❌ Engine tick failed: {e}")
                    self.errors.append(e)

    def wait_idle(self, timeout: float) -> bool:
        """Wait until the queue is empty and no window is pending"""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            with self.lock:
                idle = self.subscription.depth() == 0 and not self.engine.pending
            if idle:
                return True
            time.sleep(self.engine.coherency.tick_ns / 1e9)
        return False

    def stop(self, image: BlockImage, flush: bool = True, timeout: Optional[float] = None) -> Dict[int, int]:
        if flush:
            self.wait_idle(timeout if timeout is not None else 2 * self.engine.coherency.tau_ms / 1000 + 1)
        self._stop.set()
        image.unsubscribe(self.subscription)
        for thread in self._threads:
            thread.join(timeout=5)
        with self.lock:
            if flush:
                self.engine.drain(self.clock())
            return self.engine.committed_sizes()
