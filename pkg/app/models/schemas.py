from enum import Enum
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class FsKind(str, Enum):
    EXT4 = "ext4"
    EXFAT = "exfat"


class JournalMode(str, Enum):
    NONE = "none"
    ORDERED = "ordered"
    DATA = "data"


class PolicyMode(str, Enum):
    READ_ONLY = "read-only"
    HONEYPOT = "honeypot"


class EngineMode(str, Enum):
    EXT4_NOJOURNAL = "ext4-nojournal"
    EXT4_ORDERED = "ext4-ordered"
    EXT4_DATA = "ext4-data"
    EXFAT = "exfat"


class CoherencyConfig(BaseModel):
    """Quiescence (lambda) and fixed (omega) windows; tau = lambda + omega"""
    lambda_ms: float = 10.0
    omega_ms: float = 1000.0
    max_zero_retries: int = 10
    tick_ms: Optional[float] = None

    @field_validator("lambda_ms")
    @classmethod
    def lambda_positive(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("lambda_ms must be > 0")
        return value

    @field_validator("omega_ms")
    @classmethod
    def omega_not_negative(cls, value: float) -> float:
        if value < 0:
            raise ValueError("omega_ms must be >= 0")
        return value

    @field_validator("max_zero_retries")
    @classmethod
    def retries_not_negative(cls, value: int) -> int:
        if value < 0:
            raise ValueError("max_zero_retries must be >= 0")
        return value

    @property
    def tau_ms(self) -> float:
        return self.lambda_ms + self.omega_ms

    @property
    def lambda_ns(self) -> int:
        return int(self.lambda_ms * 1_000_000)

    @property
    def tau_ns(self) -> int:
        return int(self.tau_ms * 1_000_000)

    @property
    def tick_ns(self) -> int:
        tick = self.tick_ms if self.tick_ms is not None else self.lambda_ms / 2
        return max(1, int(tick * 1_000_000))

    def scaled(self, factor: float) -> "CoherencyConfig":
        """Same windows with every duration divided by factor"""
        return CoherencyConfig(
            lambda_ms=self.lambda_ms / factor,
            omega_ms=self.omega_ms / factor,
            max_zero_retries=self.max_zero_retries,
            tick_ms=None if self.tick_ms is None else self.tick_ms / factor,
        )


class ExportConfig(BaseModel):
    export_name: str = "worm"
    size_bytes: int
    read_only: bool = False
    listen: str = "unix:/tmp/worm.sock"


class DeviceConfig(BaseModel):
    """Flat device configuration; unknown keys are rejected"""
    model_config = ConfigDict(extra="forbid")

    image_path: str
    image_size_bytes: Optional[int] = None
    fs_kind: FsKind = FsKind.EXT4
    journal_mode: JournalMode = JournalMode.NONE
    block_size: int = 4096
    journal_blocks: int = 1024
    journal_csum: bool = False
    log_paths: List[str] = Field(default_factory=lambda: ["/log"])
    lambda_ms: float = 10.0
    omega_ms: float = 1000.0
    tick_ms: Optional[float] = None
    max_zero_retries: int = 10
    policy: PolicyMode = PolicyMode.READ_ONLY
    min_free_percent: float = 1.0
    seal_store_path: str
    auditor_key_path: Optional[str] = None
    listen: str = "unix:/tmp/worm.sock"
    export_name: str = "worm"
    read_only: bool = False
    formatter: str = "system"
    zero_injection: bool = False
    queue_high_water: int = 10000
    test_seed: Optional[str] = None
    log_level: str = "INFO"
    log_json: bool = False

    @field_validator("log_paths", mode="before")
    @classmethod
    def split_log_paths(cls, value):
        if isinstance(value, str):
            value = [part.strip() for part in value.split(",") if part.strip()]
        return value

    @field_validator("log_paths")
    @classmethod
    def root_level_only(cls, paths: List[str]) -> List[str]:
        if not paths:
            raise ValueError("at least one log path is required")
        for path in paths:
            name = path[1:]
            if not path.startswith("/") or not name or "/" in name:
                raise ValueError(f"log path {path!r} must be a root-level absolute path")
        if len(set(paths)) != len(paths):
            raise ValueError("duplicate log paths")
        return paths

    @field_validator("block_size")
    @classmethod
    def supported_block_size(cls, value: int) -> int:
        if value not in (512, 1024, 2048, 4096, 8192, 16384, 32768, 65536):
            raise ValueError(f"unsupported block size {value}")
        return value

    @field_validator("formatter")
    @classmethod
    def known_formatter(cls, value: str) -> str:
        if value not in ("system", "builtin"):
            raise ValueError("formatter must be 'system' or 'builtin'")
        return value

    @field_validator("test_seed")
    @classmethod
    def hex_seed(cls, value: Optional[str]) -> Optional[str]:
        if value is not None:
            bytes.fromhex(value)
        return value

    @field_validator("listen")
    @classmethod
    def known_endpoint(cls, value: str) -> str:
        from app.utils.helpers import validate_endpoint

        if not validate_endpoint(value):
            raise ValueError(f"invalid listen endpoint {value!r}")
        return value

    @model_validator(mode="after")
    def journal_only_for_ext4(self) -> "DeviceConfig":
        if self.fs_kind == FsKind.EXFAT and self.journal_mode != JournalMode.NONE:
            raise ValueError("journal_mode must be 'none' for exfat")
        if self.lambda_ms <= 0 or self.omega_ms < 0:
            raise ValueError("lambda_ms must be > 0 and omega_ms >= 0")
        return self

    @property
    def engine_mode(self) -> EngineMode:
        if self.fs_kind == FsKind.EXFAT:
            return EngineMode.EXFAT
        return {
            JournalMode.NONE: EngineMode.EXT4_NOJOURNAL,
            JournalMode.ORDERED: EngineMode.EXT4_ORDERED,
            JournalMode.DATA: EngineMode.EXT4_DATA,
        }[self.journal_mode]

    @property
    def seed_bytes(self) -> Optional[bytes]:
        return bytes.fromhex(self.test_seed) if self.test_seed else None

    def coherency(self) -> CoherencyConfig:
        return CoherencyConfig(
            lambda_ms=self.lambda_ms,
            omega_ms=self.omega_ms,
            max_zero_retries=self.max_zero_retries,
            tick_ms=self.tick_ms,
        )

    def export_config(self, size_bytes: int) -> ExportConfig:
        return ExportConfig(
            export_name=self.export_name,
            size_bytes=size_bytes,
            read_only=self.read_only,
            listen=self.listen,
        )


class LogStatus(BaseModel):
    log_id: int
    verified_bytes: int = 0
    record_count: int = 0
    actual_length: int = 0
    passed: bool = True


class VerifyFailure(BaseModel):
    record_index: int
    reason: str


class VerifyReport(BaseModel):
    logs: Dict[int, LogStatus] = Field(default_factory=dict)
    record_count: int = 0
    frozen: bool = False
    first_failure: Optional[VerifyFailure] = None

    @property
    def passed(self) -> bool:
        return self.first_failure is None and all(status.passed for status in self.logs.values())

    def fail(self, record_index: int, reason: str, log_id: Optional[int] = None):
        if self.first_failure is None:
            self.first_failure = VerifyFailure(record_index=record_index, reason=reason)
        if log_id is not None and log_id in self.logs:
            self.logs[log_id].passed = False


class LogDiff(BaseModel):
    log_id: int
    path: str
    real_length: int
    img_length: int
    ranges: List[Tuple[int, int]] = Field(default_factory=list)
    note: Optional[str] = None

    @property
    def length_delta(self) -> int:
        return self.img_length - self.real_length

    @property
    def empty(self) -> bool:
        return not self.ranges and self.length_delta == 0 and self.note is None


class DiffReport(BaseModel):
    logs: List[LogDiff] = Field(default_factory=list)

    @property
    def empty(self) -> bool:
        return all(entry.empty for entry in self.logs)


class BenchResult(BaseModel):
    processes: int
    duration_s: float
    mode: str
    record_size: int
    operations: int
    bytes_written: int
    elapsed_s: float
    latency_mean_ms: float
    latency_p50_ms: float
    latency_p95_ms: float
    latency_p99_ms: float
    stopped_early: bool = False

    @property
    def bandwidth_MBps(self) -> float:
        if self.elapsed_s <= 0:
            return 0.0
        return self.bytes_written / self.elapsed_s / 1_000_000
