import os
from typing import List, Sequence

import pytest

from app.models.database import Catalog
from app.models.schemas import CoherencyConfig, EngineMode, FsKind, JournalMode, PolicyMode
from app.services.blockstore import create_image, open_image
from app.services.formatter import format_exfat, format_ext4
from app.services.host_driver import HostDriver, ImageDevice
from app.services.log_writer import create_empty_logs
from app.services.rfs_engine import AppendCommitted, AppendEvent, IndicatorRaised, RfsEngine
from app.services.seal_store import SealStore

SEED = bytes(range(32))
CAPACITY = 16 * 1024 * 1024
COHERENCY = CoherencyConfig(lambda_ms=10, omega_ms=100)

ENGINE_MODES = {
    (FsKind.EXT4, JournalMode.NONE): EngineMode.EXT4_NOJOURNAL,
    (FsKind.EXT4, JournalMode.ORDERED): EngineMode.EXT4_ORDERED,
    (FsKind.EXT4, JournalMode.DATA): EngineMode.EXT4_DATA,
    (FsKind.EXFAT, JournalMode.NONE): EngineMode.EXFAT,
}


class FakeClock:
    """Monotonic nanoseconds under test control"""

    def __init__(self, start: int = 1_000_000_000):
        self.now = start

    def __call__(self) -> int:
        return self.now

    def advance(self, ns: int) -> int:
        self.now += ns
        return self.now


def build_image(path: str, fs_kind: FsKind, journal_mode: JournalMode = JournalMode.NONE,
                paths: Sequence[str] = ("/log",), capacity: int = CAPACITY, block_size: int = 4096,
                journal_csum: bool = False):
    """Formatted image holding the empty logs; returns their specs"""
    create_image(path, capacity)
    with open_image(path) as image:
        if fs_kind == FsKind.EXT4:
            format_ext4(image.write, image.capacity_bytes, block_size, journal_mode, journal_blocks=1024,
                        journal_csum=journal_csum)
        else:
            format_exfat(image.write, image.capacity_bytes, block_size)
        return create_empty_logs(image, fs_kind, paths)


class Rig:
    """Image, seal store, catalog, engine and host driver wired together on a fake clock"""

    def __init__(self, root: str, fs_kind: FsKind = FsKind.EXT4, journal_mode: JournalMode = JournalMode.NONE,
                 paths: Sequence[str] = ("/log",), policy: PolicyMode = PolicyMode.READ_ONLY,
                 zero_injection: bool = False, journal_csum: bool = False, min_free_percent: float = 1.0,
                 coherency: CoherencyConfig = COHERENCY):
        self.root = root
        self.image_path = os.path.join(root, "device.img")
        self.store_path = os.path.join(root, "store")
        self.key_path = os.path.join(root, "auditor.key")
        self.specs = build_image(self.image_path, fs_kind, journal_mode, paths, journal_csum=journal_csum)

        self.clock = FakeClock()
        self.image = open_image(self.image_path, zero_injection=zero_injection, clock=self.clock)
        self.store = SealStore.init(self.store_path, [spec.log_id for spec in self.specs], self.key_path, seed=SEED)
        self.catalog = Catalog(self.store_path)
        self.catalog.save_log_specs([spec.to_dict() for spec in self.specs])
        self.coherency = coherency
        self.engine = RfsEngine(self.image, self.specs, ENGINE_MODES[(fs_kind, journal_mode)],
                                coherency=coherency, policy=policy, store=self.store, catalog=self.catalog,
                                min_free_percent=min_free_percent, clock=self.clock)
        self.subscription = self.image.subscribe("engine")
        self.host = HostDriver(ImageDevice(self.image), fs_kind)
        self.effects: List[object] = []

    def pump(self) -> list:
        """Ingest every write applied since the last pump"""
        effects = []
        for op in self.subscription.drain():
            effects += self.engine.ingest(op)
        self.effects += effects
        return effects

    def settle(self, rounds: int = 0) -> List[AppendEvent]:
        """Advance the clock past tau until no window is pending"""
        self.pump()
        rounds = rounds or self.coherency.max_zero_retries + 3
        events = []
        for _ in range(rounds):
            if not self.engine.pending:
                break
            now = self.clock.advance(self.coherency.tau_ns + self.coherency.lambda_ns)
            events += self.engine.tick(now)
        self.effects += [AppendCommitted(event) for event in events]
        return events

    def append(self, path: str, data: bytes) -> list:
        self.clock.advance(1_000_000)
        self.host.append(path, data)
        return self.pump()

    @property
    def indicators(self):
        return self.engine.indicators

    def kinds(self) -> List[str]:
        return [indicator.kind.value for indicator in self.engine.indicators]

    def real_log(self, log_id: int = 1) -> bytes:
        return self.store.read_log(log_id, 0, self.store.log_length(log_id))

    def close(self):
        self.image.unsubscribe(self.subscription)
        self.store.close()
        self.catalog.close()
        self.image.close()


def committed_events(effects) -> List[AppendEvent]:
    return [effect.event for effect in effects if isinstance(effect, AppendCommitted)]


def raised(effects) -> list:
    return [effect.indicator for effect in effects if isinstance(effect, IndicatorRaised)]


@pytest.fixture
def make_rig(tmp_path):
    rigs = []

    def factory(**kwargs) -> Rig:
        root = tmp_path / f"rig{len(rigs)}"
        root.mkdir()
        rig = Rig(str(root), **kwargs)
        rigs.append(rig)
        return rig

    yield factory
    for rig in rigs:
        rig.close()


@pytest.fixture
def write_config(tmp_path):
    """Flat KEY=VALUE device file under tmp_path"""

    def factory(name: str = "device.env", **values) -> str:
        settings = {
            "IMAGE_PATH": str(tmp_path / "device.img"),
            "IMAGE_SIZE_BYTES": str(CAPACITY),
            "SEAL_STORE_PATH": str(tmp_path / "store"),
            "FORMATTER": "builtin",
            "TEST_SEED": SEED.hex(),
            "LOG_PATHS": "/log",
        }
        settings.update({key.upper(): str(value) for key, value in values.items()})
        path = tmp_path / name
        path.write_text("".join(f"{key}={value}\n" for key, value in settings.items()))
        return str(path)

    return factory
