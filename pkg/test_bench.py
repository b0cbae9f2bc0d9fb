import os

import pytest

from app.main import main
from app.routers import EXIT_OK, EXIT_USAGE
from app.services.bench_service import BenchError, check_bench_args, record_payload, summarize
from app.services.device_service import auditor_key_path, cmd_audit, cmd_bench, cmd_init, cmd_serve
from app.services.seal_store import SealStore
from app.utils.settings import load_device_config

run_bench = pytest.mark.skipif(os.environ.get("WORM_RUN_BENCH") != "1",
                               reason="set WORM_RUN_BENCH=1 to run the timed workloads")


@pytest.fixture
def device(write_config):
    config = load_device_config(write_config())
    cmd_init(config)
    return config


def test_record_payload_is_stamped_and_terminated():
    record = record_payload(3, 41, 64)
    assert len(record) == 64
    assert record.startswith(b"w003 r00000041 ")
    assert record.endswith(b"\n") and record.count(b"\n") == 1


@pytest.mark.parametrize("processes,duration_s,record_size", [(0, 1.0, 16), (1, 0.0, 16), (1, 1.0, 0)])
def test_bench_arguments_are_checked(processes, duration_s, record_size):
    with pytest.raises(BenchError):
        check_bench_args(processes, duration_s, record_size)


def test_summarize_reports_percentiles():
    result = summarize([1_000_000 * n for n in range(1, 101)], processes=1, duration_s=1.0, mode="loopback",
                       record_size=16, operations=100, bytes_written=2_000_000, elapsed_s=2.0)
    assert result.latency_p50_ms == pytest.approx(50.5)
    assert result.latency_p99_ms == pytest.approx(99.01)
    assert result.bandwidth_MBps == pytest.approx(1.0)

    empty = summarize([], processes=1, duration_s=1.0, mode="loopback", record_size=16, operations=0,
                      bytes_written=0, elapsed_s=0.0)
    assert empty.latency_mean_ms == 0.0 and empty.bandwidth_MBps == 0.0


def test_bench_refuses_unknown_log(device):
    with pytest.raises(BenchError):
        cmd_bench(device, 1, 0.1, 128, log_path="/elsewhere")


def test_bench_cli_argument_errors(write_config):
    config = write_config()
    assert main(["init", "--config", config]) == EXIT_OK
    assert main(["bench", "--config", config, "--duration", "0"]) == EXIT_USAGE


def test_loopback_serve_seals_the_workload(device):
    lines = [f"entry {i}\n".encode() for i in range(40)]

    def workload(session):
        for line in lines:
            session.driver.append("/log", line)

    session = cmd_serve(device.model_copy(update={"listen": "loopback"}), workload=workload)
    assert session.committed_sizes == {1: sum(map(len, lines))}

    store = SealStore(device.seal_store_path)
    try:
        assert store.read_log(1, 0, store.log_length(1)) == b"".join(lines)
    finally:
        store.close()
    assert cmd_audit(device.seal_store_path, auditor_key_path(device)).passed


def test_short_loopback_bench(device):
    result = cmd_bench(device, processes=2, duration_s=0.3, record_size=512)
    assert result.mode == "loopback"
    assert result.operations > 0
    assert result.bytes_written == result.operations * 512

    store = SealStore(device.seal_store_path)
    try:
        sealed = store.read_log(1, 0, store.log_length(1))
    finally:
        store.close()
    assert len(sealed) == result.bytes_written
    assert all(len(line) == 512 for line in sealed.splitlines(keepends=True))
    assert cmd_audit(device.seal_store_path, auditor_key_path(device)).passed


@pytest.mark.bench
@run_bench
@pytest.mark.parametrize("processes", [1, 4, 16])
def test_bench_bandwidth(device, processes):
    result = cmd_bench(device, processes=processes, duration_s=5.0, record_size=16 * 1024)
    print(f"{processes} writer(s): {result.bandwidth_MBps:.2f} MB/s, p99 {result.latency_p99_ms:.2f} ms")
    assert result.operations > 0


@pytest.mark.bench
@run_bench
def test_bench_stops_before_the_volume_fills(device):
    result = cmd_bench(device, processes=2, duration_s=120.0, record_size=64 * 1024)
    assert result.stopped_early
    assert cmd_audit(device.seal_store_path, auditor_key_path(device)).passed
