import sys

from app.routers import EXIT_FAILURE, EXIT_OK, CommandRouter, arg, emit_lines
from app.services.bench_service import DEFAULT_RECORD_SIZE
from app.services.device_service import auditor_key_path, cmd_bench, cmd_init, cmd_serve

router = CommandRouter()


@router.command("init", help="Stage 1: format (if needed), create the empty logs, initialize the seal store")
def init_device(args, load_config):
    """Create empty logs and the seal store"""
    config = load_config()
    specs = cmd_init(config)
    if args.json:
        emit_lines(spec.to_dict() for spec in specs)
    else:
        for spec in specs:
            print(f"log {spec.log_id}: {spec.path} ({spec.fs_kind.value})")
        print(f"auditor key: {auditor_key_path(config)}")
    return EXIT_OK


@router.command("serve", help="Stage 2: export the image over NBD and run the engine until SIGINT/SIGTERM",
                arguments=[arg("--trace", dest="trace_path", help="also record the write stream to this file")])
def serve_device(args, load_config):
    """Run the export"""
    config = load_config()
    session = cmd_serve(config, trace_path=args.trace_path)
    sizes = session.committed_sizes
    if args.json:
        emit_lines({"log_id": log_id, "committed_size": size} for log_id, size in sorted(sizes.items()))
    else:
        for log_id, size in sorted(sizes.items()):
            print(f"log {log_id}: {size} bytes committed")
    if session.engine.policy.activated:
        print(f"policy {config.policy.value} activated: {len(session.engine.indicators)} indicator(s)",
              file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


@router.command("bench", help="Append-only workload against the served log",
                arguments=[
                    arg("--processes", type=int, default=16, help="concurrent writers"),
                    arg("--duration", dest="duration_s", type=float, default=60.0, help="seconds"),
                    arg("--record-size", type=int, default=DEFAULT_RECORD_SIZE, help="bytes per append"),
                    arg("--mount", dest="mount_point", help="host mount point of the export (kernel mode)"),
                    arg("--log", dest="log_path", help="log to append to (default: first LOG_PATHS entry)"),
                ])
def bench_device(args, load_config):
    """Run the append benchmark"""
    config = load_config()
    result = cmd_bench(config, args.processes, args.duration_s, args.record_size, args.mount_point, args.log_path)
    record = result.model_dump()
    record["bandwidth_MBps"] = result.bandwidth_MBps
    if args.json:
        emit_lines([record])
    else:
        print(f"{result.mode}: {result.processes} writer(s), {result.operations} appends, "
              f"{result.bandwidth_MBps:.2f} MB/s, latency mean {result.latency_mean_ms:.2f} ms "
              f"p50 {result.latency_p50_ms:.2f} p95 {result.latency_p95_ms:.2f} p99 {result.latency_p99_ms:.2f}"
              f"{' (stopped early: volume nearly full)' if result.stopped_early else ''}")
    return EXIT_OK
