import json

from app.routers import EXIT_FAILURE, EXIT_OK, CommandRouter, arg, emit_lines
from app.services.device_service import cmd_trace_record, cmd_trace_replay
from app.services.rfs_engine import Severity

router = CommandRouter(prefix="trace", help="Record or replay the block write stream")


@router.command("record", help="Serve with a trace recorder attached",
                arguments=[
                    arg("--out", required=True, help="trace file to write"),
                    arg("--base-copy", help="save the pre-session image here (the replay base)"),
                ])
def record_trace(args, load_config):
    session = cmd_trace_record(load_config(), args.out, base_copy=args.base_copy)
    print(f"{session.recorder.writer.count} write(s) recorded to {args.out}")
    return EXIT_OK


@router.command("replay", help="Replay a trace onto a copy of its base image into a fresh store",
                arguments=[
                    arg("--trace", required=True, help="trace file"),
                    arg("--base", required=True, help="base image the trace was recorded on"),
                    arg("--speed", type=float, default=0.0, help="real-time pacing factor (0 = as fast as possible)"),
                    arg("--scale", type=float, default=1.0, help="divide recorded gaps and lambda/omega by this"),
                ])
def replay_trace(args, load_config):
    """Replay into IMAGE_PATH / SEAL_STORE_PATH"""
    outcome = cmd_trace_replay(load_config(), args.trace, args.base, speed=args.speed, time_scale=args.scale)
    result = outcome.result
    if args.json:
        emit_lines([{"event": "append", "log_id": e.log_id, "old_size": e.old_size, "new_size": e.new_size,
                     "basis": e.basis.value, "time_ns": e.commit_time} for e in result.events] +
                   [dict(json.loads(indicator.to_json()), event="indicator") for indicator in result.indicators])
    else:
        print(f"{result.applied} applied, {result.rejected} rejected, {len(result.events)} append(s)")
        for log_id, size in sorted(result.committed_sizes.items()):
            print(f"log {log_id}: {size} bytes committed")
        for indicator in result.indicators:
            print(f"{indicator.kind.value} ({indicator.severity.value}): {indicator.description}")
    if any(indicator.severity == Severity.COMPROMISE for indicator in result.indicators):
        return EXIT_FAILURE
    return EXIT_OK
