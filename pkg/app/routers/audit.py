from app.routers import EXIT_FAILURE, EXIT_OK, CommandRouter, arg, emit_lines
from app.services.device_service import auditor_key_path, cmd_audit, cmd_diff, cmd_export
from app.services.seal_store import FROZEN_LOG_ID, INCIDENT_LOG_ID

router = CommandRouter()

STORE_ARG = arg("--store", help="seal store or exported bundle (default: SEAL_STORE_PATH)")


def log_label(log_id: int) -> str:
    if log_id == INCIDENT_LOG_ID:
        return "incidents"
    if log_id == FROZEN_LOG_ID:
        return "frozen-marker"
    return f"log {log_id}"


@router.command("audit", help="Stage 3: verify real logs against SEAL_log with the auditor key",
                arguments=[STORE_ARG, arg("--key", help="auditor key file (default: AUDITOR_KEY_PATH)")])
def audit_store(args, load_config):
    """Verify a store; exit 1 on any failure"""
    store, key = args.store, args.key
    if store is None or key is None:
        config = load_config()
        store = store or config.seal_store_path
        key = key or auditor_key_path(config)
    report = cmd_audit(store, key)

    if args.json:
        records = [dict(status.model_dump(), kind="log") for status in report.logs.values()]
        records.append({
            "kind": "summary",
            "passed": report.passed,
            "record_count": report.record_count,
            "frozen": report.frozen,
            "first_failure": report.first_failure.model_dump() if report.first_failure else None,
        })
        emit_lines(records)
    else:
        for log_id, status in sorted(report.logs.items()):
            verdict = "PASS" if status.passed else "FAIL"
            print(f"{log_label(log_id)}: {verdict} ({status.verified_bytes}/{status.actual_length} bytes, "
                  f"{status.record_count} records)")
        if report.frozen:
            print("store frozen by honeypot policy")
        if report.first_failure is not None:
            print(f"first failure at record {report.first_failure.record_index}: {report.first_failure.reason}")
        print("PASS" if report.passed else "FAIL")
    return EXIT_OK if report.passed else EXIT_FAILURE


@router.command("diff", help="Honeypot forensics: compare img logs with the sealed real logs",
                arguments=[STORE_ARG, arg("--image", help="final image (default: IMAGE_PATH)")])
def diff_store(args, load_config):
    """Report where img logs depart from real logs"""
    store, image = args.store, args.image
    if store is None or image is None:
        config = load_config()
        store = store or config.seal_store_path
        image = image or config.image_path
    report = cmd_diff(store, image)

    if args.json:
        emit_lines(dict(entry.model_dump(), length_delta=entry.length_delta) for entry in report.logs)
    else:
        for entry in report.logs:
            if entry.empty:
                print(f"{entry.path}: identical ({entry.real_length} bytes)")
                continue
            print(f"{entry.path}: real {entry.real_length} bytes, img {entry.img_length} bytes")
            for start, end in entry.ranges:
                print(f"  differs at [{start}, {end})")
            if entry.note:
                print(f"  {entry.note}")
    return EXIT_OK if report.empty else EXIT_FAILURE


@router.command("export", help="Write a read-only audit bundle (no key material)",
                arguments=[STORE_ARG, arg("--out", required=True, help="destination directory")])
def export_store(args, load_config):
    """Export the audit bundle"""
    store = args.store or load_config().seal_store_path
    destination = cmd_export(store, args.out)
    print(destination)
    return EXIT_OK
