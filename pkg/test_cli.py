import json
import os

import pytest

from app.main import main
from app.routers import EXIT_FAILURE, EXIT_OK, EXIT_USAGE
from app.services.seal_store import SealStore, log_file


@pytest.fixture
def initialized(tmp_path, write_config):
    config = write_config(log_paths="/log,/audit")
    assert main(["init", "--config", config]) == EXIT_OK
    return config, str(tmp_path / "store")


def test_init_creates_image_store_and_key(tmp_path, write_config, capsys):
    config = write_config(log_paths="/log,/audit")
    assert main(["init", "--config", config]) == EXIT_OK
    out = capsys.readouterr().out
    assert os.path.exists(tmp_path / "device.img")
    assert os.path.exists(str(tmp_path / "store") + ".auditor.key")
    assert "log 1: /log" in out and "log 2: /audit" in out


def test_second_init_is_refused(initialized):
    config, _ = initialized
    assert main(["init", "--config", config]) == EXIT_FAILURE


def test_audit_passes_then_fails_after_tampering(initialized, capsys):
    config, store = initialized
    sealed = SealStore(store)
    sealed.append(1, 0, b"sealed line\n")
    sealed.close()
    capsys.readouterr()

    assert main(["audit", "--config", config, "--json"]) == EXIT_OK
    records = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert records[-1]["kind"] == "summary" and records[-1]["passed"]

    with open(log_file(store, 1), "r+b") as f:
        f.write(b"S")
    assert main(["audit", "--config", config]) == EXIT_FAILURE
    assert "FAIL" in capsys.readouterr().out


def test_audit_with_explicit_paths_needs_no_config(initialized):
    _, store = initialized
    assert main(["audit", "--store", store, "--key", store + ".auditor.key"]) == EXIT_OK


def test_diff_reports_divergence(initialized, capsys):
    config, store = initialized
    assert main(["diff", "--config", config]) == EXIT_OK
    sealed = SealStore(store)
    sealed.append(2, 0, b"only in the real log\n")
    sealed.close()
    capsys.readouterr()
    assert main(["diff", "--config", config, "--json"]) == EXIT_FAILURE
    entries = {e["path"]: e for e in map(json.loads, capsys.readouterr().out.splitlines())}
    assert entries["/audit"]["real_length"] == 21
    assert entries["/audit"]["img_length"] == 0


def test_export_then_audit_the_bundle(initialized, tmp_path):
    config, store = initialized
    bundle = str(tmp_path / "bundle")
    assert main(["export", "--config", config, "--out", bundle]) == EXIT_OK
    assert main(["audit", "--store", bundle, "--key", store + ".auditor.key"]) == EXIT_OK
    assert main(["export", "--config", config, "--out", bundle]) == EXIT_FAILURE


def test_configuration_errors_are_usage_errors(tmp_path, write_config):
    assert main(["init", "--config", write_config(bogus_key="1")]) == EXIT_USAGE
    assert main(["init", "--config", write_config("bad.env", lambda_ms="-5")]) == EXIT_USAGE
    assert main(["init", "--config", str(tmp_path / "missing.env")]) == EXIT_USAGE


def test_argument_errors_are_usage_errors(write_config):
    assert main([]) == EXIT_USAGE
    assert main(["export", "--config", write_config()]) == EXIT_USAGE
    assert main(["trace", "replay", "--trace", "x"]) == EXIT_USAGE


def test_environment_overrides_the_file(tmp_path, write_config, monkeypatch):
    monkeypatch.setenv("WORM_LOG_PATHS", "/from-env")
    assert main(["init", "--config", write_config()]) == EXIT_OK
    assert os.path.exists(log_file(str(tmp_path / "store"), 1))
