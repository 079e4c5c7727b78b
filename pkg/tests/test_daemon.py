import json
import logging
import os
import signal
import subprocess
import sys
import threading
import time

import pytest

from numasched.config import DaemonConfig
from numasched.daemon import EXIT_OK, EXIT_USAGE, run_daemon
from numasched.hostsim import SimBackend, SimHost, read_scenario, render_sysfs
from numasched.hostsim.render import write_tree
from numasched.logfmt import JsonFormatter, configure_logging
from numasched.topology import build_topology

FIXTURE = os.path.join(os.path.dirname(__file__), "fixtures", "crowded_host")


def fixture_config(**kw):
    kw.setdefault("interval_ms", 50)
    kw.setdefault("dry_run", True)
    return DaemonConfig(proc_root=os.path.join(FIXTURE, "proc"),
                        sysfs_root=os.path.join(FIXTURE, "sys"), **kw)


def run_until(config, want, backend=None, timeout=10.0):
    """Run the daemon in a thread until ``want(events)`` holds, then stop it."""
    events = []
    stop = threading.Event()
    result = {}

    def on_event(name, data):
        events.append((name, data))
        if want(events):
            stop.set()

    t = threading.Thread(target=lambda: result.update(code=run_daemon(
        config, backend=backend, stop=stop, on_event=on_event)))
    t.start()
    t.join(timeout)
    stop.set()
    t.join(5)
    assert not t.is_alive()
    return result["code"], events


def has(name):
    return lambda events: any(e[0] == name for e in events)


def test_dry_run_on_fixture_makes_no_mutations():
    host, _ = read_scenario("mixed_crowded")
    backend = SimBackend(host)
    code, events = run_until(fixture_config(), has("plan"), backend)
    assert code == EXIT_OK
    names = [e[0] for e in events]
    assert "report" in names and "plan" in names
    plan = next(d for n, d in events if n == "plan")
    assert plan["dry_run"] is True
    assert {"task_moves", "page_moves"} <= set(plan)
    report = next(d for n, d in events if n == "report")
    assert sorted(report["by_speedup"]) == list(range(101, 109))
    assert backend.mutations == []


def test_live_mode_applies_through_backend():
    host, _ = read_scenario("mixed_crowded")
    backend = SimBackend(host)
    code, events = run_until(fixture_config(dry_run=False), has("apply"), backend)
    assert code == EXIT_OK
    applied = next(d for n, d in events if n == "apply")
    assert applied["ok"] is True
    assert backend.mutations


def test_single_node_host_exits_2(tmp_path):
    write_tree(render_sysfs(SimHost(build_topology([[0, 1]], [1000]), [])), str(tmp_path))
    assert run_daemon(DaemonConfig(sysfs_root=str(tmp_path), dry_run=True)) == EXIT_USAGE


def test_missing_topology_exits_2(tmp_path):
    assert run_daemon(DaemonConfig(sysfs_root=str(tmp_path))) == EXIT_USAGE


def test_pins_outside_topology_exit_2():
    from numasched.scheduler import PinRule
    cfg = fixture_config(pins=(PinRule(frozenset({999}), pid=101),))
    assert run_daemon(cfg) == EXIT_USAGE


def test_unprivileged_forces_dry_run(monkeypatch, caplog):
    monkeypatch.setattr("numasched.daemon.can_migrate", lambda: False)
    with caplog.at_level(logging.WARNING, logger="numasched"):
        code, events = run_until(fixture_config(dry_run=False), has("plan"))
    assert code == EXIT_OK
    assert "dry-run" in caplog.text
    assert all(d["dry_run"] for n, d in events if n == "plan")


def test_thread_failure_exits_1():
    class Broken:
        def current_affinity(self, pid):
            raise RuntimeError("boom")

    code, _ = run_until(fixture_config(), lambda events: False, Broken(), timeout=3.0)
    assert code == 1


def test_json_log_lines():
    import io
    stream = io.StringIO()
    handler = configure_logging("json", stream=stream)
    try:
        host, _ = read_scenario("mixed_crowded")
        run_until(fixture_config(), has("plan"), SimBackend(host))
    finally:
        logging.getLogger("numasched").removeHandler(handler)
    records = [json.loads(line) for line in stream.getvalue().splitlines()]
    assert records and all({"ts", "level", "msg"} <= set(r) for r in records)
    plans = [r for r in records if r.get("event") == "plan"]
    assert plans and "task_moves" in plans[0]


def test_json_formatter_plain_record():
    rec = logging.LogRecord("numasched", logging.INFO, __file__, 1, "hi %s", ("x",), None)
    assert json.loads(JsonFormatter().format(rec))["msg"] == "hi x"


@pytest.mark.skipif(not hasattr(signal, "SIGTERM"), reason="needs POSIX signals")
def test_sigterm_stops_cleanly():
    interval_ms = 200
    proc = subprocess.Popen(
        [sys.executable, "-m", "numasched", "daemon", "--dry-run",
         "--interval", str(interval_ms), "--log-format", "json",
         "--proc-root", os.path.join(FIXTURE, "proc"),
         "--sysfs-root", os.path.join(FIXTURE, "sys")],
        stderr=subprocess.PIPE, text=True)
    try:
        for line in proc.stderr:
            if "daemon started" in line:
                break
        time.sleep(0.3)
        sent = time.monotonic()
        proc.send_signal(signal.SIGTERM)
        proc.wait(timeout=10)
        elapsed = time.monotonic() - sent
    finally:
        if proc.poll() is None:
            proc.kill()
            proc.wait()
    assert proc.returncode == 0
    assert elapsed < interval_ms / 1000 + 0.5
