"""The daemon: monitor, reporter and scheduler threads joined by bounded queues.

    monitor --batches--> reporter --reports--> scheduler --> backend

Each queue keeps only the newest few items, so a slow scheduler sees fresh
reports instead of a backlog. Shutdown goes through one shared stop event;
every thread waits on it or on a short queue timeout.
"""

from __future__ import annotations

import logging
import signal
import threading
from typing import Callable, Optional

from .backend import LinuxBackend, can_migrate
from .channel import DropOldestQueue, QueueClosed
from .config import DaemonConfig
from .errors import NumaSchedError, TopologyError
from .procmon import SystemClock, monitor_loop
from .reporter import Reporter, ScheduleReport
from .scheduler import apply_plan, schedule_once
from .topology import discover_topology

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

QUEUE_CAPACITY = 4


def report_record(report: ScheduleReport) -> dict:
    return {
        "taken_at": report.taken_at,
        "trigger": report.trigger.value,
        "pressures": {str(n): round(p, 6) for n, p in report.pressures.per_node.items()},
        "by_speedup": list(report.by_speedup),
        "by_contention": list(report.by_contention),
        "tasks": [
            {"pid": m.pid, "comm": m.comm, "cpu_share": round(m.cpu_share, 6),
             "speedup": round(m.speedup_factor, 6),
             "contention": round(m.contention_factor, 6), "home_node": m.home_node}
            for m in report.metrics],
    }


class _Pipeline:
    def __init__(self, config: DaemonConfig, topology, backend, stop: threading.Event,
                 on_event: Optional[Callable[[str, dict], None]], clock=None):
        self.config = config
        self.topology = topology
        self.backend = backend
        self.stop = stop
        self.on_event = on_event
        self.clock = clock or SystemClock()
        self.batches = DropOldestQueue(QUEUE_CAPACITY)
        self.reports = DropOldestQueue(QUEUE_CAPACITY)
        self.failure: Optional[BaseException] = None
        self.sched_config = config.scheduler_config()

    def emit(self, event: str, data: dict) -> None:
        log.info(event, extra={"event": event, "data": data})
        if self.on_event is not None:
            self.on_event(event, data)

    def _guard(self, name, fn):
        def run():
            try:
                fn()
            except BaseException as exc:  # noqa: BLE001 - any thread failure stops the daemon
                log.exception("%s thread failed", name)
                if self.failure is None:
                    self.failure = exc
                self.stop.set()
            finally:
                # downstream consumers drain what is left and exit
                if name == "monitor":
                    self.batches.close()
                elif name == "reporter":
                    self.reports.close()
        return threading.Thread(target=run, name=f"numasched-{name}", daemon=True)

    def _next(self, queue):
        while not self.stop.is_set():
            try:
                item = queue.get(timeout=0.05)
            except QueueClosed:
                return None
            if item is not None:
                return item
        return None

    def monitor(self):
        monitor_loop(self.config.interval, self.config.proc_root, self.clock, self.batches,
                     self.stop, self.config.pid_filter())

    def reporter(self):
        reporter = Reporter(self.topology, self.config.importance_table(),
                            self.config.thresholds, self.config.ticks_per_second)
        while True:
            batch = self._next(self.batches)
            if batch is None:
                return
            report = reporter.process(batch)
            if report is None:
                continue
            self.emit("report", report_record(report))
            try:
                self.reports.put(report)
            except QueueClosed:
                return

    def scheduler(self):
        while True:
            report = self._next(self.reports)
            if report is None:
                return
            plan = schedule_once(report, self.sched_config, self.backend, self.topology)
            self.emit("plan", {"taken_at": report.taken_at, "dry_run": self.config.dry_run,
                               **plan.summary()})
            if plan.empty:
                continue
            result = apply_plan(plan, self.backend, dry_run=self.config.dry_run)
            self.emit("apply", {"taken_at": report.taken_at, "ok": result.ok,
                                "results": result.to_list()})

    def threads(self):
        return [self._guard("monitor", self.monitor),
                self._guard("reporter", self.reporter),
                self._guard("scheduler", self.scheduler)]


def _install_signals(stop: threading.Event):
    if threading.current_thread() is not threading.main_thread():
        return None
    previous = {}

    def handler(signum, frame):
        log.info("received signal %d, stopping", signum)
        stop.set()

    for sig in (signal.SIGTERM, signal.SIGINT):
        previous[sig] = signal.signal(sig, handler)
    return previous


def run_daemon(config: DaemonConfig, backend=None, stop: Optional[threading.Event] = None,
               on_event: Optional[Callable[[str, dict], None]] = None, clock=None) -> int:
    """Run until ``stop`` is set or a termination signal arrives.

    Returns 0 on a clean stop, 1 when a pipeline thread failed and 2 when the
    host has no usable NUMA topology or the pin table does not fit it.
    """
    try:
        topology = discover_topology(config.sysfs_root)
    except (TopologyError, OSError) as exc:
        log.error("no NUMA topology: %s", exc)
        return EXIT_USAGE
    if len(topology.nodes) < 2:
        log.error("no NUMA topology: only %d node found", len(topology.nodes))
        return EXIT_USAGE
    try:
        config.pin_table().validate(topology)
    except NumaSchedError as exc:
        log.error("pin table does not fit the topology: %s", exc)
        return EXIT_USAGE

    if backend is None:
        backend = LinuxBackend(config.proc_root)
        if not config.dry_run and not can_migrate():
            log.warning("insufficient privilege to migrate tasks; running in dry-run mode")
            config = config.with_overrides(dry_run=True)

    stop = stop or threading.Event()
    pipeline = _Pipeline(config, topology, backend, stop, on_event, clock)
    previous = _install_signals(stop)
    log.info("daemon started: %d nodes, %d cores, interval %d ms%s", len(topology.nodes),
             len(topology.all_cores), config.interval_ms, ", dry run" if config.dry_run else "")
    threads = pipeline.threads()
    try:
        for t in threads:
            t.start()
        while not stop.is_set():
            stop.wait(0.1)
    finally:
        stop.set()
        pipeline.batches.close()
        pipeline.reports.close()
        for t in threads:
            t.join(timeout=max(1.0, config.interval * 2))
        if previous:
            for sig, h in previous.items():
                signal.signal(sig, h)
    if pipeline.failure is not None:
        return EXIT_FAILURE
    log.info("daemon stopped")
    return EXIT_OK
