"""Runtime monitor: per-task CPU counters and NUMA page placement from procfs.

The monitor is a plain loop that wakes every interval, scans
``<proc_root>/<pid>/{stat,numa_maps}`` for the selected tasks and pushes one
immutable batch of :class:`TaskSnapshot` values to a sink.
"""

from __future__ import annotations

import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Callable, Iterable, Mapping, Optional, Sequence

from .channel import QueueClosed
from .errors import ParseError

log = logging.getLogger(__name__)

# Minimum number of stat fields we need (field 39 is the last CPU).
_STAT_MIN_FIELDS = 39
PF_KTHREAD = 0x00200000

_NODE_TOKEN_RE = re.compile(r"^N([^=]*)=(.*)$")


@dataclass(frozen=True)
class TaskStat:
    pid: int
    comm: str
    state: str
    utime_ticks: int
    stime_ticks: int
    last_cpu: int
    flags: int = 0

    @property
    def cpu_ticks(self) -> int:
        return self.utime_ticks + self.stime_ticks


@dataclass(frozen=True)
class NumaMapsSummary:
    per_node_pages: Mapping[int, int] = field(default_factory=dict)
    total_pages: int = 0

    def __post_init__(self):
        object.__setattr__(self, "per_node_pages",
                           MappingProxyType(dict(sorted(self.per_node_pages.items()))))

    def __eq__(self, other):
        if not isinstance(other, NumaMapsSummary):
            return NotImplemented
        return (dict(self.per_node_pages) == dict(other.per_node_pages)
                and self.total_pages == other.total_pages)

    def __hash__(self):
        return hash((tuple(self.per_node_pages.items()), self.total_pages))


@dataclass(frozen=True)
class TaskSnapshot:
    stat: TaskStat
    numa: NumaMapsSummary
    taken_at: float

    @property
    def pid(self) -> int:
        return self.stat.pid


@dataclass(frozen=True)
class PidFilter:
    """Which processes the monitor watches.

    A pid is wanted when it is listed or its command name matches one of the
    patterns (regular expressions, searched). With neither, every user
    process is a candidate.
    """

    pids: tuple = ()
    patterns: tuple = ()

    def wants(self, pid: int, comm: Optional[str]) -> bool:
        if not self.pids and not self.patterns:
            return True
        if pid in self.pids:
            return True
        return comm is not None and any(re.search(p, comm) for p in self.patterns)


def parse_proc_stat(text: str) -> TaskStat:
    """Parse one ``/proc/<pid>/stat`` line.

    The command name sits between the first ``(`` and the last ``)`` since it
    may itself contain spaces and parentheses.
    """
    text = text.strip()
    open_at = text.find("(")
    close_at = text.rfind(")")
    if open_at < 0 or close_at < open_at:
        raise ParseError(f"stat line without parenthesized comm: {text[:60]!r}")
    try:
        pid = int(text[:open_at].strip())
    except ValueError:
        raise ParseError(f"bad pid in stat line: {text[:open_at]!r}") from None
    comm = text[open_at + 1:close_at]
    rest = text[close_at + 1:].split()
    # rest[0] is field 3 (state)
    if len(rest) + 2 < _STAT_MIN_FIELDS:
        raise ParseError(
            f"stat line for pid {pid} has {len(rest) + 2} fields, need {_STAT_MIN_FIELDS}")

    def fld(n: int) -> int:
        try:
            return int(rest[n - 3])
        except ValueError:
            raise ParseError(f"stat field {n} of pid {pid} is not an integer: "
                             f"{rest[n - 3]!r}") from None

    return TaskStat(
        pid=pid,
        comm=comm,
        state=rest[0],
        utime_ticks=fld(14),
        stime_ticks=fld(15),
        last_cpu=fld(39),
        flags=fld(9),
    )


def parse_numa_maps(text: str) -> NumaMapsSummary:
    """Sum the ``N<node>=<pages>`` tokens of a numa_maps file per node."""
    per_node: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        tokens = line.split()
        # tokens[0] is the address, tokens[1] the policy
        for token in tokens[2:]:
            m = _NODE_TOKEN_RE.match(token)
            if not m:
                continue
            node, pages = m.groups()
            if not (node.isdigit() and pages.isdigit()):
                raise ParseError(f"numa_maps line {lineno}: bad node token {token!r}: {line!r}")
            per_node[int(node)] = per_node.get(int(node), 0) + int(pages)
    return NumaMapsSummary(per_node, sum(per_node.values()))


def _read(path: str) -> str:
    with open(path) as f:
        return f.read()


def list_candidate_pids(fs_root: str = "/proc", pid_filter: Optional[PidFilter] = None) -> set:
    """Numeric entries of the proc root selected by ``pid_filter``.

    pid 0, the monitor's own pid and kernel threads are never candidates.
    An unreadable proc root raises ``OSError``.
    """
    pid_filter = pid_filter or PidFilter()
    entries = os.listdir(fs_root)
    me = os.getpid()
    out = set()
    for name in entries:
        if not name.isdigit():
            continue
        pid = int(name)
        if pid == 0 or pid == me:
            continue
        try:
            stat = parse_proc_stat(_read(os.path.join(fs_root, name, "stat")))
        except (OSError, ParseError):
            stat = None
        if stat is not None and stat.flags & PF_KTHREAD:
            continue
        if pid_filter.wants(pid, stat.comm if stat else None):
            out.add(pid)
    return out


class SystemClock:
    def now(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float, stop: threading.Event) -> None:
        stop.wait(seconds)


class ManualClock:
    """Deterministic clock for tests and the simulator.

    ``sleep`` advances time instantly. When a ``budget`` is given, sleeping
    past it raises the stop signal instead of advancing further.
    """

    def __init__(self, start: float = 0.0, budget: Optional[float] = None):
        self.t = start
        self.budget = budget

    def now(self) -> float:
        return self.t

    def advance(self, seconds: float) -> None:
        self.t += seconds

    def sleep(self, seconds: float, stop: threading.Event) -> None:
        if stop.is_set():
            return
        if self.budget is not None and self.t + seconds > self.budget + 1e-9:
            stop.set()
            return
        self.t += seconds


def _clock_now(clock) -> float:
    return clock.now() if hasattr(clock, "now") else clock()


def collect_snapshot(pids: Iterable[int], fs_root: str = "/proc", clock=None) -> tuple:
    """Read stat and numa_maps for each pid; vanished pids are skipped.

    Every snapshot in the returned batch carries the same timestamp. A missing
    proc root is treated as a systemic failure and raises.
    """
    if not os.path.isdir(fs_root):
        raise FileNotFoundError(f"proc root {fs_root} is not a directory")
    clock = clock or SystemClock()
    taken_at = _clock_now(clock)
    batch = []
    for pid in sorted(set(pids)):
        pid_dir = os.path.join(fs_root, str(pid))
        try:
            stat = parse_proc_stat(_read(os.path.join(pid_dir, "stat")))
            numa = parse_numa_maps(_read(os.path.join(pid_dir, "numa_maps")))
        except (FileNotFoundError, ProcessLookupError):
            log.debug("pid %d exited during collection", pid)
            continue
        except PermissionError:
            log.debug("pid %d not readable, skipped", pid)
            continue
        except ParseError as exc:
            # a recycled pid can leave a half-written file behind
            log.warning("pid %d: %s", pid, exc)
            continue
        batch.append(TaskSnapshot(stat, numa, taken_at))
    return tuple(batch)


def monitor_loop(interval: float, fs_root: str, clock, sink, stop: threading.Event,
                 pid_filter: Optional[PidFilter] = None,
                 on_batch: Optional[Callable[[Sequence[TaskSnapshot]], None]] = None) -> int:
    """Sleep, scan and publish until ``stop`` is set or the sink closes.

    Returns the number of batches delivered.
    """
    if interval <= 0:
        raise ValueError("interval must be positive")
    delivered = 0
    while not stop.is_set():
        clock.sleep(interval, stop)
        if stop.is_set():
            break
        pids = list_candidate_pids(fs_root, pid_filter)
        batch = collect_snapshot(pids, fs_root, clock)
        try:
            sink.put(batch)
        except QueueClosed:
            log.debug("snapshot sink closed, monitor exiting")
            break
        delivered += 1
        if on_batch is not None:
            on_batch(batch)
    return delivered
