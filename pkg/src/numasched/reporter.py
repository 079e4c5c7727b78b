"""Reporter: turn snapshot batches into per-task metrics and schedule reports.

Two per-task figures drive the scheduler:

* speedup factor = importance * cpu_share, ranking tasks for the powerful
  cores;
* contention factor = sum over nodes of locality(n) * pressure(n), where
  pressure(n) is monitored resident pages on n over n's capacity.

A report is only emitted when a trigger condition holds.
"""

from __future__ import annotations

import enum
import logging
import re
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping, Optional, Sequence

from .errors import TopologyError
from .procmon import TaskSnapshot
from .topology import NumaTopology

log = logging.getLogger(__name__)

DEFAULT_TICKS_PER_SECOND = 100


class TriggerReason(str, enum.Enum):
    UNBALANCED = "Unbalanced"
    BEHAVIOR_CHANGED = "BehaviorChanged"
    POWERFUL_CORE_IDLE = "PowerfulCoreIdle"


@dataclass(frozen=True)
class Thresholds:
    imbalance: float = 0.20
    idle: float = 0.10
    contention: float = 0.5


@dataclass(frozen=True)
class NodePressure:
    per_node: Mapping[int, float]

    def __post_init__(self):
        object.__setattr__(self, "per_node", MappingProxyType(dict(sorted(self.per_node.items()))))

    def __getitem__(self, node: int) -> float:
        return self.per_node[node]

    def spread(self) -> float:
        if not self.per_node:
            return 0.0
        return max(self.per_node.values()) - min(self.per_node.values())

    def least_loaded(self) -> int:
        return min(self.per_node, key=lambda n: (self.per_node[n], n))


@dataclass(frozen=True)
class TaskMetrics:
    pid: int
    cpu_share: float
    importance: float
    speedup_factor: float
    locality: Mapping[int, float]
    contention_factor: float
    home_node: int
    comm: str = ""
    last_cpu: int = -1
    pages: Mapping[int, int] = field(default_factory=dict)

    @property
    def total_pages(self) -> int:
        return sum(self.pages.values())


@dataclass(frozen=True)
class ScheduleReport:
    taken_at: float
    metrics: tuple
    by_speedup: tuple
    by_contention: tuple
    pressures: NodePressure
    trigger: TriggerReason

    def metric(self, pid: int) -> TaskMetrics:
        for m in self.metrics:
            if m.pid == pid:
                return m
        raise KeyError(pid)


@dataclass(frozen=True)
class ImportanceRule:
    weight: float
    pid: Optional[int] = None
    pattern: Optional[str] = None

    def matches(self, pid: int, comm: str) -> bool:
        if self.pid is not None:
            return pid == self.pid
        return self.pattern is not None and re.search(self.pattern, comm) is not None


class ImportanceTable:
    """Importance weights looked up by pid or command-name pattern; first match wins."""

    def __init__(self, rules: Iterable[ImportanceRule] = (), default: float = 1.0):
        self.rules = tuple(rules)
        self.default = default

    def lookup(self, pid: int, comm: str = "") -> float:
        for rule in self.rules:
            if rule.matches(pid, comm):
                return rule.weight
        return self.default


def filter_numa_data(batch: Sequence[TaskSnapshot],
                     previous: Optional[Mapping[int, TaskSnapshot]] = None) -> list:
    """Keep tasks that either hold resident pages or consumed CPU since ``previous``.

    Without a previous snapshot the cumulative counters stand in for the delta.
    """
    previous = previous or {}
    kept = []
    for snap in batch:
        prev = previous.get(snap.pid)
        delta = snap.stat.cpu_ticks - (prev.stat.cpu_ticks if prev else 0)
        if snap.numa.total_pages == 0 and delta <= 0:
            continue
        kept.append(snap)
    return kept


def compute_cpu_share(prev: TaskSnapshot, curr: TaskSnapshot,
                      ticks_per_second: float = DEFAULT_TICKS_PER_SECOND) -> float:
    if prev.pid != curr.pid:
        raise ValueError(f"snapshots of different pids {prev.pid} and {curr.pid}")
    elapsed = curr.taken_at - prev.taken_at
    if elapsed <= 0:
        raise ValueError("current snapshot is not newer than the previous one")
    delta = curr.stat.cpu_ticks - prev.stat.cpu_ticks
    if delta < 0:
        log.warning("pid %d: cpu counters went backwards (pid reuse?)", curr.pid)
        return 0.0
    share = (delta / ticks_per_second) / elapsed
    return min(1.0, max(0.0, share))


def compute_node_pressure(records: Iterable[TaskSnapshot], topology: NumaTopology) -> NodePressure:
    load = {n: 0 for n in topology.node_ids}
    for rec in records:
        for node, pages in rec.numa.per_node_pages.items():
            if node not in load:
                raise TopologyError(f"pid {rec.pid} has pages on unknown node {node}")
            load[node] += pages
    return NodePressure({n: load[n] / topology.capacity(n) for n in load})


def compute_task_metrics(record: TaskSnapshot, prev: Optional[TaskSnapshot],
                         pressures: NodePressure, importance=1.0,
                         ticks_per_second: float = DEFAULT_TICKS_PER_SECOND) -> TaskMetrics:
    """Metrics of one task; ``importance`` is a weight or an :class:`ImportanceTable`."""
    if isinstance(importance, ImportanceTable):
        weight = importance.lookup(record.pid, record.stat.comm)
    else:
        weight = float(importance)
    share = compute_cpu_share(prev, record, ticks_per_second) if prev is not None else 0.0

    pages = dict(record.numa.per_node_pages)
    total = record.numa.total_pages
    nodes = sorted(set(pressures.per_node) | set(pages))
    if total > 0:
        locality = {n: pages.get(n, 0) / total for n in nodes}
    else:
        locality = {n: 0.0 for n in nodes}
    contention = sum(locality[n] * pressures.per_node.get(n, 0.0) for n in nodes)
    home = max(nodes, key=lambda n: (locality[n], -n)) if nodes else 0

    return TaskMetrics(
        pid=record.pid,
        cpu_share=share,
        importance=weight,
        speedup_factor=weight * share,
        locality=MappingProxyType(locality),
        contention_factor=contention,
        home_node=home,
        comm=record.stat.comm,
        last_cpu=record.stat.last_cpu,
        pages=MappingProxyType({n: c for n, c in pages.items() if c}),
    )


def core_utilization(metrics: Iterable[TaskMetrics], topology: NumaTopology,
                     exclude: Iterable[int] = ()) -> dict:
    """Sum of monitored cpu_share per core, attributed via each task's last CPU."""
    skip = set(exclude)
    util = {c: 0.0 for c in topology.all_cores}
    for m in metrics:
        if m.pid in skip:
            continue
        if m.last_cpu in util:
            util[m.last_cpu] += m.cpu_share
    return util


def detect_trigger(metrics: Sequence[TaskMetrics], pressures: NodePressure,
                   previous: Optional[Sequence[TaskMetrics]], topology: NumaTopology,
                   core_util: Mapping[int, float],
                   thresholds: Thresholds = Thresholds()) -> Optional[TriggerReason]:
    """First matching trigger of: imbalance, behaviour change, idle powerful core.

    ``previous`` is the metric set of the last emitted report (None before the
    first one, which counts as every task having appeared).
    """
    if pressures.spread() > thresholds.imbalance:
        return TriggerReason.UNBALANCED

    prev_home = {m.pid: m.home_node for m in (previous or ())}
    curr_home = {m.pid: m.home_node for m in metrics}
    if prev_home != curr_home:
        return TriggerReason.BEHAVIOR_CHANGED

    if pressures.per_node:
        target = pressures.least_loaded()
        idle = any(core_util.get(c, 0.0) < thresholds.idle
                   for c in topology.node(target).core_ids)
        if idle and any(m.importance > 1 and m.home_node != target for m in metrics):
            return TriggerReason.POWERFUL_CORE_IDLE
    return None


def build_report(metrics: Sequence[TaskMetrics], pressures: NodePressure,
                 trigger: TriggerReason, taken_at: float = 0.0) -> ScheduleReport:
    metrics = tuple(sorted(metrics, key=lambda m: m.pid))
    by_speedup = tuple(m.pid for m in sorted(metrics, key=lambda m: (-m.speedup_factor, m.pid)))
    by_contention = tuple(
        m.pid for m in sorted(metrics, key=lambda m: (-m.contention_factor, m.pid)))
    return ScheduleReport(taken_at, metrics, by_speedup, by_contention, pressures, trigger)


class Reporter:
    """Stateful reporter consuming snapshot batches one at a time."""

    def __init__(self, topology: NumaTopology, importance: Optional[ImportanceTable] = None,
                 thresholds: Thresholds = Thresholds(),
                 ticks_per_second: float = DEFAULT_TICKS_PER_SECOND):
        self.topology = topology
        self.importance = importance or ImportanceTable()
        self.thresholds = thresholds
        self.ticks_per_second = ticks_per_second
        self._prev_snapshots: dict = {}
        self._prev_report_metrics: Optional[tuple] = None
        self._warm = False
        self.last_metrics: tuple = ()
        self.last_pressures: Optional[NodePressure] = None

    def process(self, batch: Sequence[TaskSnapshot]) -> Optional[ScheduleReport]:
        """Digest one batch; returns a report only when a trigger fires.

        The first batch only establishes the CPU-time baseline.
        """
        if not self._warm:
            self._warm = True
            self._prev_snapshots = {s.pid: s for s in batch}
            return None
        records = filter_numa_data(batch, self._prev_snapshots)
        pressures = compute_node_pressure(records, self.topology)
        metrics = tuple(
            compute_task_metrics(rec, self._prev_snapshots.get(rec.pid), pressures,
                                 self.importance, self.ticks_per_second)
            for rec in records)
        util = core_utilization(metrics, self.topology)
        trigger = detect_trigger(metrics, pressures, self._prev_report_metrics,
                                 self.topology, util, self.thresholds)

        self._prev_snapshots = {s.pid: s for s in batch}
        self.last_metrics = metrics
        self.last_pressures = pressures
        if trigger is None:
            return None
        self._prev_report_metrics = metrics
        taken_at = batch[0].taken_at if batch else 0.0
        return build_report(metrics, pressures, trigger, taken_at)
