"""Shared builders and hypothesis strategies for the test suite."""

from __future__ import annotations

import dataclasses

from hypothesis import strategies as st

from numasched.hostsim.model import SimHost, SimParams, SimTask
from numasched.hostsim.render import numa_maps_text, stat_line
from numasched.procmon import TaskSnapshot, parse_numa_maps, parse_proc_stat
from numasched.reporter import (
    ImportanceRule,
    ImportanceTable,
    TriggerReason,
    build_report,
    compute_node_pressure,
    compute_task_metrics,
    filter_numa_data,
)
from numasched.scheduler import PinRule, PinTable
from numasched.topology import build_topology

NOW = 10.0


def snapshot_of(task: SimTask, taken_at: float, tick_delta: int = 0) -> TaskSnapshot:
    stat = parse_proc_stat(stat_line(task))
    if tick_delta:
        stat = dataclasses.replace(stat, utime_ticks=stat.utime_ticks - tick_delta)
    return TaskSnapshot(stat, parse_numa_maps(numa_maps_text(task)), taken_at)


def report_from_host(host: SimHost, ticks: dict, trigger=TriggerReason.UNBALANCED):
    """Report over the host's live tasks as if each used ``ticks[pid]`` in the last second.

    The previous batch is fabricated one second earlier, so applying a plan to
    the host and rebuilding gives the same cpu shares and last CPUs.
    """
    live = host.live_tasks()
    curr = [snapshot_of(t, NOW) for t in live]
    prev = {t.pid: snapshot_of(t, NOW - 1.0, ticks.get(t.pid, 0)) for t in live}
    records = filter_numa_data(curr, prev)
    pressures = compute_node_pressure(records, host.topology)
    table = ImportanceTable(ImportanceRule(t.importance, pid=t.pid) for t in host.tasks)
    metrics = [compute_task_metrics(r, prev[r.pid], pressures, table) for r in records]
    return build_report(metrics, pressures, trigger, NOW)


@st.composite
def sim_hosts(draw, min_nodes=2, max_nodes=4, max_cores=4, max_tasks=8, min_tasks=1):
    """Random host plus per-task tick usage; tasks have run long enough for any delta."""
    n_nodes = draw(st.integers(min_nodes, max_nodes))
    sizes = [draw(st.integers(1, max_cores)) for _ in range(n_nodes)]
    cores, nxt = [], 0
    for s in sizes:
        cores.append(range(nxt, nxt + s))
        nxt += s
    caps = [draw(st.integers(50, 2000)) for _ in range(n_nodes)]
    topo = build_topology(cores, caps)
    all_cores = list(topo.all_cores)

    n_tasks = draw(st.integers(min_tasks, max_tasks))
    tasks, ticks = [], {}
    for i in range(n_tasks):
        pid = 100 + i
        pages = {n: draw(st.integers(0, caps[n])) if draw(st.booleans()) else 0
                 for n in range(n_nodes)}
        kind = draw(st.sampled_from(["core", "node", "all", "subset"]))
        if kind == "core":
            affinity = frozenset([draw(st.sampled_from(all_cores))])
        elif kind == "node":
            affinity = frozenset(cores[draw(st.integers(0, n_nodes - 1))])
        elif kind == "all":
            affinity = frozenset(all_cores)
        else:
            affinity = frozenset(draw(st.lists(st.sampled_from(all_cores), min_size=1,
                                               max_size=len(all_cores), unique=True)))
        task = SimTask(
            pid=pid, work_total=100.0, pages=pages, affinity=affinity,
            importance=draw(st.sampled_from([1.0, 1.0, 2.0, 3.0])),
            access_intensity=draw(st.sampled_from([0.1, 0.5, 0.9])),
            comm=f"task-{pid}", last_cpu=draw(st.sampled_from(sorted(affinity))),
            run_time=5.0)
        tasks.append(task)
        ticks[pid] = draw(st.integers(0, 100))
    host = SimHost(topo, tasks, time=NOW, params=SimParams(), name="random")
    return host, ticks


@st.composite
def pin_tables(draw, host: SimHost):
    all_cores = list(host.topology.all_cores)
    rules = []
    for t in host.tasks:
        if draw(st.integers(0, 3)) == 0:
            cpus = draw(st.lists(st.sampled_from(all_cores), min_size=1,
                                 max_size=len(all_cores), unique=True))
            rules.append(PinRule(frozenset(cpus), pid=t.pid))
    return PinTable(rules)


@st.composite
def hosts_with_pins(draw, **kwargs):
    host, ticks = draw(sim_hosts(**kwargs))
    pins = draw(pin_tables(host)) if draw(st.booleans()) else PinTable()
    return host, ticks, pins
