"""Closed-loop policy comparison on a simulated host."""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from typing import Optional, Union

from ..procmon import ManualClock, collect_snapshot, list_candidate_pids
from ..reporter import ImportanceRule, ImportanceTable, Reporter, Thresholds
from ..scheduler import SchedulerConfig, apply_plan, schedule_once
from ..topology import discover_topology
from .backend import SimBackend
from .model import SimHost, remote_ratio, scenario_from_dict, sim_step, load_scenario
from .render import render_procfs, render_sysfs, write_tree

log = logging.getLogger(__name__)

POLICIES = ("noop", "static-pin", "auto-balance", "proposed")
AUTO_BALANCE_REMOTE = 0.5


@dataclass
class ExperimentResult:
    policy: str
    completion_times: dict
    makespan: Optional[float]
    important_mean: Optional[float]
    weighted_mean: Optional[float]
    reports: int = 0
    task_moves: int = 0
    page_moves: int = 0
    importance: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        def r(x):
            return None if x is None else round(x, 3)
        return {
            "policy": self.policy,
            "completion_times": {str(pid): r(t) for pid, t in sorted(self.completion_times.items())},
            "makespan": r(self.makespan),
            "important_mean": r(self.important_mean),
            "weighted_mean": r(self.weighted_mean),
            "reports": self.reports,
            "task_moves": self.task_moves,
            "page_moves": self.page_moves,
        }


def _summarize(policy: str, host: SimHost, **counters) -> ExperimentResult:
    times = {t.pid: t.completed_at for t in host.tasks}
    done = [t for t in host.tasks if t.completed_at is not None]
    makespan = max(t.completed_at for t in host.tasks) if len(done) == len(host.tasks) and done \
        else None
    important = [t for t in host.tasks if t.importance > 1]
    important_mean = None
    if important and all(t.completed_at is not None for t in important):
        important_mean = sum(t.completed_at for t in important) / len(important)
    weighted_mean = None
    if done and len(done) == len(host.tasks):
        weight = sum(t.importance for t in host.tasks)
        weighted_mean = sum(t.importance * t.completed_at for t in host.tasks) / weight
    return ExperimentResult(policy, times, makespan, important_mean, weighted_mean,
                            importance={t.pid: t.importance for t in host.tasks}, **counters)


def _auto_balance(host: SimHost, backend: SimBackend) -> int:
    moves = 0
    for t in host.live_tasks():
        core = t.running_core if t.running_core is not None else t.last_cpu
        node = host.topology.node_of(core)
        if remote_ratio(t, node) > AUTO_BALANCE_REMOTE:
            sources = [n for n, c in t.pages.items() if c and n != node]
            backend.migrate_pages(t.pid, sources, node)
            moves += 1
    return moves


def run_policy_experiment(scenario: Union[SimHost, dict, str], policy: str, horizon: float,
                          dt: float = 0.1, interval: float = 1.0,
                          thresholds: Thresholds = Thresholds()) -> ExperimentResult:
    """Run one policy on a fresh copy of the scenario until all tasks finish or ``horizon``."""
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    if not horizon or horizon <= 0:
        raise ValueError("horizon must be positive")
    if dt <= 0 or interval <= 0:
        raise ValueError("dt and interval must be positive")
    if isinstance(scenario, SimHost):
        host = scenario.clone()
    elif isinstance(scenario, str):
        host = load_scenario(scenario)
    else:
        host = scenario_from_dict(scenario)

    backend = SimBackend(host)
    per_control = max(1, round(interval / dt))
    total_steps = int(round(horizon / dt))
    counters = {"reports": 0, "task_moves": 0, "page_moves": 0}

    if policy == "static-pin":
        for t in host.tasks:
            if t.pins is not None:
                backend.set_affinity(t.pid, t.pins)
                counters["task_moves"] += 1

    with tempfile.TemporaryDirectory(prefix="numasched-sim-") as tmp:
        proc_root = os.path.join(tmp, "proc")
        reporter = None
        topology = None
        sched_config = SchedulerConfig(contention_threshold=thresholds.contention)
        if policy == "proposed":
            write_tree(render_sysfs(host), os.path.join(tmp, "sys"))
            topology = discover_topology(os.path.join(tmp, "sys"))
            importance = ImportanceTable(
                ImportanceRule(t.importance, pid=t.pid) for t in host.tasks)
            reporter = Reporter(topology, importance, thresholds)
        clock = ManualClock()

        for step in range(total_steps):
            if not host.live_tasks():
                break
            if step and step % per_control == 0:
                if policy == "auto-balance":
                    counters["page_moves"] += _auto_balance(host, backend)
                elif policy == "proposed":
                    clock.t = host.time
                    write_tree(render_procfs(host), proc_root, clean=True)
                    batch = collect_snapshot(list_candidate_pids(proc_root), proc_root, clock)
                    report = reporter.process(batch)
                    if report is not None:
                        counters["reports"] += 1
                        plan = schedule_once(report, sched_config, backend, topology)
                        if not plan.empty:
                            log.debug("t=%.1f %s", host.time, plan.summary())
                        apply_plan(plan, backend)
                        counters["task_moves"] += len(plan.task_moves)
                        counters["page_moves"] += len(plan.page_moves)
            sim_step(host, dt)

    return _summarize(policy, host, **counters)


def run_all(scenario, horizon: float, policies=POLICIES, **kwargs) -> list:
    return [run_policy_experiment(scenario, p, horizon, **kwargs) for p in policies]


def experiment_document(results: list, scenario_name: str, horizon: float) -> str:
    doc = {
        "scenario": scenario_name,
        "horizon": horizon,
        "results": [r.to_dict() for r in results],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"
