"""User-space scheduler: turn a ScheduleReport into a PlacementPlan and apply it.

Planning has three parts, all evaluated on an exact page-count model of the
monitored tasks:

1. administrator pins are enforced as affinity;
2. tasks whose contention factor exceeds a threshold are scattered to the
   node minimizing their predicted contention, moving their remaining
   ("sticky") pages along. A move is committed only if it strictly improves
   the task's predicted contention;
3. the tasks with the highest speedup factor are placed on "powerful" cores
   (idle cores on the least pressured nodes), pages following the task.

Applying a plan and re-planning on the resulting state is a no-op; see
:func:`schedule_once` for why.
"""

from __future__ import annotations

import logging
import math
import re
from collections import OrderedDict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Optional, Sequence

from .errors import BackendError, ConfigError
from .reporter import ScheduleReport, TaskMetrics, TriggerReason, core_utilization
from .topology import NumaTopology, format_cpulist

log = logging.getLogger(__name__)

DEFAULT_CONTENTION_THRESHOLD = 0.5


@dataclass(frozen=True)
class PinRule:
    cpus: frozenset
    pid: Optional[int] = None
    pattern: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "cpus", frozenset(self.cpus))
        if not self.cpus:
            raise ConfigError("pin rule with an empty cpu set")
        if (self.pid is None) == (self.pattern is None):
            raise ConfigError("pin rule needs exactly one of pid or pattern")

    def matches(self, pid: int, comm: str) -> bool:
        if self.pid is not None:
            return pid == self.pid
        return re.search(self.pattern, comm) is not None


class PinTable:
    """Static CPU pins supplied by the administrator; first matching rule wins."""

    def __init__(self, rules: Iterable[PinRule] = ()):
        self.rules = tuple(rules)

    def lookup(self, pid: int, comm: str = "") -> Optional[frozenset]:
        for rule in self.rules:
            if rule.matches(pid, comm):
                return rule.cpus
        return None

    def validate(self, topology: NumaTopology) -> None:
        cores = set(topology.all_cores)
        for rule in self.rules:
            missing = rule.cpus - cores
            if missing:
                who = rule.pid if rule.pid is not None else rule.pattern
                raise ConfigError(f"pin for {who!r} names unknown cpus {format_cpulist(missing)}")

    def __bool__(self):
        return bool(self.rules)

    def __eq__(self, other):
        return isinstance(other, PinTable) and self.rules == other.rules

    def __repr__(self):
        return f"PinTable({list(self.rules)!r})"


@dataclass(frozen=True)
class TaskMove:
    pid: int
    cores: frozenset
    node: Optional[int]  # None when the core set spans nodes (pin enforcement)

    def __post_init__(self):
        object.__setattr__(self, "cores", frozenset(self.cores))


@dataclass(frozen=True)
class PageMove:
    pid: int
    from_nodes: frozenset
    to_node: int

    def __post_init__(self):
        object.__setattr__(self, "from_nodes", frozenset(self.from_nodes))


@dataclass(frozen=True)
class PlacementPlan:
    task_moves: tuple = ()
    page_moves: tuple = ()
    reason: Optional[TriggerReason] = None

    @property
    def empty(self) -> bool:
        return not self.task_moves and not self.page_moves

    def violations(self, topology: NumaTopology) -> list:
        """Internal-consistency problems; an empty list means the plan is sound."""
        problems = []
        pids = [m.pid for m in self.task_moves]
        if len(pids) != len(set(pids)):
            problems.append("pid appears twice in task_moves")
        targets = {}
        for m in self.task_moves:
            if not m.cores:
                problems.append(f"pid {m.pid}: empty core set")
            if m.node is not None:
                stray = [c for c in m.cores if topology.core_to_node.get(c) != m.node]
                if stray:
                    problems.append(f"pid {m.pid}: cores {stray} not on node {m.node}")
            targets[m.pid] = m.node
        for p in self.page_moves:
            if p.pid in targets and targets[p.pid] != p.to_node:
                problems.append(f"pid {p.pid}: pages go to node {p.to_node}, "
                                f"task goes to node {targets[p.pid]}")
            if p.to_node in p.from_nodes:
                problems.append(f"pid {p.pid}: page move onto a source node")
        return problems

    def summary(self) -> dict:
        return {
            "reason": self.reason.value if self.reason else None,
            "task_moves": [
                {"pid": m.pid, "cpus": format_cpulist(m.cores), "node": m.node}
                for m in self.task_moves],
            "page_moves": [
                {"pid": p.pid, "from": sorted(p.from_nodes), "to": p.to_node}
                for p in self.page_moves],
        }


@dataclass(frozen=True)
class SchedulerConfig:
    pins: PinTable = field(default_factory=PinTable)
    contention_threshold: float = DEFAULT_CONTENTION_THRESHOLD
    powerful_cores: Optional[int] = None


@dataclass(frozen=True)
class ScatterDecision:
    pid: int
    from_nodes: frozenset
    to_node: int
    before: Fraction
    after: Fraction


class _PageModel:
    """Exact per-node page loads of the monitored tasks."""

    def __init__(self, metrics: Iterable[TaskMetrics], topology: NumaTopology):
        self.capacity = {n: topology.capacity(n) for n in topology.node_ids}
        self.pages = {m.pid: {n: c for n, c in m.pages.items() if c} for m in metrics}
        self.load = {n: 0 for n in self.capacity}
        for pages in self.pages.values():
            for n, c in pages.items():
                self.load[n] += c

    def pressure(self, node: int, exclude: Iterable[int] = ()) -> Fraction:
        load = self.load[node] - sum(self.pages[p].get(node, 0) for p in exclude if p in self.pages)
        return Fraction(load, self.capacity[node])

    def contention(self, pid: int) -> Fraction:
        pages = self.pages[pid]
        total = sum(pages.values())
        if not total:
            return Fraction(0)
        return sum((Fraction(c, total) * Fraction(self.load[n], self.capacity[n])
                    for n, c in pages.items()), Fraction(0))

    def predicted(self, pid: int, node: int) -> Fraction:
        """Contention of ``pid`` if all its pages lived on ``node``."""
        pages = self.pages[pid]
        total = sum(pages.values())
        if not total:
            return Fraction(0)
        return Fraction(self.load[node] - pages.get(node, 0) + total, self.capacity[node])

    def only_on(self, pid: int, node: int) -> bool:
        return all(n == node for n in self.pages[pid])

    def move_all(self, pid: int, node: int) -> frozenset:
        pages = self.pages[pid]
        sources = frozenset(n for n in pages if n != node)
        total = sum(pages.values())
        for n, c in pages.items():
            self.load[n] -= c
        self.load[node] += total
        self.pages[pid] = {node: total} if total else {}
        return sources


def powerful_core_candidates(topology: NumaTopology, pressures: Mapping[int, float],
                             core_util: Mapping[int, float], k: int) -> list:
    """The ``k`` best cores ranked by (node pressure, core utilization, core id)."""
    if k <= 0:
        return []
    per_node = getattr(pressures, "per_node", pressures)
    ranked = sorted(
        topology.all_cores,
        key=lambda c: (per_node.get(topology.node_of(c), 0), core_util.get(c, 0.0), c))
    return ranked[:k]


def default_powerful_count(report: ScheduleReport, topology: NumaTopology) -> int:
    count = sum(1 for m in report.metrics if m.importance > 1)
    return min(count, len(topology.all_cores))


def retrieve_processes(report: ScheduleReport, k: int, pins: Optional[PinTable] = None,
                       candidates: Sequence[int] = ()) -> list:
    """First ``k`` pids by speedup, skipping pids pinned away from every candidate."""
    pins = pins or PinTable()
    cand = set(candidates)
    comms = {m.pid: m.comm for m in report.metrics}
    out = []
    for pid in report.by_speedup:
        if len(out) >= k:
            break
        pin = pins.lookup(pid, comms.get(pid, ""))
        if pin is not None and not (pin & cand):
            continue
        out.append(pid)
    return out


def _pair(retrieved: Sequence[int], candidates: Sequence[int],
          pinned: Mapping[int, frozenset]) -> list:
    # unpinned tasks pair position-for-position; a pinned task takes the
    # first free candidate inside its pin set
    free = list(candidates)
    pairs = []
    for pid in retrieved:
        pin = pinned.get(pid)
        for core in free:
            if pin is None or core in pin:
                free.remove(core)
                pairs.append((pid, core))
                break
    return pairs


def plan_powerful_moves(retrieved: Sequence[int], candidates: Sequence[int], backend,
                        topology: NumaTopology,
                        pinned: Optional[Mapping[int, frozenset]] = None,
                        current: Optional[Mapping[int, frozenset]] = None) -> list:
    """Bind each retrieved task to its candidate core unless it is already there.

    ``current`` overrides backend affinity queries (used while iterating on
    the planning model).
    """
    moves = []
    for pid, core in _pair(retrieved, candidates, pinned or {}):
        if current is not None and pid in current:
            now = current[pid]
        else:
            try:
                now = frozenset(backend.current_affinity(pid))
            except (BackendError, OSError) as exc:
                log.info("skipping pid %d: affinity query failed: %s", pid, exc)
                continue
        target = frozenset((core,))
        if now != target:
            moves.append(TaskMove(pid, target, topology.node_of(core)))
    return moves


def _pick_core(topology: NumaTopology, node: int, util: dict, reserved: set) -> int:
    cores = sorted(topology.node(node).core_ids)
    pool = [c for c in cores if c not in reserved] or cores
    return min(pool, key=lambda c: (util.get(c, 0.0), c))


def _scatter(model: _PageModel, order: Sequence[int], movable: set, threshold: Fraction,
             topology: NumaTopology, trace: Optional[list] = None,
             max_passes: int = 10_000) -> "OrderedDict[int, int]":
    """Greedy contention scatter on ``model``; returns pid -> destination node.

    Each committed move strictly lowers the mover's contention, and the cost a
    task sees on a node grows with the pages already there, so the passes
    settle (a weighted congestion game with an exact potential).
    """
    committed: "OrderedDict[int, int]" = OrderedDict()
    nodes = topology.node_ids
    for _ in range(max_passes):
        changed = False
        for pid in order:
            if pid not in movable:
                continue
            before = model.contention(pid)
            if before <= threshold:
                continue
            best = min(nodes, key=lambda n: (model.predicted(pid, n), n))
            after = model.predicted(pid, best)
            if not after < before:
                continue
            sources = model.move_all(pid, best)
            committed.pop(pid, None)
            committed[pid] = best
            if trace is not None:
                trace.append(ScatterDecision(pid, sources, best, before, after))
            changed = True
        if not changed:
            return committed
        # later passes go by the updated contention
        order = sorted(order, key=lambda p: (-model.contention(p), p))
    log.warning("scatter did not converge after %d passes", max_passes)
    return committed


def _as_threshold(value: float):
    # exact comparisons, except that an infinite threshold stays a float
    return value if math.isinf(value) else Fraction(value)


def _scatter_cores(committed: Mapping[int, int], topology: NumaTopology, util: dict,
                   reserved: set, shares: Mapping[int, float]) -> dict:
    cores = {}
    for pid, node in committed.items():
        core = _pick_core(topology, node, util, reserved)
        util[core] = util.get(core, 0.0) + shares.get(pid, 0.0)
        cores[pid] = core
    return cores


def plan_scatter(report: ScheduleReport, topology: NumaTopology,
                 threshold: float = DEFAULT_CONTENTION_THRESHOLD, *,
                 exclude: Iterable[int] = (), reserved_cores: Iterable[int] = (),
                 trace: Optional[list] = None) -> tuple:
    """Spread heavily contended tasks; returns ``(task_moves, page_moves)``.

    Tasks above ``threshold`` are visited in ``report.by_contention`` order and
    moved to the node minimizing their predicted contention when that is a
    strict improvement. Passes repeat until nothing moves.
    """
    model = _PageModel(report.metrics, topology)
    skip = set(exclude)
    movable = {m.pid for m in report.metrics if m.pid not in skip}
    util = core_utilization(report.metrics, topology)
    shares = {m.pid: m.cpu_share for m in report.metrics}
    original = {pid: dict(p) for pid, p in model.pages.items()}
    committed = _scatter(model, report.by_contention, movable, _as_threshold(threshold),
                         topology, trace)
    cores = _scatter_cores(committed, topology, util, set(reserved_cores), shares)
    task_moves, page_moves = [], []
    for pid, node in committed.items():
        task_moves.append(TaskMove(pid, frozenset((cores[pid],)), node))
        sources = frozenset(n for n in original[pid] if n != node)
        if sources:
            page_moves.append(PageMove(pid, sources, node))
    return task_moves, page_moves


def _retrieval_prefix(by_speedup: Sequence[int], k: int, pinned: Mapping[int, frozenset]) -> list:
    prefix, free = [], 0
    for pid in by_speedup:
        if free >= k:
            break
        prefix.append(pid)
        if pid not in pinned:
            free += 1
    return prefix


def schedule_once(report: ScheduleReport, config: SchedulerConfig, backend,
                  topology: NumaTopology) -> PlacementPlan:
    """Compose pins, powerful-core placement and contention scatter into one plan.

    The phases run in one direction only. Retrieval walks by_speedup and may
    skip pinned pids, but never past the shortest prefix holding k unpinned
    pids (the "powerful prefix"). Scatter runs among the tasks outside that
    prefix, on a model holding only their pages. The powerful cores are
    ranked on the load left after the scatter, and the retrieved tasks move
    there together with their pages. Nothing later feeds back into an earlier
    phase, so re-planning on the state this plan produces yields nothing.
    """
    if not report.metrics:
        return PlacementPlan(reason=report.trigger)

    metrics = {m.pid: m for m in report.metrics}
    pinned = {}
    for m in report.metrics:
        pin = config.pins.lookup(m.pid, m.comm)
        if pin is not None:
            pinned[m.pid] = pin

    affinity: dict = {}
    unavailable = set()
    for pid in metrics:
        try:
            affinity[pid] = frozenset(backend.current_affinity(pid))
        except (BackendError, OSError) as exc:
            log.info("pid %d unavailable: %s", pid, exc)
            unavailable.add(pid)
    initial_affinity = dict(affinity)

    k = config.powerful_cores
    if k is None:
        k = default_powerful_count(report, topology)
    k = max(0, min(k, len(topology.all_cores)))
    prefix = set(_retrieval_prefix(report.by_speedup, k, pinned))
    shares = {m.pid: m.cpu_share for m in report.metrics}

    # contention scatter among everybody outside the powerful prefix
    rest = _PageModel([m for m in report.metrics if m.pid not in prefix], topology)
    movable = {p for p in metrics if p not in prefix and p not in pinned and p not in unavailable}
    order = [p for p in report.by_contention if p not in prefix]
    scattered = _scatter(rest, order, movable, _as_threshold(config.contention_threshold),
                         topology)

    # powerful cores: idle cores on the nodes the remaining load leaves emptiest
    util_bg = core_utilization(report.metrics, topology, exclude=prefix)
    bg_pressure = {n: rest.pressure(n) for n in topology.node_ids}
    candidates = powerful_core_candidates(topology, bg_pressure, util_bg, k)
    retrieved = [p for p in retrieve_processes(report, k, config.pins, candidates)
                 if p not in unavailable]
    assigned = dict(_pair(retrieved, candidates, pinned))

    model = _PageModel(report.metrics, topology)
    initial_pages = {pid: dict(p) for pid, p in model.pages.items()}
    touched: "OrderedDict[int, None]" = OrderedDict()

    # pins win: a pinned task not placed on a powerful core is held to its pin set
    for pid, pin in pinned.items():
        if pid in unavailable or pid in assigned:
            continue
        if not affinity[pid] <= pin:
            affinity[pid] = pin
            touched[pid] = None

    for move in plan_powerful_moves(retrieved, candidates, backend, topology,
                                    pinned, current=affinity):
        affinity[move.pid] = move.cores
        touched[move.pid] = None
    for pid, core in assigned.items():
        node = topology.node_of(core)
        if not model.only_on(pid, node):
            model.move_all(pid, node)
            touched[pid] = None

    util = dict(util_bg)
    for pid, core in assigned.items():
        util[core] = util.get(core, 0.0) + shares[pid]
    for pid, core in _scatter_cores(scattered, topology, util, set(candidates), shares).items():
        affinity[pid] = frozenset((core,))
        model.move_all(pid, scattered[pid])
        touched[pid] = None

    task_moves, page_moves = [], []
    for pid in touched:
        if affinity.get(pid) != initial_affinity.get(pid):
            cores = affinity[pid]
            task_moves.append(TaskMove(pid, cores, topology.node_of_cores(cores)))
        final, start = model.pages[pid], initial_pages[pid]
        if final != start and final:
            (target,) = final.keys()
            sources = frozenset(n for n in start if n != target)
            if sources:
                page_moves.append(PageMove(pid, sources, target))
    return PlacementPlan(tuple(task_moves), tuple(page_moves), report.trigger)


@dataclass(frozen=True)
class MoveResult:
    pid: int
    kind: str  # "affinity" or "pages"
    status: str  # "ok", "failed" or "skipped"
    detail: str = ""
    pages_unmoved: Optional[int] = None


@dataclass
class ApplyResult:
    results: list = field(default_factory=list)

    @property
    def failed(self) -> list:
        return [r for r in self.results if r.status == "failed"]

    @property
    def ok(self) -> bool:
        return not self.failed

    def to_list(self) -> list:
        return [
            {"pid": r.pid, "kind": r.kind, "status": r.status, "detail": r.detail,
             "pages_unmoved": r.pages_unmoved}
            for r in self.results]


def apply_plan(plan: PlacementPlan, backend, dry_run: bool = False) -> ApplyResult:
    """Issue the plan's moves in order; failures are recorded, never raised."""
    result = ApplyResult()
    pending = OrderedDict((p.pid, p) for p in plan.page_moves)

    def pages(move: PageMove):
        if dry_run:
            result.results.append(MoveResult(move.pid, "pages", "skipped", "dry run"))
            return
        try:
            unmoved = backend.migrate_pages(move.pid, move.from_nodes, move.to_node)
        except (BackendError, OSError) as exc:
            result.results.append(MoveResult(move.pid, "pages", "failed", str(exc)))
            return
        result.results.append(MoveResult(move.pid, "pages", "ok", pages_unmoved=int(unmoved)))

    for move in plan.task_moves:
        page_move = pending.pop(move.pid, None)
        if dry_run:
            result.results.append(MoveResult(move.pid, "affinity", "skipped", "dry run"))
        else:
            try:
                backend.set_affinity(move.pid, move.cores)
            except (BackendError, OSError) as exc:
                result.results.append(MoveResult(move.pid, "affinity", "failed", str(exc)))
                if page_move is not None:
                    result.results.append(
                        MoveResult(move.pid, "pages", "failed", "affinity change failed"))
                continue
            result.results.append(MoveResult(move.pid, "affinity", "ok"))
        if page_move is not None:
            pages(page_move)
    for move in pending.values():
        pages(move)
    return result
