"""Simulated NUMA host: tasks, page placement and contention-driven slowdown."""

from __future__ import annotations

import copy
import json
import os
from importlib import resources
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional

from ..errors import ConfigError
from ..topology import NumaNode, NumaTopology, parse_cpulist

SHARING = ("low", "high")
EXCHANGE = ("low", "medium", "high")
GRANULARITY = ("fine", "medium", "coarse")

TICKS_PER_SECOND = 100
RATE_FLOOR = 0.05


@dataclass(frozen=True)
class WorkloadProfile:
    name: str
    sharing: str = "low"
    exchange: str = "low"
    granularity: str = "medium"

    def __post_init__(self):
        for attr, allowed in (("sharing", SHARING), ("exchange", EXCHANGE),
                              ("granularity", GRANULARITY)):
            if getattr(self, attr) not in allowed:
                raise ConfigError(f"profile {self.name!r}: {attr} must be one of {allowed}")


# Qualitative PARSEC characteristics (granularity, sharing, exchange).
PARSEC_PROFILES = {
    p.name: p for p in (
        WorkloadProfile("blackscholes", "low", "low", "coarse"),
        WorkloadProfile("bodytrack", "high", "medium", "medium"),
        WorkloadProfile("canneal", "high", "high", "fine"),
        WorkloadProfile("dedup", "high", "high", "medium"),
        WorkloadProfile("facesim", "low", "medium", "coarse"),
        WorkloadProfile("ferret", "high", "high", "medium"),
        WorkloadProfile("fluidanimate", "low", "medium", "fine"),
        WorkloadProfile("freqmine", "high", "medium", "medium"),
        WorkloadProfile("streamcluster", "low", "medium", "medium"),
        WorkloadProfile("swaptions", "low", "low", "coarse"),
        WorkloadProfile("vips", "low", "medium", "coarse"),
        WorkloadProfile("x264", "high", "high", "coarse"),
    )
}

CUSTOM_PROFILE = WorkloadProfile("custom")


@dataclass(frozen=True)
class SimParams:
    alpha: float = 0.5  # remote-access penalty weight
    beta: float = 1.0  # node-pressure penalty weight


@dataclass
class SimTask:
    pid: int
    work_total: float
    pages: dict
    affinity: frozenset
    profile: WorkloadProfile = CUSTOM_PROFILE
    importance: float = 1.0
    base_rate: float = 1.0
    access_intensity: float = 0.5
    comm: str = ""
    pins: Optional[frozenset] = None
    work_done: float = 0.0
    running_core: Optional[int] = None
    last_cpu: int = 0
    run_time: float = 0.0
    completed_at: Optional[float] = None

    @property
    def finished(self) -> bool:
        return self.work_done >= self.work_total

    @property
    def total_pages(self) -> int:
        return sum(self.pages.values())

    @property
    def utime_ticks(self) -> int:
        return int(round(self.run_time * TICKS_PER_SECOND))

    def resident(self) -> dict:
        return {n: c for n, c in sorted(self.pages.items()) if c}


@dataclass
class SimHost:
    topology: NumaTopology
    tasks: list = field(default_factory=list)
    time: float = 0.0
    params: SimParams = field(default_factory=SimParams)
    name: str = ""

    def __post_init__(self):
        self.tasks.sort(key=lambda t: t.pid)
        cores = set(self.topology.all_cores)
        nodes = set(self.topology.node_ids)
        for t in self.tasks:
            bad = [n for n in t.pages if n not in nodes]
            if bad:
                raise ConfigError(f"task {t.pid}: pages on nonexistent node(s) {bad}")
            if any(c < 0 for c in t.pages.values()):
                raise ConfigError(f"task {t.pid}: negative page count")
            if not t.affinity or not t.affinity <= cores:
                raise ConfigError(f"task {t.pid}: affinity must be a non-empty subset of cores")

    def task(self, pid: int) -> SimTask:
        for t in self.tasks:
            if t.pid == pid:
                return t
        raise KeyError(pid)

    def live_tasks(self) -> list:
        return [t for t in self.tasks if not t.finished]

    def node_load(self) -> dict:
        load = {n: 0 for n in self.topology.node_ids}
        for t in self.live_tasks():
            for n, c in t.pages.items():
                load[n] += c
        return load

    def pressures(self) -> dict:
        return {n: c / self.topology.capacity(n) for n, c in self.node_load().items()}

    def current_topology(self) -> NumaTopology:
        """Topology with free memory reflecting the live tasks' footprint."""
        load = self.node_load()
        nodes = tuple(
            NumaNode(n.id, n.core_ids, n.mem_total_pages,
                     max(0, n.mem_total_pages - load[n.id]))
            for n in self.topology.nodes)
        return NumaTopology(nodes, self.topology.distances)

    def assign_cores(self) -> None:
        """One task per core: lowest free core of the affinity, lower pids first."""
        claimed: set = set()
        for t in self.tasks:
            t.running_core = None
            if t.finished:
                continue
            for core in sorted(t.affinity):
                if core not in claimed:
                    claimed.add(core)
                    t.running_core = core
                    break

    def clone(self) -> "SimHost":
        return copy.deepcopy(self)


def _clamp(x: float) -> float:
    return min(1.0, max(RATE_FLOOR, x))


def remote_ratio(task: SimTask, node: int) -> float:
    total = task.total_pages
    if not total:
        return 0.0
    return 1.0 - task.pages.get(node, 0) / total


def effective_rate(task: SimTask, host: SimHost) -> float:
    if task.running_core is None:
        raise ValueError(f"task {task.pid} has no running core")
    node = host.topology.node_of(task.running_core)
    pressures = host.pressures()
    mean = sum(pressures.values()) / len(pressures)
    excess = max(0.0, pressures[node] - mean)
    ai = task.access_intensity
    remote = _clamp(1.0 - host.params.alpha * remote_ratio(task, node) * ai)
    crowd = _clamp(1.0 - host.params.beta * excess * ai)
    return task.base_rate * remote * crowd


def sim_step(host: SimHost, dt: float) -> SimHost:
    """Advance the host by ``dt`` seconds in place and return it."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    host.assign_cores()
    rates = {t.pid: effective_rate(t, host) for t in host.tasks if t.running_core is not None}
    for t in host.tasks:
        if t.pid not in rates:
            continue
        rate = rates[t.pid]
        remaining = t.work_total - t.work_done
        t.last_cpu = t.running_core
        if rate * dt >= remaining:
            spent = remaining / rate
            t.work_done = t.work_total
            t.run_time += spent
            t.completed_at = host.time + spent
            t.running_core = None
        else:
            t.work_done += rate * dt
            t.run_time += dt
    host.time = round(host.time + dt, 9)
    return host


def _field(doc: Mapping, key: str, where: str, kind=None, default: Any = ...):
    if key not in doc:
        if default is ...:
            raise ConfigError(f"{where}.{key} is required")
        return default
    value = doc[key]
    if kind is not None and (not isinstance(value, kind) or isinstance(value, bool)):
        raise ConfigError(f"{where}.{key} has the wrong type")
    return value


def _cores(value, where: str) -> frozenset:
    try:
        if isinstance(value, str):
            return frozenset(parse_cpulist(value))
        return frozenset(int(c) for c in value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: bad cpu list ({exc})") from None


def _profile(value, where: str) -> WorkloadProfile:
    if value is None:
        return CUSTOM_PROFILE
    if isinstance(value, str):
        if value not in PARSEC_PROFILES:
            raise ConfigError(f"{where}: unknown profile {value!r}")
        return PARSEC_PROFILES[value]
    if isinstance(value, Mapping):
        try:
            return WorkloadProfile(
                name=str(value.get("name", "custom")),
                sharing=value.get("sharing", "low"),
                exchange=value.get("exchange", "low"),
                granularity=value.get("granularity", "medium"))
        except ConfigError as exc:
            raise ConfigError(f"{where}: {exc}") from None
    raise ConfigError(f"{where} must be a profile name or object")


def _split_for_exchange(pages: dict, node_count: int) -> dict:
    # high data exchange: half of the main node's pages start on its neighbour
    if node_count < 2 or not pages:
        return pages
    main = max(sorted(pages), key=lambda n: pages[n])
    moved = pages[main] // 2
    out = dict(pages)
    out[main] -= moved
    neighbour = (main + 1) % node_count
    out[neighbour] = out.get(neighbour, 0) + moved
    return out


def scenario_from_dict(doc: Mapping) -> SimHost:
    if not isinstance(doc, Mapping):
        raise ConfigError("scenario must be a JSON object")
    topo_doc = _field(doc, "topology", "scenario", Mapping)
    node_docs = _field(topo_doc, "nodes", "topology", list)
    nodes = []
    for i, nd in enumerate(node_docs):
        where = f"topology.nodes[{i}]"
        if not isinstance(nd, Mapping):
            raise ConfigError(f"{where} must be an object")
        node_id = _field(nd, "id", where, int, default=i)
        cores = _cores(_field(nd, "cores", where), f"{where}.cores")
        mem = _field(nd, "mem_total_pages", where, int)
        if mem <= 0:
            raise ConfigError(f"{where}.mem_total_pages must be positive")
        nodes.append((node_id, cores, mem))
    distances = _field(topo_doc, "distances", "topology", list, default=None)
    try:
        topology = NumaTopology(
            tuple(NumaNode(nid, cores, mem, mem) for nid, cores, mem in nodes),
            tuple(tuple(r) for r in distances) if distances else ())
    except Exception as exc:
        raise ConfigError(f"topology: {exc}") from None

    params_doc = _field(doc, "params", "scenario", Mapping, default={})
    unknown = set(params_doc) - {"alpha", "beta"}
    if unknown:
        raise ConfigError(f"params: unknown key(s) {sorted(unknown)}")
    params = SimParams(float(params_doc.get("alpha", 0.5)), float(params_doc.get("beta", 1.0)))

    all_cores = frozenset(topology.all_cores)
    tasks = []
    seen = set()
    for i, td in enumerate(_field(doc, "tasks", "scenario", list)):
        where = f"tasks[{i}]"
        if not isinstance(td, Mapping):
            raise ConfigError(f"{where} must be an object")
        pid = _field(td, "pid", where, int)
        if pid <= 0 or pid in seen:
            raise ConfigError(f"{where}.pid must be a unique positive integer")
        seen.add(pid)
        profile = _profile(td.get("profile"), f"{where}.profile")
        importance = float(_field(td, "importance", where, (int, float), default=1.0))
        base_rate = float(_field(td, "base_rate", where, (int, float), default=1.0))
        work_total = float(_field(td, "work_total", where, (int, float)))
        ai = float(_field(td, "access_intensity", where, (int, float), default=0.5))
        if importance <= 0:
            raise ConfigError(f"{where}.importance must be positive")
        if base_rate <= 0 or work_total <= 0:
            raise ConfigError(f"{where}: base_rate and work_total must be positive")
        if not 0 <= ai <= 1:
            raise ConfigError(f"{where}.access_intensity must lie in [0, 1]")
        raw_pages = _field(td, "pages", where, Mapping, default={})
        pages = {}
        for key, count in raw_pages.items():
            try:
                node = int(key)
            except ValueError:
                raise ConfigError(f"{where}.pages: bad node key {key!r}") from None
            if node not in topology.node_ids:
                raise ConfigError(f"{where}.pages: node {node} does not exist")
            if not isinstance(count, int) or count < 0:
                raise ConfigError(f"{where}.pages[{key}] must be a non-negative integer")
            pages[node] = count
        if profile.sharing == "high":
            ai = min(1.0, ai + 0.2)
        if profile.exchange == "high":
            pages = _split_for_exchange(pages, len(topology.nodes))
        affinity = all_cores
        if "affinity" in td:
            affinity = _cores(td["affinity"], f"{where}.affinity")
        pins = _cores(td["pins"], f"{where}.pins") if td.get("pins") is not None else None
        for label, cores in (("affinity", affinity), ("pins", pins)):
            if cores is not None and (not cores or not cores <= all_cores):
                raise ConfigError(f"{where}.{label} must be a non-empty subset of the host's cores")
        comm = td.get("comm") or profile.name
        if not isinstance(comm, str):
            raise ConfigError(f"{where}.comm must be a string")
        tasks.append(SimTask(
            pid=pid, work_total=work_total, pages=pages, affinity=affinity,
            profile=profile, importance=importance, base_rate=base_rate,
            access_intensity=ai, comm=comm, pins=pins, last_cpu=min(affinity)))
    host = SimHost(topology, tasks, 0.0, params, name=str(doc.get("name", "")))
    return host


def load_scenario(text: str) -> SimHost:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"scenario is not valid JSON: {exc}") from None
    return scenario_from_dict(doc)


def frozen_slowdown(task: SimTask, host: SimHost) -> float:
    """1 - effective_rate / base_rate for a task with a running core."""
    return 1.0 - effective_rate(task, host) / task.base_rate


def builtin_scenarios() -> list:
    """Names of the scenarios shipped with the package."""
    root = resources.files(__package__).joinpath("scenarios")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def read_scenario(name_or_path: str) -> tuple:
    """Load a scenario file, or a bundled one by name; returns ``(host, text)``."""
    if os.path.exists(name_or_path):
        with open(name_or_path) as f:
            text = f.read()
    elif name_or_path in builtin_scenarios():
        text = resources.files(__package__).joinpath(
            "scenarios", name_or_path + ".json").read_text()
    else:
        raise ConfigError(f"no scenario file or builtin scenario named {name_or_path!r}")
    return load_scenario(text), text
