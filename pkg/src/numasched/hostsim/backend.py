"""SystemBackend implementation that mutates a SimHost."""

from __future__ import annotations

from typing import Iterable

from ..errors import BackendError
from .model import SimHost, SimTask


class SimBackend:
    MUTATIONS = ("set_affinity", "migrate_pages")

    def __init__(self, host: SimHost):
        self.host = host
        self.calls: list = []

    def _task(self, pid: int) -> SimTask:
        try:
            task = self.host.task(pid)
        except KeyError:
            raise BackendError(f"no such process {pid}") from None
        if task.finished:
            raise BackendError(f"process {pid} has exited")
        return task

    def set_affinity(self, pid: int, cores: Iterable[int]) -> None:
        cores = frozenset(cores)
        self.calls.append(("set_affinity", pid, cores))
        task = self._task(pid)
        if not cores:
            raise BackendError("empty affinity set")
        unknown = cores - set(self.host.topology.all_cores)
        if unknown:
            raise BackendError(f"unknown cpus {sorted(unknown)}")
        task.affinity = cores
        if task.running_core not in cores:
            task.running_core = None

    def migrate_pages(self, pid: int, from_nodes: Iterable[int], to_node: int) -> int:
        from_nodes = frozenset(from_nodes)
        self.calls.append(("migrate_pages", pid, from_nodes, to_node))
        task = self._task(pid)
        if to_node not in self.host.topology.node_ids:
            raise BackendError(f"unknown node {to_node}")
        moved = 0
        for node in from_nodes:
            if node == to_node:
                continue
            moved += task.pages.get(node, 0)
            if node in task.pages:
                task.pages[node] = 0
        if moved:
            task.pages[to_node] = task.pages.get(to_node, 0) + moved
        return 0

    def current_affinity(self, pid: int) -> frozenset:
        self.calls.append(("current_affinity", pid))
        return self._task(pid).affinity

    @property
    def mutations(self) -> list:
        return [c for c in self.calls if c[0] in self.MUTATIONS]


def sim_backend(host: SimHost) -> SimBackend:
    return SimBackend(host)
