"""NUMA topology discovery from sysfs-style trees.

Layout read beneath ``fs_root`` (``/sys`` on a live host)::

    devices/system/node/node<k>/cpulist
    devices/system/node/node<k>/meminfo
    devices/system/node/node<k>/distance
"""

from __future__ import annotations

import logging
import os
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Optional, Sequence

from .errors import ParseError, TopologyError

log = logging.getLogger(__name__)

PAGE_SIZE = 4096
LOCAL_DISTANCE = 10
REMOTE_DISTANCE = 20

NODE_DIR = os.path.join("devices", "system", "node")

_NODE_RE = re.compile(r"^node(\d+)$")
_MEMINFO_RE = re.compile(r"^Node\s+(\d+)\s+(\w+):\s+(\d+)(?:\s*kB)?\s*$")


@dataclass(frozen=True)
class NumaNode:
    id: int
    core_ids: frozenset
    mem_total_pages: int
    mem_free_pages: int

    def __post_init__(self):
        object.__setattr__(self, "core_ids", frozenset(self.core_ids))
        if not self.core_ids:
            raise TopologyError(f"node{self.id} has no cores")
        if self.mem_free_pages > self.mem_total_pages:
            raise TopologyError(
                f"node{self.id}: free pages {self.mem_free_pages} exceed "
                f"total {self.mem_total_pages}")
        if self.mem_total_pages <= 0:
            raise TopologyError(f"node{self.id} has no memory")


@dataclass(frozen=True)
class NumaTopology:
    nodes: tuple
    distances: tuple = field(default=())

    def __post_init__(self):
        nodes = tuple(sorted(self.nodes, key=lambda n: n.id))
        object.__setattr__(self, "nodes", nodes)
        if not nodes:
            raise TopologyError("no NUMA topology")
        if [n.id for n in nodes] != list(range(len(nodes))):
            raise TopologyError(
                f"node ids must be dense 0..{len(nodes) - 1}, got {[n.id for n in nodes]}")

        seen: set = set()
        for node in nodes:
            overlap = seen & node.core_ids
            if overlap:
                raise TopologyError(
                    f"cores {format_cpulist(overlap)} of node{node.id} "
                    f"also belong to another node")
            seen |= node.core_ids

        if not self.distances:
            dist = default_distances(len(nodes))
        else:
            dist = tuple(tuple(int(v) for v in row) for row in self.distances)
        object.__setattr__(self, "distances", dist)
        if len(dist) != len(nodes) or any(len(row) != len(nodes) for row in dist):
            raise TopologyError(
                f"distance matrix must be {len(nodes)}x{len(nodes)}")
        for i, row in enumerate(dist):
            if any(v <= 0 for v in row):
                raise TopologyError(f"non-positive distance in row {i}")
            if row[i] != min(row):
                raise TopologyError(
                    f"node{i}: local distance {row[i]} is not the row minimum")

    @property
    def node_ids(self) -> list:
        return [n.id for n in self.nodes]

    @cached_property
    def core_to_node(self) -> dict:
        return {c: n.id for n in self.nodes for c in n.core_ids}

    @cached_property
    def all_cores(self) -> tuple:
        return tuple(sorted(self.core_to_node))

    def node(self, node_id: int) -> NumaNode:
        return self.nodes[node_id]

    def node_of(self, core: int) -> int:
        return self.core_to_node[core]

    def capacity(self, node_id: int) -> int:
        return self.nodes[node_id].mem_total_pages

    def node_of_cores(self, cores: Iterable[int]) -> Optional[int]:
        """Node holding all of ``cores``, or None if they span several nodes."""
        owners = {self.core_to_node[c] for c in cores}
        return owners.pop() if len(owners) == 1 else None

    def to_dict(self) -> dict:
        return {
            "nodes": [
                {
                    "id": n.id,
                    "cores": format_cpulist(n.core_ids),
                    "mem_total_pages": n.mem_total_pages,
                    "mem_free_pages": n.mem_free_pages,
                }
                for n in self.nodes
            ],
            "distances": [list(row) for row in self.distances],
        }


def default_distances(count: int) -> tuple:
    return tuple(
        tuple(LOCAL_DISTANCE if i == j else REMOTE_DISTANCE for j in range(count))
        for i in range(count))


def parse_cpulist(text: str) -> set:
    """Expand a sysfs cpulist such as ``"0-3,8"`` into a set of CPU ids."""
    text = text.strip()
    cpus: set = set()
    if not text:
        return cpus
    for token in text.split(","):
        token = token.strip()
        lo, sep, hi = token.partition("-")
        try:
            start = int(lo)
            end = int(hi) if sep else start
        except ValueError:
            raise ParseError(f"bad cpulist token {token!r}") from None
        if start < 0 or end < start:
            raise ParseError(f"bad cpulist token {token!r}")
        cpus.update(range(start, end + 1))
    return cpus


def format_cpulist(cpus: Iterable[int]) -> str:
    """Canonical range form of a CPU set; inverse of :func:`parse_cpulist`."""
    ids = sorted(set(cpus))
    parts = []
    i = 0
    while i < len(ids):
        j = i
        while j + 1 < len(ids) and ids[j + 1] == ids[j] + 1:
            j += 1
        parts.append(str(ids[i]) if i == j else f"{ids[i]}-{ids[j]}")
        i = j + 1
    return ",".join(parts)


def parse_distance_row(text: str) -> list:
    tokens = text.split()
    if not tokens:
        raise ParseError("empty distance row")
    try:
        return [int(t, 10) for t in tokens]
    except ValueError as exc:
        raise ParseError(f"bad distance row {text.strip()!r}: {exc}") from None


def parse_meminfo(text: str) -> tuple:
    """Return ``(mem_total_pages, mem_free_pages)`` from a per-node meminfo file."""
    values = {}
    for line in text.splitlines():
        m = _MEMINFO_RE.match(line.strip())
        if m and m.group(2) in ("MemTotal", "MemFree"):
            values[m.group(2)] = int(m.group(3)) * 1024 // PAGE_SIZE
    missing = [k for k in ("MemTotal", "MemFree") if k not in values]
    if missing:
        raise ParseError(f"meminfo lacks {', '.join(missing)}")
    return values["MemTotal"], values["MemFree"]


def _read(path: str) -> str:
    with open(path) as f:
        return f.read()


def discover_topology(fs_root: str = "/sys") -> NumaTopology:
    base = os.path.join(fs_root, NODE_DIR)
    try:
        entries = os.listdir(base)
    except OSError:
        raise TopologyError(f"no NUMA topology under {base}") from None

    ids = sorted(int(m.group(1)) for m in map(_NODE_RE.match, entries) if m)
    if 0 not in ids:
        raise TopologyError(f"no NUMA topology under {base} (node0 missing)")
    if ids != list(range(len(ids))):
        raise TopologyError(f"sparse NUMA node ids {ids} are not supported")

    nodes = []
    rows = []
    for node_id in ids:
        node_dir = os.path.join(base, f"node{node_id}")
        current = "cpulist"
        try:
            cores = parse_cpulist(_read(os.path.join(node_dir, "cpulist")))
            current = "meminfo"
            total, free = parse_meminfo(_read(os.path.join(node_dir, "meminfo")))
            current = "distance"
            dist_path = os.path.join(node_dir, "distance")
            if os.path.exists(dist_path):
                rows.append(parse_distance_row(_read(dist_path)))
            else:
                rows.append(None)
        except (OSError, ParseError) as exc:
            raise TopologyError(f"node{node_id}/{current}: {exc}") from None
        nodes.append(NumaNode(node_id, frozenset(cores), total, free))

    count = len(nodes)
    defaults = default_distances(count)
    distances = tuple(
        tuple(row) if row is not None else defaults[i] for i, row in enumerate(rows))
    topo = NumaTopology(tuple(nodes), distances)
    log.debug("discovered %d NUMA nodes under %s", count, base)
    return topo


def build_topology(cores_per_node: Sequence[Iterable[int]], mem_total_pages: Sequence[int],
                   distances: Optional[Sequence[Sequence[int]]] = None) -> NumaTopology:
    """Convenience constructor with free memory equal to total memory."""
    nodes = tuple(
        NumaNode(i, frozenset(cores), mem, mem)
        for i, (cores, mem) in enumerate(zip(cores_per_node, mem_total_pages)))
    return NumaTopology(nodes, tuple(tuple(r) for r in distances) if distances else ())
