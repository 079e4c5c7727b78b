"""Render a SimHost as procfs/sysfs file trees the live monitor can read."""

from __future__ import annotations

import os
import shutil
from typing import Mapping

from ..topology import NODE_DIR, PAGE_SIZE, format_cpulist
from .model import SimHost, SimTask

# flags of an ordinary user process (no PF_KTHREAD)
_USER_FLAGS = 0x400100
_REGION_BASE = 0x7F0000000000
_REGION_STRIDE = 0x10000000


def stat_line(task: SimTask) -> str:
    state = "R" if task.running_core is not None else "S"
    resident = task.total_pages
    fields = [
        str(task.pid), f"({task.comm})", state,
        "1", str(task.pid), str(task.pid), "0", "-1", str(_USER_FLAGS),  # 4-9
        "0", "0", "0", "0",  # 10-13 fault counters
        str(task.utime_ticks), "0", "0", "0",  # 14-17 utime stime cutime cstime
        "20", "0", "1", "0", "0",  # 18-22 priority nice threads itreal starttime
        str(resident * PAGE_SIZE), str(resident), "18446744073709551615",  # 23-25
        "0", "0", "0", "0", "0",  # 26-30
        "0", "0", "0", "0", "0", "0", "0",  # 31-37
        "17", str(task.last_cpu), "0", "0", "0", "0", "0",  # 38-44
        "0", "0", "0", "0", "0", "0", "0", "0",  # 45-52
    ]
    assert len(fields) == 52
    return " ".join(fields) + "\n"


def numa_maps_text(task: SimTask) -> str:
    lines = []
    for node, count in task.resident().items():
        addr = _REGION_BASE + node * _REGION_STRIDE
        lines.append(f"{addr:x} default anon={count} dirty={count} N{node}={count} "
                     f"kernelpagesize_kB={PAGE_SIZE // 1024}")
    lines.append(f"{0x400000:x} default file=/usr/lib/sim/libsim.so mapped=0 "
                 f"kernelpagesize_kB={PAGE_SIZE // 1024}")
    return "\n".join(lines) + "\n"


def render_procfs(host: SimHost) -> dict:
    """Relative path -> contents for every live task; finished tasks have exited."""
    tree = {}
    for t in host.live_tasks():
        tree[f"{t.pid}/stat"] = stat_line(t)
        tree[f"{t.pid}/numa_maps"] = numa_maps_text(t)
    return tree


def render_sysfs(host: SimHost) -> dict:
    topo = host.current_topology()
    tree = {}
    for node in topo.nodes:
        base = os.path.join(NODE_DIR, f"node{node.id}")
        kb = PAGE_SIZE // 1024
        tree[os.path.join(base, "cpulist")] = format_cpulist(node.core_ids) + "\n"
        tree[os.path.join(base, "meminfo")] = (
            f"Node {node.id} MemTotal:       {node.mem_total_pages * kb} kB\n"
            f"Node {node.id} MemFree:        {node.mem_free_pages * kb} kB\n"
            f"Node {node.id} MemUsed:        "
            f"{(node.mem_total_pages - node.mem_free_pages) * kb} kB\n")
        tree[os.path.join(base, "distance")] = " ".join(map(str, topo.distances[node.id])) + "\n"
    return tree


def write_tree(tree: Mapping[str, str], root: str, clean: bool = False) -> str:
    if clean and os.path.isdir(root):
        shutil.rmtree(root)
    os.makedirs(root, exist_ok=True)
    for rel, text in tree.items():
        path = os.path.join(root, rel)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, "w") as f:
            f.write(text)
    return root


def materialize(host: SimHost, root: str) -> tuple:
    """Write ``<root>/proc`` and ``<root>/sys``; returns both paths."""
    proc = write_tree(render_procfs(host), os.path.join(root, "proc"), clean=True)
    sys_ = write_tree(render_sysfs(host), os.path.join(root, "sys"), clean=True)
    return proc, sys_
