"""System backends: the operations a plan is applied through.

``LinuxBackend`` wraps ``sched_setaffinity(2)`` and ``migrate_pages(2)``.
The simulated backend lives in :mod:`numasched.hostsim.backend`.
"""

from __future__ import annotations

import ctypes
import ctypes.util
import logging
import os
import platform
from typing import Iterable, Protocol, runtime_checkable

from .errors import BackendError

log = logging.getLogger(__name__)

_SYS_MIGRATE_PAGES = {
    "x86_64": 256,
    "aarch64": 238,
    "i386": 294,
    "i686": 294,
    "ppc64le": 258,
    "ppc64": 258,
    "s390x": 287,
    "riscv64": 238,
}


@runtime_checkable
class SystemBackend(Protocol):
    def set_affinity(self, pid: int, cores: Iterable[int]) -> None: ...

    def migrate_pages(self, pid: int, from_nodes: Iterable[int], to_node: int) -> int:
        """Move the pid's pages; return the number of pages that could not be moved."""
        ...

    def current_affinity(self, pid: int) -> frozenset: ...


def _nodemask(nodes: Iterable[int], nwords: int):
    bits = 8 * ctypes.sizeof(ctypes.c_ulong)
    mask = (ctypes.c_ulong * nwords)()
    for n in nodes:
        mask[n // bits] |= 1 << (n % bits)
    return mask


class LinuxBackend:
    """Live backend. Affinity is applied to every thread of the process."""

    def __init__(self, proc_root: str = "/proc"):
        self.proc_root = proc_root
        self._libc = None

    def _syscall(self):
        if self._libc is None:
            self._libc = ctypes.CDLL(ctypes.util.find_library("c") or None, use_errno=True)
        return self._libc

    def _threads(self, pid: int) -> list:
        try:
            return [int(t) for t in os.listdir(os.path.join(self.proc_root, str(pid), "task"))]
        except FileNotFoundError:
            raise BackendError(f"pid {pid} does not exist") from None
        except OSError:
            return [pid]

    def set_affinity(self, pid: int, cores: Iterable[int]) -> None:
        cores = set(cores)
        if not cores:
            raise BackendError("empty affinity set")
        for tid in self._threads(pid):
            try:
                os.sched_setaffinity(tid, cores)
            except ProcessLookupError:
                # thread exited meanwhile
                continue
            except OSError as exc:
                raise BackendError(f"sched_setaffinity({tid}): {exc}") from None

    def migrate_pages(self, pid: int, from_nodes: Iterable[int], to_node: int) -> int:
        nr = _SYS_MIGRATE_PAGES.get(platform.machine())
        if nr is None:
            raise BackendError(f"migrate_pages unsupported on {platform.machine()}")
        from_nodes = sorted(set(from_nodes))
        bits = 8 * ctypes.sizeof(ctypes.c_ulong)
        maxnode = max(from_nodes + [to_node]) + 1
        nwords = (maxnode + bits - 1) // bits
        old = _nodemask(from_nodes, nwords)
        new = _nodemask([to_node], nwords)
        libc = self._syscall()
        libc.syscall.restype = ctypes.c_long
        ret = libc.syscall(ctypes.c_long(nr), ctypes.c_long(pid),
                           ctypes.c_ulong(nwords * bits), old, new)
        if ret < 0:
            err = ctypes.get_errno()
            raise BackendError(f"migrate_pages({pid}): {os.strerror(err)}")
        return int(ret)

    def current_affinity(self, pid: int) -> frozenset:
        try:
            return frozenset(os.sched_getaffinity(pid))
        except OSError as exc:
            raise BackendError(f"sched_getaffinity({pid}): {exc}") from None


def can_migrate() -> bool:
    """Moving other users' pages and affinities needs root (CAP_SYS_NICE)."""
    return hasattr(os, "geteuid") and os.geteuid() == 0


class RecordingBackend:
    """Wraps another backend and logs every call; used for dry-run auditing."""

    MUTATIONS = ("set_affinity", "migrate_pages")

    def __init__(self, inner):
        self.inner = inner
        self.calls: list = []

    def set_affinity(self, pid, cores):
        self.calls.append(("set_affinity", pid, frozenset(cores)))
        return self.inner.set_affinity(pid, cores)

    def migrate_pages(self, pid, from_nodes, to_node):
        self.calls.append(("migrate_pages", pid, frozenset(from_nodes), to_node))
        return self.inner.migrate_pages(pid, from_nodes, to_node)

    def current_affinity(self, pid):
        self.calls.append(("current_affinity", pid))
        return self.inner.current_affinity(pid)

    @property
    def mutations(self) -> list:
        return [c for c in self.calls if c[0] in self.MUTATIONS]


__all__ = ["SystemBackend", "LinuxBackend", "RecordingBackend", "can_migrate"]
