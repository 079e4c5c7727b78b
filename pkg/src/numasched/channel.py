"""Bounded single-producer queue that drops the oldest item when full."""

from __future__ import annotations

import collections
import threading
import time
from typing import Any, Optional


class QueueClosed(Exception):
    pass


class DropOldestQueue:
    """A small bounded queue favouring fresh data over complete data.

    ``put`` never blocks: when the queue is at capacity the oldest unconsumed
    item is discarded. ``get`` blocks until an item arrives, the timeout
    expires (returns None) or the queue is closed and drained (raises
    :class:`QueueClosed`).
    """

    def __init__(self, capacity: int = 4):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: collections.deque = collections.deque()
        self._cond = threading.Condition()
        self._closed = False
        self.dropped = 0

    def put(self, item: Any) -> None:
        with self._cond:
            if self._closed:
                raise QueueClosed()
            if len(self._items) >= self.capacity:
                self._items.popleft()
                self.dropped += 1
            self._items.append(item)
            self._cond.notify()

    def get(self, timeout: Optional[float] = None) -> Any:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while not self._items:
                if self._closed:
                    raise QueueClosed()
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return None
                self._cond.wait(remaining)
            return self._items.popleft()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    @property
    def closed(self) -> bool:
        return self._closed

    def __len__(self) -> int:
        with self._cond:
            return len(self._items)
