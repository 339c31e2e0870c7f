from __future__ import annotations

import itertools
import threading


class LogicalClock:
    """Integer logical time plus a global effect counter.

    ``now`` is advanced by whoever drives execution (the harness, or a tick
    thread in live mode). ``next_order`` totally orders effects that share a
    logical instant, so WAL writes can be compared against ledger records.
    """

    def __init__(self, now: int = 0):
        self.now = now
        self._order = itertools.count(1)
        self._lock = threading.Lock()

    def advance_to(self, t: int) -> None:
        if t < self.now:
            raise ValueError(f"logical time cannot go backwards ({t} < {self.now})")
        self.now = t

    def next_order(self) -> int:
        with self._lock:
            return next(self._order)
