"""Deterministic discrete-event core.

Time is an integer count of nanoseconds.  Events at equal times run in the
order they were scheduled.
"""

from __future__ import annotations

import enum
import heapq
from typing import Any, Callable, NamedTuple, Optional

NS = 1
US = 1_000
MS = 1_000_000
SECOND = 1_000_000_000


def us(value: float) -> int:
    return int(round(value * US))


def seconds(value: float) -> int:
    return int(round(value * SECOND))


def serialization_ns(size_bytes: int, rate_bps: int) -> int:
    """Time to clock ``size_bytes`` onto a ``rate_bps`` wire, rounded up."""
    return -(-size_bytes * 8 * SECOND // rate_bps)


class EventKind(enum.Enum):
    PACKET_ARRIVAL = "packet_arrival"
    TRANSMIT_COMPLETE = "transmit_complete"
    RWNDQ_TICK = "rwndq_tick"
    APP_START = "app_start"
    RTO_EXPIRY = "rto_expiry"
    SAMPLE_TICK = "sample_tick"


class Event(NamedTuple):
    time: int
    sequence: int
    action: Callable[..., Any]
    args: tuple


class SchedulingError(AssertionError):
    pass


class Simulator:
    def __init__(self):
        self.now = 0
        self._heap: list[Event] = []
        self._seq = 0
        self.executed = 0
        self.trace: Optional[Callable[[int, Callable, tuple], None]] = None

    def schedule(self, time: int, action: Callable[..., Any], *args) -> None:
        if time < self.now:
            raise SchedulingError(f"event at {time}ns scheduled in the past (clock {self.now}ns)")
        self._seq += 1
        heapq.heappush(self._heap, (time, self._seq, action, args))

    def schedule_in(self, delay: int, action: Callable[..., Any], *args) -> None:
        self.schedule(self.now + delay, action, *args)

    @property
    def pending(self) -> int:
        return len(self._heap)

    def peek(self) -> Optional[Event]:
        return Event(*self._heap[0]) if self._heap else None

    def run_until(self, t_end: int) -> int:
        """Dispatch events with time <= ``t_end``; return the final clock.

        The clock is left where the last event put it if the queue runs dry,
        otherwise it is advanced to ``t_end``.
        """
        heap = self._heap
        pop = heapq.heappop
        trace = self.trace
        n = 0
        while heap:
            if heap[0][0] > t_end:
                self.now = t_end
                break
            t, _, action, args = pop(heap)
            self.now = t
            n += 1
            if trace is not None:
                trace(t, action, args)
            action(*args)
        self.executed += n
        return self.now
