"""Output-queued switch with byte-limited drop-tail ports.

Each port serializes packets at line rate from a FIFO.  The queue keeps its
own service schedule: when a packet is accepted its transmission start and
finish times are fixed immediately (work-conserving FIFO), so the engine
only has to schedule the arrival at the far end of the link.  Occupancy is
brought up to date lazily whenever the queue is touched.
"""

from __future__ import annotations

from collections import deque
from typing import IO, Optional

from . import rwndq
from .packet import IPPROTO_TCP
from .rwndq import Action, DaemonTimer, PortState, RwndqConfig
from .simengine.core import SECOND, US, Simulator


_OPEN = int(Action.OPEN)


class DropTailQueue:
    """Byte FIFO with tail drop (Linux ``bfifo``) in front of a serializer.

    ``backlog`` counts bytes waiting for the wire; the packet currently being
    clocked out is no longer part of it.  ``limit=None`` makes the queue
    unbounded (end-host transmit queues).
    """

    __slots__ = (
        "limit",
        "rate_bps",
        "backlog",
        "drops",
        "dropped_bytes",
        "offered_pkts",
        "offered_bytes",
        "accepted_bytes",
        "tx_pkts",
        "tx_bytes",
        "busy_until",
        "max_backlog",
        "_fifo",
        "_head_started",
        "_area",
        "_area_t",
        "_bit_ns",
    )

    def __init__(self, limit: Optional[int], rate_bps: int):
        if rate_bps <= 0:
            raise ValueError("line rate must be positive")
        self.limit = limit
        self.rate_bps = rate_bps
        self.backlog = 0
        self.drops = 0
        self.dropped_bytes = 0
        self.offered_pkts = 0
        self.offered_bytes = 0
        self.accepted_bytes = 0
        self.tx_pkts = 0
        self.tx_bytes = 0
        self.busy_until = 0
        self.max_backlog = 0
        # (start, finish, size) for accepted packets not yet fully sent
        self._fifo: deque = deque()
        self._head_started = False
        self._area = 0
        self._area_t = 0
        self._bit_ns = 8 * SECOND

    def drain(self, now: int) -> tuple[int, Optional[int]]:
        """Advance the service schedule to ``now``.

        Returns the number of packets whose transmission completed since the
        previous call and the next completion deadline (None when idle).
        """
        fifo = self._fifo
        done = 0
        while fifo:
            start, finish, size = fifo[0]
            if start > now:
                break
            if not self._head_started:
                self._area += self.backlog * (start - self._area_t)
                self._area_t = start
                self.backlog -= size
                self._head_started = True
            if finish <= now:
                fifo.popleft()
                self._head_started = False
                self.tx_pkts += 1
                self.tx_bytes += size
                done += 1
            else:
                break
        if now > self._area_t:
            self._area += self.backlog * (now - self._area_t)
            self._area_t = now
        return done, (fifo[0][1] if fifo else None)

    def enqueue(self, size: int, now: int) -> Optional[int]:
        """Offer a packet; return its transmission finish time or None if dropped."""
        if size <= 0:
            raise ValueError("packet size must be positive")
        fifo = self._fifo
        if fifo and fifo[0][0] <= now:
            self.drain(now)
        elif now > self._area_t:
            self._area += self.backlog * (now - self._area_t)
            self._area_t = now
        self.offered_pkts += 1
        self.offered_bytes += size
        if self.limit is not None and self.backlog + size > self.limit:
            self.drops += 1
            self.dropped_bytes += size
            return None
        self.accepted_bytes += size
        busy = self.busy_until
        if busy > now:
            finish = busy - (-size * self._bit_ns // self.rate_bps)
            fifo.append((busy, finish, size))
            self.backlog += size
            if self.backlog > self.max_backlog:
                self.max_backlog = self.backlog
        else:
            # idle port: straight onto the wire, never part of the backlog
            finish = now - (-size * self._bit_ns // self.rate_bps)
            fifo.append((now, finish, size))
            self._head_started = True
        self.busy_until = finish
        return finish

    def backlog_at(self, now: int) -> int:
        self.drain(now)
        return self.backlog

    def backlog_area(self, now: int) -> int:
        """Integral of backlog over time up to ``now`` (byte-nanoseconds)."""
        self.drain(now)
        return self._area

    def __len__(self) -> int:
        return len(self._fifo)


class Port:
    """One interface of a node: an output queue feeding a point-to-point link.

    ``jitter`` (ns) adds a random forwarding latency in ``[0, jitter)`` to
    each delivery, drawn from ``rng``.  Deliveries never overtake each other,
    so per-link FIFO order survives.  It exists to break the phase locking a
    perfectly periodic, integer-clocked drop-tail network otherwise settles
    into.
    """

    __slots__ = (
        "name",
        "node",
        "queue",
        "delay",
        "peer",
        "peer_port",
        "state",
        "link_id",
        "sim",
        "trace",
        "jitter",
        "rng",
        "_last_arrival",
    )

    def __init__(self, sim: Simulator, node, name: str, queue: DropTailQueue, delay: int):
        self.sim = sim
        self.node = node
        self.name = name
        self.queue = queue
        self.delay = delay
        self.peer = None
        self.peer_port: Optional["Port"] = None
        self.state: Optional[PortState] = None
        self.link_id: Optional[str] = None
        self.trace: Optional["PacketTrace"] = None
        self.jitter = 0
        self.rng = None
        self._last_arrival = 0

    def set_jitter(self, jitter_ns: int, rng) -> None:
        if jitter_ns < 0:
            raise ValueError("jitter must be non-negative")
        self.jitter = jitter_ns
        self.rng = rng

    @property
    def line_rate(self) -> int:
        return self.queue.rate_bps

    def connect(self, peer_port: "Port") -> None:
        self.peer = peer_port.node
        self.peer_port = peer_port

    def send(self, pkt) -> bool:
        sim = self.sim
        finish = self.queue.enqueue(pkt.size, sim.now)
        if self.trace is not None:
            self.trace.log(sim.now, "drop" if finish is None else "enq", self, pkt)
        if finish is None:
            return False
        arrival = finish + self.delay
        if self.jitter:
            arrival += int(self.rng.random() * self.jitter)
            if arrival < self._last_arrival:
                arrival = self._last_arrival
            self._last_arrival = arrival
        sim.schedule(arrival, self.peer.receive, pkt, self.peer_port)
        return True

    def __repr__(self) -> str:
        return f"Port({self.name})"


class FlowTable:
    """Remembers which (flow, direction) SYN-ACKs and FINs a switch has counted.

    Retransmitted control segments would otherwise be counted twice.
    """

    __slots__ = ("_seen", "duplicates")

    def __init__(self):
        self._seen: set = set()
        self.duplicates = 0

    def __call__(self, segment, kind: Action) -> bool:
        key = (segment.flow_id, segment.direction, int(kind))
        if key in self._seen:
            self.duplicates += 1
            return False
        self._seen.add(key)
        return True

    def __len__(self) -> int:
        return len(self._seen)


class PacketTrace:
    """Plain-text per-packet log: time_us event port flow size backlog."""

    def __init__(self, fh: IO[str]):
        self.fh = fh
        fh.write("time_us event port flow size backlog\n")

    def log(self, now: int, event: str, port: Port, pkt) -> None:
        self.fh.write(
            f"{now / US:.3f} {event} {port.name} {pkt.flow_id}/{pkt.direction} {pkt.size} {port.queue.backlog}\n"
        )


class Switch:
    """Static-route output-queued switch with an optional RWNDQ hook."""

    def __init__(self, sim: Simulator, name: str, rwndq_config: Optional[RwndqConfig] = None):
        self.sim = sim
        self.name = name
        self.ports: list[Port] = []
        self.routes: dict[str, Port] = {}
        self.no_route = 0
        self.config = rwndq_config
        self.flow_table = FlowTable()
        self.timer = DaemonTimer()
        self.daemon_passes = 0
        self.state_log: Optional[rwndq.StateLog] = None

    @property
    def rwndq_enabled(self) -> bool:
        return self.config is not None

    def add_port(self, port: Port, mss: Optional[int] = None) -> Port:
        if self.config is not None:
            limit = port.queue.limit if port.queue.limit is not None else 0
            port.state = PortState.for_queue(limit, self.config, mss)
        self.ports.append(port)
        return port

    def forward(self, pkt, ingress: Optional[Port] = None) -> Optional[Port]:
        """Routing decision only; None means no route."""
        return self.routes.get(pkt.dst)

    def receive(self, pkt, ingress: Port) -> None:
        egress = self.routes.get(pkt.dst)
        if egress is None:
            self.no_route += 1
            if ingress.trace is not None:
                ingress.trace.log(self.sim.now, "noroute", ingress, pkt)
            return
        if self.config is not None and pkt.proto == IPPROTO_TCP:
            done = rwndq.intercept(pkt, ingress.state, egress.state, self.flow_table)
            if done & _OPEN and self.timer.arm():
                self.sim.schedule_in(self.config.tick_interval_us * US, self._daemon)
        egress.send(pkt)

    def _daemon(self) -> None:
        now = self.sim.now
        self.daemon_passes += 1
        m = self.config.m
        active = False
        log = self.state_log
        for port in self.ports:
            st = port.state
            if st.conncount > 0:
                active = True
                backlog = port.queue.backlog_at(now)
                rwndq.tick(st, backlog, m)
                if log is not None:
                    log.record(now / US, port.name, st, backlog)
        if self.timer.expired(active):
            self.sim.schedule_in(self.config.tick_interval_us * US, self._daemon)

    def anomalies(self) -> int:
        return sum(p.state.anomalies for p in self.ports if p.state is not None)
