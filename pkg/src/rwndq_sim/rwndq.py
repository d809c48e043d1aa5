"""Switch-side receive-window queue control.

Each switch port keeps a handful of counters: how many TCP connections cross
it, an aggregate window budget for the port (``localwnd``) and the per-flow
share of that budget (``wnd``).  A periodic daemon steers ``localwnd`` so the
port's queue hovers around a target occupancy; the packet hook counts
connections from SYN-ACK and FIN/RST segments and clamps the receive window
of every ACK headed back to the senders to ``wnd``.

No per-flow state is kept here.  All integer arithmetic mirrors the C of the
reference kernel module: divisions by the connection count floor, the
``incr / M`` average truncates toward zero.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Optional, TextIO

from .wirecodec import NotTcpError, TcpFlags, parse_segment

MAX_WINDOW = 65535
TCP_MIN_MSS = 536
DEFAULT_MSS = 1460

SYN = int(TcpFlags.SYN)
ACK = int(TcpFlags.ACK)
FIN = int(TcpFlags.FIN)
RST = int(TcpFlags.RST)


@dataclass(frozen=True)
class RwndqConfig:
    m: int = 5
    tick_interval_us: int = 100
    target_fraction: Fraction = Fraction(1, 4)
    tcp_min_mss: int = TCP_MIN_MSS
    default_mss: int = DEFAULT_MSS

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be a positive integer")
        if self.tick_interval_us <= 0:
            raise ValueError("tick_interval_us must be positive")
        if not 0 < self.target_fraction <= 1:
            raise ValueError("target_fraction must lie in (0, 1]")

    def target_for(self, limit: int) -> int:
        frac = Fraction(self.target_fraction)
        if frac == Fraction(1, 4):
            return limit >> 2
        return limit * frac.numerator // frac.denominator

    def check_rtt(self, base_rtt_us: float) -> None:
        """The daemon must run faster than the network's round trip."""
        if self.tick_interval_us >= base_rtt_us:
            raise ValueError(
                f"tick interval {self.tick_interval_us}us is not below the base RTT {base_rtt_us}us"
            )


@dataclass(slots=True)
class PortState:
    limit: int
    target: int = -1
    mss: int = DEFAULT_MSS
    tcp_min_mss: int = TCP_MIN_MSS
    conncount: int = 0
    localwnd: int = 0
    wnd: int = MAX_WINDOW
    incr: int = 0
    slowstart: bool = False
    update_count: int = 0
    # bookkeeping, not part of the control law
    anomalies: int = 0
    activations: int = 0
    slowstart_entries: int = 0
    commits: int = 0

    def __post_init__(self):
        if self.target < 0:
            self.target = self.limit >> 2

    @classmethod
    def for_queue(cls, limit: int, config: RwndqConfig = RwndqConfig(), mss: Optional[int] = None) -> "PortState":
        return cls(
            limit=limit,
            target=config.target_for(limit),
            mss=config.default_mss if mss is None else mss,
            tcp_min_mss=config.tcp_min_mss,
        )

    @property
    def active(self) -> bool:
        return self.conncount > 0


class Action(enum.IntFlag):
    """What the packet hook did to a segment; forwarding is unconditional."""

    NONE = 0
    OPEN = 1
    CLOSE = 2
    REWRITE = 4


_OPEN = int(Action.OPEN)
_CLOSE = int(Action.CLOSE)
_REWRITE = int(Action.REWRITE)
_FIN_RST = FIN | RST


def _activate(port: PortState) -> None:
    port.localwnd = port.target
    port.slowstart = True
    port.incr = 0
    port.update_count = 0
    port.activations += 1
    port.slowstart_entries += 1


def _join(port: PortState) -> None:
    port.conncount += 1
    if port.conncount == 1:
        _activate(port)
    if port.conncount >= 2:
        port.wnd = port.wnd * (port.conncount - 1) // port.conncount


def on_flow_open(ingress: PortState, egress: PortState) -> None:
    """A SYN-ACK crossed the switch: one more flow on both ports."""
    _join(ingress)
    _join(egress)


def on_flow_close(ingress: PortState) -> None:
    """A FIN or RST arrived on ``ingress``: one flow fewer there.

    A close on a port with no flows is recorded as an anomaly and otherwise
    ignored.
    """
    if ingress.conncount <= 0:
        ingress.anomalies += 1
        return
    ingress.conncount -= 1
    if ingress.conncount >= 1:
        ingress.wnd = ingress.wnd * (ingress.conncount + 1) // ingress.conncount


def maybe_rewrite_ack(ingress: PortState, segment) -> bool:
    """Shrink the advertised window of an ACK to the port's fair share.

    ``segment`` is anything exposing integer ``flags`` and an assignable
    ``window``; a :class:`~rwndq_sim.wirecodec.TcpSegmentView` patches its
    checksum on assignment.
    """
    if segment.flags & ACK and ingress.wnd < segment.window:
        segment.window = ingress.wnd
        return True
    return False


def intercept(
    segment,
    ingress: PortState,
    egress: PortState,
    dedup: Optional[Callable[[object, int], bool]] = None,
) -> int:
    """Run the per-packet hook on one forwarded TCP segment.

    Order is fixed: connection setup, then teardown, then the window check.
    ``dedup(segment, Action.OPEN | Action.CLOSE)`` may veto counting a
    retransmitted SYN-ACK or FIN a second time.  Returns a bitmask of
    :class:`Action` values; the segment is always forwarded.
    """
    done = 0
    flags = segment.flags
    if flags & SYN and flags & ACK:
        if dedup is None or dedup(segment, _OPEN):
            on_flow_open(ingress, egress)
            done = _OPEN
    if flags & _FIN_RST:
        if dedup is None or dedup(segment, _CLOSE):
            on_flow_close(ingress)
            done |= _CLOSE
    if flags & ACK and ingress.wnd < segment.window:
        segment.window = ingress.wnd
        done |= _REWRITE
    return done


def intercept_bytes(buffer: bytearray, ingress: PortState, egress: PortState) -> int:
    """Packet hook on a raw IPv4 datagram; non-TCP traffic passes untouched."""
    try:
        view = parse_segment(buffer)
    except NotTcpError:
        return 0
    return intercept(view, ingress, egress)


def _trunc_div(a: int, b: int) -> int:
    q = abs(a) // abs(b)
    return q if (a >= 0) == (b > 0) else -q


def tick(port: PortState, backlog: int, m: int) -> bool:
    """One window-update step for an active port; returns True on a commit."""
    if port.conncount <= 0:
        return False
    if port.slowstart and backlog >= port.target:
        port.slowstart = False
    if not port.slowstart:
        port.incr += port.target - backlog
    else:
        port.incr += 2 * port.mss
    committed = False
    if port.update_count == m:
        c = port.conncount
        port.localwnd += _trunc_div(port.incr, m)
        port.localwnd = min(port.localwnd, MAX_WINDOW * c)
        port.localwnd = max(port.localwnd, port.tcp_min_mss * c)
        port.wnd = port.localwnd // c
        port.incr = 0
        port.update_count = 0
        port.commits += 1
        committed = True
    else:
        port.update_count += 1
    return committed


def daemon_pass(ports: Iterable[tuple[PortState, int]], m: int) -> bool:
    """Tick every active port once; True if any port was active."""
    any_active = False
    for port, backlog in ports:
        if port.conncount > 0:
            any_active = True
            tick(port, backlog, m)
    return any_active


def commit_schedule(config: RwndqConfig, active_ports: Iterable[PortState], now_us: int) -> Optional[int]:
    """Next daemon deadline in microseconds, or None when every port is idle."""
    if any(p.conncount > 0 for p in active_ports):
        return now_us + config.tick_interval_us
    return None


@dataclass
class DaemonTimer:
    """Arming discipline of the update daemon: at most one pending expiry.

    ``arms`` counts idle-to-armed transitions, ``rearms`` the periodic
    restarts from an expiry.
    """

    armed: bool = False
    arms: int = 0
    rearms: int = 0

    def arm(self) -> bool:
        """Return True if a new expiry must be scheduled."""
        if self.armed:
            return False
        self.armed = True
        self.arms += 1
        return True

    def expired(self, rearm: bool) -> bool:
        self.armed = rearm
        if rearm:
            self.rearms += 1
        return rearm


SNAPSHOT_FIELDS = ("time_us", "port", "conncount", "localwnd", "wnd", "backlog")


@dataclass
class StateLog:
    """Collects per-port state rows for CSV export."""

    rows: list = field(default_factory=list)

    def record(self, time_us: float, port_name: str, state: PortState, backlog: int) -> None:
        self.rows.append((time_us, port_name, state.conncount, state.localwnd, state.wnd, backlog))

    def write_csv(self, fh: TextIO) -> None:
        w = csv.writer(fh)
        w.writerow(SNAPSHOT_FIELDS)
        w.writerows(self.rows)
