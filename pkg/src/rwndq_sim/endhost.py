"""End hosts: a NewReno TCP model plus iperf-like and ab-like applications.

The TCP model is deliberately plain.  It honours the peer's advertised
window (the only lever the switch has), counts sequence space for SYN and
FIN like real TCP, keeps out-of-order data at the receiver and retransmits
on three duplicate ACKs or on timeout.  Omitted: SACK, timestamps, delayed
ACK heuristics, window scaling, Nagle.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

from .packet import ACK, FIN, IPPROTO_TCP, RST, SYN, Packet
from .simengine.core import MS, SECOND, Simulator
from .switchmodel import Port

INFINITE = math.inf
MAX_WINDOW = 65535


@dataclass(frozen=True)
class TcpConfig:
    mss: int = 1460
    initial_cwnd_segments: int = 10
    rto_min: int = 200 * MS
    rto_initial: int = 1 * SECOND
    max_backoff: int = 64  # rto capped at max_backoff * rto_min
    max_retransmissions: int = 15
    receive_window: int = MAX_WINDOW
    dupack_threshold: int = 3
    delayed_ack: bool = False
    carry_payload: bool = False


class TcpState(enum.Enum):
    CLOSED = "closed"
    SYN_SENT = "syn_sent"
    SYN_RCVD = "syn_rcvd"
    SLOW_START = "slow_start"
    CONGESTION_AVOIDANCE = "congestion_avoidance"
    FAST_RECOVERY = "fast_recovery"


class FlowControlMonitor:
    """Counts transmissions that would exceed min(cwnd, peer_rwnd) outstanding."""

    def __init__(self):
        self.checks = 0
        self.violations = 0
        self.first_violation: Optional[str] = None

    def check(self, flow: "TcpFlow", outstanding: int) -> None:
        self.checks += 1
        limit = min(flow.cwnd, flow.peer_rwnd)
        if outstanding > limit:
            self.violations += 1
            if self.first_violation is None:
                self.first_violation = (
                    f"flow {flow.flow_id}/{flow.direction}: outstanding {outstanding} > "
                    f"min(cwnd={flow.cwnd}, rwnd={flow.peer_rwnd})"
                )


def stream_bytes(flow_id: int, direction: int, offset: int, n: int) -> bytes:
    """Deterministic application byte stream used for integrity checks."""
    start = (flow_id * 131 + direction * 17 + offset) & 0xFF
    reps = (start + n) // 256 + 1
    return (_CYCLE * reps)[start : start + n]


_CYCLE = bytes(range(256))


class Host:
    """An end node with one NIC and a table of TCP endpoints."""

    def __init__(self, sim: Simulator, name: str):
        self.sim = sim
        self.name = name
        self.nic: Optional[Port] = None
        self.ports: list[Port] = []
        self.endpoints: dict[tuple[int, int], "TcpFlow"] = {}
        self.listeners: dict[int, Callable[[Packet], Optional["TcpFlow"]]] = {}
        self.received = 0
        self.unmatched = 0
        self.sink: Optional[Callable[[Packet], None]] = None

    def add_port(self, port: Port, mss: Optional[int] = None) -> Port:
        self.ports.append(port)
        self.nic = port
        return port

    def transmit(self, pkt: Packet) -> bool:
        return self.nic.send(pkt)

    def receive(self, pkt: Packet, ingress: Port) -> None:
        self.received += 1
        if self.sink is not None:
            self.sink(pkt)
            return
        if pkt.proto != IPPROTO_TCP:
            self.unmatched += 1
            return
        ep = self.endpoints.get((pkt.flow_id, 1 - pkt.direction))
        if ep is None:
            factory = self.listeners.get(pkt.dport) if pkt.flags & SYN and not pkt.flags & ACK else None
            if factory is None or factory(pkt) is None:
                self.unmatched += 1
            return
        ep.segment_arrived(pkt)

    def register(self, flow: "TcpFlow") -> None:
        self.endpoints[(flow.flow_id, flow.direction)] = flow


class TcpFlow:
    """One end of a TCP connection (sender and receiver halves).

    Sequence numbers start at 0 for the SYN, so payload byte ``k`` of the
    stream has sequence number ``k + 1``.  Times are integer nanoseconds.
    """

    def __init__(
        self,
        host: Host,
        flow_id: int,
        direction: int,
        remote: str,
        local_port: int,
        remote_port: int,
        config: TcpConfig = TcpConfig(),
        monitor: Optional[FlowControlMonitor] = None,
    ):
        self.host = host
        self.sim = host.sim
        self.flow_id = flow_id
        self.direction = direction
        self.remote = remote
        self.local_port = local_port
        self.remote_port = remote_port
        self.config = config
        self.monitor = monitor
        self.mss = config.mss

        self.state = TcpState.CLOSED
        self.cwnd = config.initial_cwnd_segments * config.mss
        self.ssthresh = 1 << 62
        self.peer_rwnd = MAX_WINDOW
        self.snd_una = 0
        self.snd_nxt = 0
        self.snd_max = 0
        self.recover = 0
        self.dupack_count = 0
        self.srtt: Optional[int] = None
        self.rttvar = 0
        self.rto = config.rto_initial
        self.backoff = 0
        self.retransmissions = 0
        self.timeouts = 0
        self.fast_retransmits = 0
        self.sent_segments = 0

        # application side of the send buffer
        self.app_bytes: float = 0
        self.fin_requested = False
        self.fin_acked = False

        # receive half
        self.rcv_nxt = 0
        self.peer_syn_seen = False
        self.peer_fin_seq: Optional[int] = None
        self.peer_fin_received = False
        self._ooo: list[list[int]] = []
        self.delivered = 0
        self.rx_buffer: Optional[bytearray] = bytearray() if config.carry_payload else None

        self.established_at: Optional[int] = None
        self.dead = False
        self.closed = False

        self._rto_deadline: Optional[int] = None
        self._rto_event_at: Optional[int] = None
        self._rtt_seq: Optional[int] = None
        self._rtt_start = 0

        # application callbacks
        self.on_established: Optional[Callable[["TcpFlow"], None]] = None
        self.on_data: Optional[Callable[["TcpFlow", int], None]] = None
        self.on_peer_fin: Optional[Callable[["TcpFlow"], None]] = None
        self.on_dead: Optional[Callable[["TcpFlow"], None]] = None

        host.register(self)

    # ----------------------------------------------------------- app API

    @property
    def data_end(self) -> float:
        return 1 + self.app_bytes

    @property
    def fin_seq(self) -> Optional[int]:
        return int(self.data_end) if self.fin_requested else None

    @property
    def outstanding(self) -> int:
        """Unacknowledged payload bytes (SYN/FIN sequence slots excluded)."""
        hi = self.snd_nxt if self.snd_nxt < self.data_end else self.data_end
        lo = self.snd_una if self.snd_una > 1 else 1
        return int(hi - lo) if hi > lo else 0

    def write(self, nbytes: float) -> None:
        if self.fin_requested:
            raise RuntimeError("write after close")
        self.app_bytes += nbytes
        self._try_send()

    def close(self) -> None:
        if not self.fin_requested:
            self.fin_requested = True
            self._try_send()

    def connect(self) -> None:
        self.state = TcpState.SYN_SENT
        self._send_syn()

    def accept(self, syn: Packet) -> None:
        """Passive open on an incoming SYN."""
        self.peer_syn_seen = True
        self.rcv_nxt = syn.seq + 1
        self.peer_rwnd = syn.window
        self.state = TcpState.SYN_RCVD
        self._send_syn()

    @property
    def established(self) -> bool:
        return self.established_at is not None and not self.dead

    # ------------------------------------------------------------ output

    def _emit(self, seq: int, length: int, flags: int, retransmit: bool = False) -> None:
        payload = None
        if self.config.carry_payload and length:
            payload = stream_bytes(self.flow_id, self.direction, seq - 1, length)
        if self.peer_syn_seen:
            flags |= ACK
        pkt = Packet(
            self.host.name,
            self.remote,
            self.local_port,
            self.remote_port,
            seq,
            self.rcv_nxt,
            flags,
            self.config.receive_window,
            length,
            self.flow_id,
            self.direction,
            IPPROTO_TCP,
            payload,
            retransmit,
        )
        self.sent_segments += 1
        self.host.transmit(pkt)

    def _send_syn(self, retransmit: bool = False) -> None:
        self._emit(0, 0, SYN, retransmit)
        if self.snd_nxt < 1:
            self.snd_nxt = 1
        if self.snd_max < 1:
            self.snd_max = 1
        if not retransmit:
            self._rtt_seq = 1
            self._rtt_start = self.sim.now
        self._arm_rto()

    def _send_ack(self) -> None:
        self._emit(self.snd_nxt, 0, 0)

    def _try_send(self) -> None:
        if self.established_at is None or self.dead:
            return
        mss = self.mss
        data_end = self.data_end
        sent = False
        while True:
            nxt = self.snd_nxt
            win = self.cwnd if self.cwnd < self.peer_rwnd else self.peer_rwnd
            if nxt < data_end:
                inflight = nxt - self.snd_una
                usable = win - inflight
                if usable <= 0:
                    break
                avail = data_end - nxt
                n = int(min(mss, avail, usable))
                if n < mss and n < avail and inflight > 0 and 2 * n < self.peer_rwnd:
                    # sender-side silly-window avoidance
                    break
                flags = 0
                if self.fin_requested and nxt + n == data_end:
                    flags = FIN
                retx = nxt < self.snd_max
                self._emit(nxt, n, flags, retx)
                self.snd_nxt = nxt + n + (1 if flags else 0)
                if self.monitor is not None:
                    self.monitor.check(self, self.outstanding)
                if self._rtt_seq is None and not retx:
                    self._rtt_seq = self.snd_nxt
                    self._rtt_start = self.sim.now
                sent = True
            elif self.fin_requested and nxt == data_end:
                self._emit(nxt, 0, FIN, nxt < self.snd_max)
                self.snd_nxt = nxt + 1
                sent = True
            else:
                break
            if self.snd_nxt > self.snd_max:
                self.snd_max = self.snd_nxt
        if sent:
            self._arm_rto()

    def _retransmit_head(self) -> None:
        una = self.snd_una
        self.retransmissions += 1
        self._rtt_seq = None
        if una == 0:
            self._send_syn(retransmit=True)
            return
        data_end = self.data_end
        if una < data_end:
            n = int(min(self.mss, data_end - una))
            flags = FIN if self.fin_requested and una + n == data_end and self.snd_max > data_end else 0
            self._emit(una, n, flags, True)
        elif self.fin_requested:
            self._emit(una, 0, FIN, True)

    # -------------------------------------------------------------- timer

    def _arm_rto(self) -> None:
        """(Re)start the retransmission timer if anything is outstanding."""
        if self.snd_max <= self.snd_una or self.dead:
            self._rto_deadline = None
            return
        deadline = self.sim.now + self.rto
        self._rto_deadline = deadline
        if self._rto_event_at is None or self._rto_event_at > deadline:
            self._rto_event_at = deadline
            self.sim.schedule(deadline, self._rto_fire, deadline)

    def _rto_fire(self, at: int) -> None:
        if at != self._rto_event_at:
            return
        self._rto_event_at = None
        deadline = self._rto_deadline
        if deadline is None or self.dead:
            return
        if deadline > self.sim.now:
            self._rto_event_at = deadline
            self.sim.schedule(deadline, self._rto_fire, deadline)
            return
        self.on_timeout()

    def on_timeout(self) -> None:
        """Retransmission timer expiry."""
        self._rto_deadline = None
        if self.snd_max <= self.snd_una:
            return
        self.timeouts += 1
        self.backoff += 1
        if self.backoff > self.config.max_retransmissions:
            self._die()
            return
        mss = self.mss
        if self.snd_una >= 1:
            self.ssthresh = max(self.cwnd // 2, 2 * mss)
            self.cwnd = mss
            self.state = TcpState.SLOW_START
        self.rto = min(self.rto * 2, self.config.max_backoff * self.config.rto_min)
        self.dupack_count = 0
        self.recover = self.snd_max
        self.snd_nxt = self.snd_una
        self._rtt_seq = None
        if self.snd_una == 0 or (self.state is TcpState.SYN_RCVD):
            self.retransmissions += 1
            self._send_syn(retransmit=True)
            return
        self.retransmissions += 1
        self._try_send()
        self._arm_rto()

    def _die(self) -> None:
        self.dead = True
        self._rto_deadline = None
        if self.on_dead is not None:
            self.on_dead(self)

    # ------------------------------------------------------------- input

    def segment_arrived(self, pkt: Packet) -> None:
        if self.dead:
            return
        flags = pkt.flags
        if flags & RST:
            self._die()
            return
        if flags & SYN:
            if flags & ACK:
                # SYN-ACK at the active opener
                if not self.peer_syn_seen:
                    self.peer_syn_seen = True
                    self.rcv_nxt = pkt.seq + 1
                if self.established_at is None:
                    self.on_ack(pkt.ack, pkt.window, pkt)
                else:
                    self._send_ack()
            else:
                # retransmitted SYN: our SYN-ACK was lost
                if self.state is TcpState.SYN_RCVD:
                    self._retransmit_head()
            return

        ack_pending = False
        if flags & ACK:
            self.on_ack(pkt.ack, pkt.window, pkt)
        if pkt.length or flags & FIN:
            ack_pending = self.receiver_on_data(pkt)
        if self.dead:
            return
        if ack_pending:
            before = self.sent_segments
            if self.on_data is not None and self._new_data:
                self.on_data(self, self._new_data)
            if self._fin_now and self.on_peer_fin is not None:
                self.on_peer_fin(self)
            if self.sent_segments == before and not self.dead:
                self._send_ack()
        self._check_closed()

    _new_data = 0
    _fin_now = False

    def receiver_on_data(self, pkt: Packet) -> bool:
        """Accept payload/FIN; returns True when an ACK is owed."""
        self._new_data = 0
        self._fin_now = False
        if not self.peer_syn_seen:
            return False
        start = pkt.seq
        end = start + pkt.length + (1 if pkt.flags & FIN else 0)
        if pkt.flags & FIN:
            self.peer_fin_seq = start + pkt.length
        if self.rx_buffer is not None and pkt.payload is not None:
            off = start - 1
            need = off + len(pkt.payload)
            if len(self.rx_buffer) < need:
                self.rx_buffer.extend(bytes(need - len(self.rx_buffer)))
            self.rx_buffer[off:need] = pkt.payload
        if end <= self.rcv_nxt:
            return True
        if start > self.rcv_nxt:
            self._insert_ooo(start, end)
            return True
        old = self.rcv_nxt
        new = end
        ooo = self._ooo
        while ooo and ooo[0][0] <= new:
            if ooo[0][1] > new:
                new = ooo[0][1]
            ooo.pop(0)
        self.rcv_nxt = new
        fin = self.peer_fin_seq
        data_hi = new if fin is None or new <= fin else fin
        data_lo = old if fin is None or old <= fin else fin
        added = data_hi - data_lo
        self.delivered += added
        self._new_data = added
        if fin is not None and new > fin and not self.peer_fin_received:
            self.peer_fin_received = True
            self._fin_now = True
        return True

    def _insert_ooo(self, start: int, end: int) -> None:
        ooo = self._ooo
        ooo.append([start, end])
        ooo.sort()
        merged: list[list[int]] = []
        for s, e in ooo:
            if merged and s <= merged[-1][1]:
                if e > merged[-1][1]:
                    merged[-1][1] = e
            else:
                merged.append([s, e])
        self._ooo = merged

    def on_ack(self, ack: int, window: int, pkt: Optional[Packet] = None) -> None:
        """Sender-side ACK processing (cumulative ack plus window field)."""
        if ack < self.snd_una or ack > self.snd_max:
            return
        mss = self.mss
        if ack > self.snd_una:
            acked = ack - self.snd_una
            if self._rtt_seq is not None and ack >= self._rtt_seq:
                self._rtt_sample(self.sim.now - self._rtt_start)
                self._rtt_seq = None
            prev_una = self.snd_una
            self.snd_una = ack
            self.peer_rwnd = window
            if self.snd_nxt < ack:
                self.snd_nxt = ack
            self.backoff = 0
            if prev_una == 0:
                # our SYN was acknowledged
                opener = self.state is TcpState.SYN_SENT
                self.established_at = self.sim.now
                self.state = TcpState.SLOW_START
                acked -= 1
                if opener:
                    self._send_ack()
                if self.on_established is not None:
                    self.on_established(self)
            elif self.state is TcpState.FAST_RECOVERY:
                if ack > self.recover:
                    self.cwnd = self.ssthresh
                    self.state = TcpState.CONGESTION_AVOIDANCE
                    self.dupack_count = 0
                else:
                    self._retransmit_head()
                    self.cwnd = max(self.cwnd - acked + (mss if acked >= mss else 0), mss)
            else:
                self.dupack_count = 0
                if self.cwnd < self.ssthresh:
                    self.cwnd += acked if acked < mss else mss
                    self.state = TcpState.SLOW_START if self.cwnd < self.ssthresh else TcpState.CONGESTION_AVOIDANCE
                else:
                    self.cwnd += max(1, mss * mss // self.cwnd)
                    self.state = TcpState.CONGESTION_AVOIDANCE
            if self.fin_requested and ack > self.data_end:
                self.fin_acked = True
            self._arm_rto()
        else:
            is_dup = (
                pkt is not None
                and pkt.length == 0
                and not pkt.flags & (SYN | FIN)
                and window == self.peer_rwnd
                and self.snd_max > self.snd_una
                and self.established_at is not None
            )
            self.peer_rwnd = window
            if is_dup:
                self.dupack_count += 1
                if self.state is TcpState.FAST_RECOVERY:
                    self.cwnd += mss
                elif self.dupack_count == self.config.dupack_threshold and ack > self.recover:
                    self.ssthresh = max(self.cwnd // 2, 2 * mss)
                    self.recover = self.snd_max
                    self.fast_retransmits += 1
                    self._retransmit_head()
                    self.cwnd = self.ssthresh + 3 * mss
                    self.state = TcpState.FAST_RECOVERY
        self._try_send()

    def _rtt_sample(self, r: int) -> None:
        if self.srtt is None:
            self.srtt = r
            self.rttvar = r // 2
        else:
            self.rttvar = (3 * self.rttvar + abs(self.srtt - r)) // 4
            self.srtt = (7 * self.srtt + r) // 8
        self.rto = max(self.config.rto_min, self.srtt + max(1000, 4 * self.rttvar))
        self.rto = min(self.rto, self.config.max_backoff * self.config.rto_min)

    def _check_closed(self) -> None:
        if not self.closed and self.peer_fin_received and self.fin_acked:
            self.closed = True
            self.state = TcpState.CLOSED

    def __repr__(self) -> str:
        return (
            f"TcpFlow({self.flow_id}/{self.direction} {self.state.value} cwnd={self.cwnd} "
            f"rwnd={self.peer_rwnd} una={self.snd_una} nxt={self.snd_nxt})"
        )


# ------------------------------------------------------------------ apps


@dataclass
class AppModel:
    kind: str  # "elephant" or "mice"
    start_time: int = 0  # ns
    duration: Optional[int] = None  # elephants: ns of sending, None = until the run ends
    response_size: int = 11_500
    request_size: int = 100
    request_count: int = 1000

    def __post_init__(self):
        if self.kind not in ("elephant", "mice"):
            raise ValueError(f"unknown app kind {self.kind!r}")


@dataclass
class FctRecord:
    client_id: int
    request_idx: int
    start: int
    fct: Optional[int]  # ns; None when the connection died

    @property
    def failed(self) -> bool:
        return self.fct is None


class FlowIds:
    def __init__(self, first: int = 1):
        self._next = first

    def __call__(self) -> int:
        fid = self._next
        self._next += 1
        return fid


class ElephantApp:
    """Bulk sender with unbounded data (iperf client) plus its sink."""

    def __init__(
        self,
        client: Host,
        server: Host,
        flow_id: int,
        server_port: int,
        app: AppModel,
        config: TcpConfig = TcpConfig(),
        monitor: Optional[FlowControlMonitor] = None,
    ):
        self.client_host = client
        self.server_host = server
        self.flow_id = flow_id
        self.server_port = server_port
        self.app = app
        self.config = config
        self.monitor = monitor
        self.sender: Optional[TcpFlow] = None
        self.receiver: Optional[TcpFlow] = None
        server.listeners[server_port] = self._accept
        client.sim.schedule(app.start_time, self.start)

    def _accept(self, syn: Packet) -> Optional[TcpFlow]:
        if syn.flow_id != self.flow_id:
            return None
        rx = TcpFlow(self.server_host, syn.flow_id, 1, syn.src, syn.dport, syn.sport, self.config, self.monitor)
        rx.on_peer_fin = TcpFlow.close
        rx.accept(syn)
        self.receiver = rx
        return rx

    def start(self) -> None:
        tx = TcpFlow(
            self.client_host, self.flow_id, 0, self.server_host.name, 40000 + self.flow_id % 20000,
            self.server_port, self.config, self.monitor,
        )
        tx.on_established = lambda f: f.write(INFINITE)
        self.sender = tx
        tx.connect()
        if self.app.duration is not None:
            self.client_host.sim.schedule(self.app.start_time + self.app.duration, self.stop)

    def stop(self) -> None:
        tx = self.sender
        if tx is not None and not tx.dead and tx.established_at is not None:
            # freeze the stream at what has been handed to TCP so far
            tx.app_bytes = max(tx.snd_max - 1, 0)
            tx.close()

    @property
    def delivered(self) -> int:
        return self.receiver.delivered if self.receiver is not None else 0


def install_web_server(host: Host, port: int, app: AppModel, config: TcpConfig = TcpConfig(),
                       monitor: Optional[FlowControlMonitor] = None) -> None:
    """Answer every request of ``app.request_size`` bytes with ``app.response_size`` and close."""

    def on_data(flow: TcpFlow, _n: int) -> None:
        if flow.delivered >= app.request_size and not flow.fin_requested:
            flow.write(app.response_size)
            flow.close()

    def accept(syn: Packet) -> TcpFlow:
        flow = TcpFlow(host, syn.flow_id, 1, syn.src, syn.dport, syn.sport, config, monitor)
        flow.on_data = on_data
        flow.accept(syn)
        return flow

    host.listeners[port] = accept


class MiceClient:
    """Sequential request/response client (ab with concurrency 1, no keep-alive)."""

    def __init__(
        self,
        host: Host,
        server: str,
        server_port: int,
        client_id: int,
        app: AppModel,
        flow_ids: FlowIds,
        config: TcpConfig = TcpConfig(),
        monitor: Optional[FlowControlMonitor] = None,
        on_record: Optional[Callable[[FctRecord], None]] = None,
    ):
        self.host = host
        self.sim = host.sim
        self.server = server
        self.server_port = server_port
        self.client_id = client_id
        self.app = app
        self.flow_ids = flow_ids
        self.config = config
        self.monitor = monitor
        self.on_record = on_record
        self.records: list[FctRecord] = []
        self.current: Optional[TcpFlow] = None
        self._started_at = 0
        self._next_port = 1024
        self.sim.schedule(app.start_time, self._next_request)

    @property
    def done(self) -> bool:
        return len(self.records) >= self.app.request_count

    def _next_request(self) -> None:
        if self.done:
            return
        self._next_port += 1
        flow = TcpFlow(self.host, self.flow_ids(), 0, self.server, self._next_port, self.server_port,
                       self.config, self.monitor)
        size = self.app.request_size
        flow.on_established = lambda f: f.write(size)
        flow.on_peer_fin = self._response_complete
        flow.on_dead = self._failed
        self.current = flow
        self._started_at = self.sim.now
        flow.connect()

    def _finish(self, fct: Optional[int]) -> None:
        rec = FctRecord(self.client_id, len(self.records), self._started_at, fct)
        self.records.append(rec)
        if self.on_record is not None:
            self.on_record(rec)
        self.current = None
        self.sim.schedule(self.sim.now, self._next_request)

    def _response_complete(self, flow: TcpFlow) -> None:
        if flow is not self.current:
            return
        fct = self.sim.now - self._started_at
        flow.close()
        self._finish(fct)

    def _failed(self, flow: TcpFlow) -> None:
        if flow is self.current:
            self._finish(None)
