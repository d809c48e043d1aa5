import io
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from rwndq_sim.packet import ACK, FIN, IPPROTO_UDP, SYN, Packet
from rwndq_sim.rwndq import RwndqConfig
from rwndq_sim.simengine.core import SECOND, US, Simulator, serialization_ns
from rwndq_sim.switchmodel import DropTailQueue, FlowTable, PacketTrace, Port, Switch

GBPS = 1_000_000_000
LIMIT = 85_300


def queue_with_backlog(backlog: int) -> DropTailQueue:
    """A queue whose waiting bytes equal ``backlog`` at t=0 (head already on the wire)."""
    q = DropTailQueue(LIMIT, GBPS)
    q.enqueue(1500, 0)
    while q.backlog < backlog:
        q.enqueue(min(1500, backlog - q.backlog), 0)
    assert q.backlog == backlog
    return q


def test_enqueue_within_limit():
    q = queue_with_backlog(80_000)
    assert q.enqueue(1500, 0) is not None
    assert q.backlog == 81_500


def test_enqueue_overflow_drops():
    q = queue_with_backlog(84_500)
    assert q.enqueue(1500, 0) is None
    assert q.backlog == 84_500 and q.drops == 1 and q.dropped_bytes == 1500


def test_oversize_packet_dropped_on_empty_queue():
    q = DropTailQueue(LIMIT, GBPS)
    assert q.enqueue(90_000, 0) is None
    assert q.drops == 1


def test_serialization_1500_at_1g():
    assert serialization_ns(1500, GBPS) == 12 * US
    q = DropTailQueue(LIMIT, GBPS)
    assert q.enqueue(1500, 0) == 12 * US


def test_back_to_back_spacing():
    q = DropTailQueue(LIMIT, GBPS)
    first = q.enqueue(1500, 0)
    second = q.enqueue(1500, 0)
    assert second - first == 12 * US


def test_empty_queue_has_no_deadline():
    q = DropTailQueue(LIMIT, GBPS)
    assert q.drain(1000) == (0, None)


def test_drain_reports_completions():
    q = DropTailQueue(LIMIT, GBPS)
    for _ in range(3):
        q.enqueue(1500, 0)
    assert q.drain(12 * US) == (1, 24 * US)
    assert q.backlog == 1500  # second on the wire, third waiting
    q.drain(24 * US)
    assert q.backlog == 0
    assert q.drain(36 * US) == (1, None)
    assert q.tx_bytes == 4500


def test_packet_in_service_leaves_backlog():
    q = DropTailQueue(LIMIT, GBPS)
    q.enqueue(1500, 0)
    assert q.backlog == 0
    q.enqueue(1000, 5 * US)
    assert q.backlog_at(5 * US) == 1000
    assert q.backlog_at(12 * US) == 0


def test_backlog_area_integral():
    q = DropTailQueue(LIMIT, GBPS)
    q.enqueue(1500, 0)
    q.enqueue(1500, 0)  # waits 12 us
    assert q.backlog_area(100 * US) == 1500 * 12 * US


@given(st.lists(st.tuples(st.integers(0, 30_000), st.integers(1, 9000)), max_size=300))
def test_queue_invariants(arrivals):
    q = DropTailQueue(LIMIT, GBPS)
    now = 0
    finishes = []
    for gap, size in arrivals:
        now += gap
        f = q.enqueue(size, now)
        assert 0 <= q.backlog <= LIMIT
        waiting = sum(s for st_, _, s in q._fifo if st_ > now)
        assert q.backlog == waiting
        if f is not None:
            assert not finishes or f >= finishes[-1]  # FIFO departures
            finishes.append(f)
    q.drain(now + SECOND)
    assert q.offered_bytes == q.accepted_bytes + q.dropped_bytes
    assert q.tx_bytes == q.accepted_bytes
    # never faster than line rate
    if finishes:
        assert q.tx_bytes * 8 * SECOND <= GBPS * finishes[-1] + GBPS


def test_rate_validation():
    with pytest.raises(ValueError):
        DropTailQueue(LIMIT, 0)
    with pytest.raises(ValueError):
        DropTailQueue(LIMIT, GBPS).enqueue(0, 0)


# ------------------------------------------------------------ switch


class Sink:
    def __init__(self, sim, name):
        self.sim = sim
        self.name = name
        self.got = []

    def receive(self, pkt, port):
        self.got.append((self.sim.now, pkt))


def pkt(dst="R", flags=ACK, window=65535, length=1460, flow=1, direction=0, proto=6):
    return Packet("S", dst, 1, 2, 0, 0, flags, window, length, flow, direction, proto)


def two_port_switch(rwndq=True):
    sim = Simulator()
    sw = Switch(sim, "sw", RwndqConfig() if rwndq else None)
    sinks = {}
    for name in ("S", "R"):
        p = Port(sim, sw, f"to-{name}", DropTailQueue(LIMIT, GBPS), 2 * US)
        sink = Sink(sim, name)
        p.peer, p.peer_port = sink, None
        sw.add_port(p)
        sw.routes[name] = p
        sinks[name] = sink
    return sim, sw, sinks


def test_forward_routes_by_destination():
    sim, sw, sinks = two_port_switch()
    assert sw.forward(pkt("R")) is sw.routes["R"]
    assert sw.forward(pkt("nowhere")) is None


def test_no_route_counted():
    sim, sw, sinks = two_port_switch()
    sw.receive(pkt("X"), sw.routes["S"])
    assert sw.no_route == 1
    sim.run_until(SECOND)
    assert not sinks["R"].got and not sinks["S"].got


def test_delivery_time_is_serialization_plus_propagation():
    sim, sw, sinks = two_port_switch(rwndq=False)
    sw.receive(pkt("R"), sw.routes["S"])
    sw.receive(pkt("R"), sw.routes["S"])
    sim.run_until(SECOND)
    times = [t for t, _ in sinks["R"].got]
    assert times == [14 * US, 26 * US]


def test_rwndq_hook_counts_and_rewrites():
    sim, sw, sinks = two_port_switch()
    ing, eg = sw.routes["S"], sw.routes["R"]
    sw.receive(pkt("R", SYN | ACK, length=0), ing)
    assert ing.state.conncount == 1 and eg.state.conncount == 1
    ing.state.wnd = 9000
    a = pkt("R", ACK, 65535, 0)
    sw.receive(a, ing)
    assert a.window == 9000
    sw.receive(pkt("R", FIN | ACK, length=0), ing)
    assert ing.state.conncount == 0


def test_non_tcp_passes_through_hook():
    sim, sw, sinks = two_port_switch()
    u = pkt("R", SYN | ACK, proto=IPPROTO_UDP)
    sw.receive(u, sw.routes["S"])
    assert sw.routes["S"].state.conncount == 0
    sim.run_until(SECOND)
    assert sinks["R"].got[0][1] is u


def test_retransmitted_synack_counted_once():
    sim, sw, sinks = two_port_switch()
    ing = sw.routes["S"]
    for _ in range(3):
        sw.receive(pkt("R", SYN | ACK, length=0, flow=7), ing)
    assert ing.state.conncount == 1
    assert sw.flow_table.duplicates == 2
    sw.receive(pkt("R", SYN | ACK, length=0, flow=8), ing)
    assert ing.state.conncount == 2


def test_daemon_timer_armed_once_and_goes_idle():
    sim, sw, sinks = two_port_switch()
    ing = sw.routes["S"]
    for f in range(5):
        sw.receive(pkt("R", SYN | ACK, length=0, flow=f), ing)
    assert sw.timer.arms == 1
    daemon_events = [e for e in sim._heap if getattr(e[2], "__name__", "") == "_daemon"]
    assert len(daemon_events) == 1
    sim.run_until(1000 * US)
    assert sw.daemon_passes == 10
    # each side's FIN lands on the port facing its sender
    for f in range(5):
        sw.receive(pkt("S", FIN | ACK, length=0, flow=f, direction=1), sw.routes["R"])
        sw.receive(pkt("R", FIN | ACK, length=0, flow=f), ing)
    assert ing.state.conncount == 0 and sw.routes["R"].state.conncount == 0
    sim.run_until(2000 * US)
    assert sw.daemon_passes == 11  # the pending expiry finds no active port
    assert sw.timer.arms == 1


def test_daemon_stops_when_all_ports_idle():
    sim, sw, sinks = two_port_switch()
    ing, eg = sw.routes["S"], sw.routes["R"]
    sw.receive(pkt("R", SYN | ACK, length=0, flow=1), ing)
    sw.receive(pkt("R", FIN | ACK, length=0, flow=1), ing)
    sw.receive(pkt("S", FIN | ACK, length=0, flow=1, direction=1), eg)
    assert ing.state.conncount == 0 and eg.state.conncount == 0
    sim.run_until(SECOND)
    assert sw.daemon_passes == 1
    assert not sw.timer.armed
    sw.receive(pkt("R", SYN | ACK, length=0, flow=2), ing)
    assert sw.timer.arms == 2


def test_flow_table_keys_direction_and_kind():
    ft = FlowTable()
    a = pkt(flags=SYN | ACK, flow=1, direction=0)
    assert ft(a, 1) and not ft(a, 1)
    assert ft(a, 2)
    assert ft(pkt(flags=SYN | ACK, flow=1, direction=1), 1)
    assert len(ft) == 3


def test_packet_trace_lines():
    sim, sw, sinks = two_port_switch(rwndq=False)
    fh = io.StringIO()
    tr = PacketTrace(fh)
    for p in sw.ports:
        p.trace = tr
    sw.receive(pkt("R"), sw.routes["S"])
    lines = fh.getvalue().splitlines()
    assert lines[0] == "time_us event port flow size backlog"
    assert lines[1].split() == ["0.000", "enq", "to-R", "1/0", "1500", "0"]


def test_jitter_preserves_order():
    sim = Simulator()
    sink = Sink(sim, "R")
    p = Port(sim, None, "p", DropTailQueue(LIMIT, GBPS), 2 * US)
    p.peer = sink
    p.set_jitter(50 * US, random.Random(1))
    sent = [pkt(flow=i) for i in range(50)]
    for s in sent:
        p.send(s)
    sim.run_until(SECOND)
    assert [x for _, x in sink.got] == sent
    times = [t for t, _ in sink.got]
    assert all(b >= a for a, b in zip(times, times[1:]))
    assert all(t >= (k + 1) * 12 * US + 2 * US for k, t in enumerate(times))
