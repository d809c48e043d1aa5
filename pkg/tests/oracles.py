"""Reference implementations the tests compare against.

They are written independently of the package: a different folding
method for the checksum, a raw struct layout for headers and a literal
transcription of the window-control pseudo-code.
"""

import random
import struct
from dataclasses import dataclass

MAX_WINDOW = 65535


def oc_checksum(data: bytes) -> int:
    """Internet checksum via the mod-65535 identity instead of carry folding."""
    if len(data) % 2:
        data += b"\x00"
    total = sum(int.from_bytes(data[i : i + 2], "big") for i in range(0, len(data), 2))
    folded = total % 0xFFFF
    if folded == 0 and total:
        folded = 0xFFFF
    return ~folded & 0xFFFF


def tcp_full_checksum(datagram: bytes) -> int:
    """Recompute the TCP checksum of a raw IPv4 datagram from scratch."""
    ihl = (datagram[0] & 0x0F) * 4
    total_len = int.from_bytes(datagram[2:4], "big")
    tcp = bytearray(datagram[ihl:total_len])
    tcp[16:18] = b"\x00\x00"
    pseudo = datagram[12:20] + bytes([0, 6]) + len(tcp).to_bytes(2, "big")
    return oc_checksum(pseudo + bytes(tcp))


def random_datagram(rng: random.Random, *, valid_checksums: bool = True, flags=None) -> bytes:
    """A random but well-formed IPv4+TCP datagram built directly with struct."""
    ip_opt = bytes(rng.getrandbits(8) for _ in range(4 * rng.randint(0, 2)))
    tcp_opt = bytes(rng.getrandbits(8) for _ in range(4 * rng.randint(0, 3)))
    payload = bytes(rng.getrandbits(8) for _ in range(rng.choice([0, 0, 1, 7, 100, rng.randint(0, 1460)])))
    ihl = 5 + len(ip_opt) // 4
    doff = 5 + len(tcp_opt) // 4
    fl = rng.getrandbits(8) if flags is None else flags
    tcp = bytearray(
        struct.pack(
            "!HHIIBBHHH",
            rng.getrandbits(16),
            rng.getrandbits(16),
            rng.getrandbits(32),
            rng.getrandbits(32),
            (doff << 4) | rng.getrandbits(4),
            fl,
            rng.getrandbits(16),
            rng.getrandbits(16),
            rng.getrandbits(16),
        )
    ) + tcp_opt + payload
    total = ihl * 4 + len(tcp)
    ip = bytearray(
        struct.pack(
            "!BBHHHBBH4s4s",
            0x40 | ihl,
            rng.getrandbits(8),
            total,
            rng.getrandbits(16),
            rng.getrandbits(16),
            rng.getrandbits(8),
            6,
            rng.getrandbits(16),
            rng.randbytes(4),
            rng.randbytes(4),
        )
    ) + ip_opt
    raw = bytearray(ip + tcp)
    if valid_checksums:
        raw[10:12] = b"\x00\x00"
        raw[10:12] = oc_checksum(bytes(raw[: ihl * 4])).to_bytes(2, "big")
        raw[ihl * 4 + 16 : ihl * 4 + 18] = tcp_full_checksum(bytes(raw)).to_bytes(2, "big")
    return bytes(raw)


class RefPort:
    """Literal transcription of the per-port window-control pseudo-code."""

    def __init__(self, limit=85300, mss=1460, min_mss=536):
        self.target = limit // 4
        self.mss = mss
        self.min_mss = min_mss
        self.conncount = 0
        self.localwnd = 0
        self.wnd = MAX_WINDOW
        self.incr = 0
        self.slowstart = False
        self.update_count = 0

    def join(self):
        self.conncount += 1
        if self.conncount == 1:
            self.localwnd = self.target
            self.slowstart = True
            self.incr = 0
            self.update_count = 0
        if self.conncount >= 2:
            self.wnd = self.wnd * (self.conncount - 1) // self.conncount

    def leave(self):
        if self.conncount == 0:
            return
        self.conncount -= 1
        if self.conncount >= 1:
            self.wnd = self.wnd * (self.conncount + 1) // self.conncount

    def tick(self, backlog, m):
        if self.conncount <= 0:
            return False
        if self.slowstart and backlog >= self.target:
            self.slowstart = False
        if self.slowstart:
            self.incr += 2 * self.mss
        else:
            self.incr += self.target - backlog
        if self.update_count == m:
            # C division truncates toward zero
            q = abs(self.incr) // m
            self.localwnd += q if self.incr >= 0 else -q
            self.localwnd = min(self.localwnd, MAX_WINDOW * self.conncount)
            self.localwnd = max(self.localwnd, self.min_mss * self.conncount)
            self.wnd = self.localwnd // self.conncount
            self.incr = 0
            self.update_count = 0
            return True
        self.update_count += 1
        return False


@dataclass
class SweepResult:
    cases: int
    mismatches: int


def checksum_sweep(n: int, seed: int) -> SweepResult:
    """Rewrite the window of ``n`` random segments and recheck every checksum.

    A quarter of the cases start from window 65535 and shrink it to 8192;
    the rest use random old and new windows.  Both the value returned by
    the incremental formula and the bytes left in the buffer are compared
    with a full recomputation.
    """
    from rwndq_sim.wirecodec import incremental_checksum, parse_segment

    rng = random.Random(seed)
    bad = 0
    for i in range(n):
        buf = bytearray(random_datagram(rng))
        view = parse_segment(buf)
        o = view.header_offset
        if i % 4 == 0:
            buf[o + 14 : o + 16] = (65535).to_bytes(2, "big")
            buf[o + 16 : o + 18] = tcp_full_checksum(bytes(buf)).to_bytes(2, "big")
            new = 8192
        else:
            new = rng.getrandbits(16)
        expect = bytearray(buf)
        expect[o + 14 : o + 16] = new.to_bytes(2, "big")
        expected = tcp_full_checksum(bytes(expect))
        if incremental_checksum(view.checksum, view.window, new) != expected:
            bad += 1
            continue
        view.window = new
        if view.checksum != tcp_full_checksum(bytes(buf)) or view.window != new:
            bad += 1
    return SweepResult(n, bad)


@dataclass
class StateMachineResult:
    events: int
    commits: int
    mismatches: int
    clamp_violations: int


def state_machine_sweep(n: int, seed: int, m: int = 5, ports: int = 3) -> StateMachineResult:
    """Drive the package's port state and ``RefPort`` with ``n`` random events.

    Events are flow opens (ingress and egress), closes (ingress only) and
    daemon passes over every port.  Any field that differs after an event
    counts as one mismatch; the clamp bounds are checked after each commit.
    """
    from rwndq_sim.rwndq import PortState, on_flow_close, on_flow_open, tick

    rng = random.Random(seed)
    ours = [PortState(limit=85_300) for _ in range(ports)]
    refs = [RefPort() for _ in range(ports)]
    target = 85_300 >> 2
    commits = mismatches = clamp = 0
    for _ in range(n):
        r = rng.random()
        i, j = rng.sample(range(ports), 2)
        if r < 0.2:
            on_flow_open(ours[i], ours[j])
            refs[i].join()
            refs[j].join()
        elif r < 0.35:
            on_flow_close(ours[i])
            refs[i].leave()
        else:
            backlog = rng.choice([0, rng.randint(0, 85_300), target])
            for p, ref in zip(ours, refs):
                committed = tick(p, backlog, m)
                if committed != ref.tick(backlog, m):
                    mismatches += 1
                if committed:
                    commits += 1
                    if not 536 * p.conncount <= p.localwnd <= MAX_WINDOW * p.conncount:
                        clamp += 1
                    if p.wnd != p.localwnd // p.conncount:
                        clamp += 1
        for p, ref in zip(ours, refs):
            mine = (p.conncount, p.localwnd, p.wnd, p.incr, p.slowstart, p.update_count)
            theirs = (ref.conncount, ref.localwnd, ref.wnd, ref.incr, ref.slowstart, ref.update_count)
            if mine != theirs or p.conncount < 0:
                mismatches += 1
    return StateMachineResult(n, commits, mismatches, clamp)
