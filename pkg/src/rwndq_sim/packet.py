"""In-simulator packet representation.

Simulated segments carry header fields as attributes rather than bytes; the
switch hook treats them exactly like a parsed wire view (``flags`` plus an
assignable ``window``).  :meth:`Packet.to_wire` produces the equivalent IPv4
datagram for traces and pcap fixtures.
"""

from __future__ import annotations

import ipaddress

from .wirecodec import TcpSegment

IPPROTO_TCP = 6
IPPROTO_UDP = 17
TCPIP_HEADER = 40

FIN = 0x01
SYN = 0x02
RST = 0x04
ACK = 0x10


class Packet:
    __slots__ = (
        "src",
        "dst",
        "sport",
        "dport",
        "seq",
        "ack",
        "flags",
        "window",
        "length",
        "size",
        "flow_id",
        "direction",
        "proto",
        "payload",
        "retransmit",
    )

    def __init__(
        self,
        src: str,
        dst: str,
        sport: int,
        dport: int,
        seq: int,
        ack: int,
        flags: int,
        window: int,
        length: int,
        flow_id: int,
        direction: int,
        proto: int = IPPROTO_TCP,
        payload: bytes | None = None,
        retransmit: bool = False,
    ):
        self.src = src
        self.dst = dst
        self.sport = sport
        self.dport = dport
        self.seq = seq
        self.ack = ack
        self.flags = flags
        self.window = window
        self.length = length
        self.size = length + TCPIP_HEADER
        self.flow_id = flow_id
        self.direction = direction
        self.proto = proto
        self.payload = payload
        self.retransmit = retransmit

    @property
    def seq_len(self) -> int:
        """Sequence space consumed: payload plus one for each of SYN and FIN."""
        return self.length + (1 if self.flags & SYN else 0) + (1 if self.flags & FIN else 0)

    def flag_names(self) -> str:
        names = [n for bit, n in ((SYN, "S"), (FIN, "F"), (RST, "R"), (ACK, "A")) if self.flags & bit]
        return "".join(names) or "."

    def to_wire(self, addresses: dict[str, str] | None = None) -> bytes:
        addresses = addresses or {}
        src = ipaddress.IPv4Address(addresses.get(self.src, "10.0.0.1")).packed
        dst = ipaddress.IPv4Address(addresses.get(self.dst, "10.0.0.2")).packed
        body = self.payload if self.payload is not None else bytes(self.length)
        return TcpSegment(
            src_ip=src,
            dst_ip=dst,
            src_port=self.sport,
            dst_port=self.dport,
            seq=self.seq,
            ack=self.ack,
            flags=self.flags,
            window=self.window,
            payload=body,
        ).to_bytes()

    def __repr__(self) -> str:
        return (
            f"Packet(flow={self.flow_id}/{self.direction} {self.src}:{self.sport}->{self.dst}:{self.dport} "
            f"[{self.flag_names()}] seq={self.seq} ack={self.ack} len={self.length} win={self.window})"
        )
