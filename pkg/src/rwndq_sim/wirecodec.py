"""IPv4/TCP wire codec.

Parses a raw IPv4 datagram carrying TCP into a zero-copy view, rewrites the
receive-window field in place and patches the TCP checksum incrementally
(the one's-complement update of RFC 1624, eqn. 3, which is what the Linux
``csum_replace2`` helper computes).

Only the 16-bit window field is interpreted as a window; window scaling is
assumed absent and TCP options are carried through verbatim.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator

IPPROTO_TCP = 6
IPV4_MIN_HEADER = 20
TCP_MIN_HEADER = 20

# offsets inside the TCP header
_TCP_SEQ = 4
_TCP_ACK = 8
_TCP_OFF = 12
_TCP_FLAGS = 13
_TCP_WINDOW = 14
_TCP_CHECKSUM = 16
_TCP_URG = 18

PCAP_MAGIC = 0xA1B2C3D4
LINKTYPE_RAW = 101


class TcpFlags(enum.IntFlag):
    FIN = 0x01
    SYN = 0x02
    RST = 0x04
    PSH = 0x08
    ACK = 0x10
    URG = 0x20
    ECE = 0x40
    CWR = 0x80


class ParseError(ValueError):
    """Raised for a malformed or truncated datagram.

    ``offset`` is the byte index into the buffer where parsing failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class NotTcpError(ParseError):
    pass


def ones_complement_sum(data: bytes | bytearray | memoryview, initial: int = 0) -> int:
    """Fold ``data`` into a 16-bit one's-complement sum (not inverted)."""
    if len(data) % 2:
        data = bytes(data) + b"\x00"
    total = initial
    for (word,) in struct.iter_unpack("!H", data):
        total += word
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return total


def internet_checksum(data: bytes | bytearray | memoryview) -> int:
    return ~ones_complement_sum(data) & 0xFFFF


def tcp_checksum(src_ip: bytes, dst_ip: bytes, tcp_bytes: bytes | bytearray | memoryview) -> int:
    """Full TCP checksum over the IPv4 pseudo-header and ``tcp_bytes``.

    The checksum field inside ``tcp_bytes`` must already be zeroed.
    """
    pseudo = src_ip + dst_ip + struct.pack("!BBH", 0, IPPROTO_TCP, len(tcp_bytes))
    return ~ones_complement_sum(tcp_bytes, ones_complement_sum(pseudo)) & 0xFFFF


def incremental_checksum(old_checksum: int, old_field: int, new_field: int) -> int:
    """Checksum after replacing one aligned 16-bit word.

    HC' = ~(~HC + ~m + m') in one's-complement arithmetic.  An unchanged
    field returns the checksum untouched, which also keeps the -0/+0 pair
    (0xFFFF/0x0000) from flipping.
    """
    if old_field == new_field:
        return old_checksum
    total = (~old_checksum & 0xFFFF) + (~old_field & 0xFFFF) + (new_field & 0xFFFF)
    total = (total & 0xFFFF) + (total >> 16)
    total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


@dataclass
class TcpSegment:
    """Owned, field-level description of an IPv4+TCP datagram.

    ``to_bytes`` recomputes both checksums unless ``keep_checksums`` is set,
    in which case the stored values are emitted as-is.
    """

    src_ip: bytes = b"\x0a\x00\x00\x01"
    dst_ip: bytes = b"\x0a\x00\x00\x02"
    src_port: int = 0
    dst_port: int = 0
    seq: int = 0
    ack: int = 0
    flags: int = 0
    window: int = 65535
    urgent: int = 0
    tcp_options: bytes = b""
    payload: bytes = b""
    tcp_reserved: int = 0
    tos: int = 0
    ip_id: int = 0
    ip_flags_frag: int = 0x4000
    ttl: int = 64
    ip_options: bytes = b""
    ip_checksum: int = 0
    tcp_checksum: int = 0
    keep_checksums: bool = field(default=False, compare=False)

    def to_bytes(self) -> bytes:
        if len(self.ip_options) % 4 or len(self.tcp_options) % 4:
            raise ValueError("IP/TCP options must be padded to 32-bit words")
        ihl = (IPV4_MIN_HEADER + len(self.ip_options)) // 4
        doff = (TCP_MIN_HEADER + len(self.tcp_options)) // 4
        if ihl > 15 or doff > 15:
            raise ValueError("options too long")
        tcp = bytearray(
            struct.pack(
                "!HHIIBBHHH",
                self.src_port,
                self.dst_port,
                self.seq & 0xFFFFFFFF,
                self.ack & 0xFFFFFFFF,
                (doff << 4) | (self.tcp_reserved & 0x0F),
                self.flags & 0xFF,
                self.window,
                0,
                self.urgent,
            )
        )
        tcp += self.tcp_options
        tcp += self.payload
        tcsum = self.tcp_checksum if self.keep_checksums else tcp_checksum(self.src_ip, self.dst_ip, tcp)
        struct.pack_into("!H", tcp, _TCP_CHECKSUM, tcsum)

        total_len = ihl * 4 + len(tcp)
        ip = bytearray(
            struct.pack(
                "!BBHHHBBH4s4s",
                (4 << 4) | ihl,
                self.tos,
                total_len,
                self.ip_id,
                self.ip_flags_frag,
                self.ttl,
                IPPROTO_TCP,
                0,
                self.src_ip,
                self.dst_ip,
            )
        )
        ip += self.ip_options
        icsum = self.ip_checksum if self.keep_checksums else internet_checksum(ip)
        struct.pack_into("!H", ip, 10, icsum)
        return bytes(ip + tcp)


class TcpSegmentView:
    """Zero-copy view of the TCP header inside an IPv4 datagram.

    Reads go straight to the underlying buffer. Assigning ``window`` rewrites
    the field and patches the checksum; the buffer must then be writable.
    """

    __slots__ = ("buffer", "header_offset", "ip_header_len", "total_len", "tcp_header_len")

    def __init__(self, buffer, header_offset: int, ip_header_len: int, total_len: int, tcp_header_len: int):
        self.buffer = buffer
        self.header_offset = header_offset
        self.ip_header_len = ip_header_len
        self.total_len = total_len
        self.tcp_header_len = tcp_header_len

    def _u16(self, off: int) -> int:
        o = self.header_offset + off
        return (self.buffer[o] << 8) | self.buffer[o + 1]

    def _u32(self, off: int) -> int:
        return struct.unpack_from("!I", self.buffer, self.header_offset + off)[0]

    @property
    def src_ip(self) -> bytes:
        return bytes(self.buffer[12:16])

    @property
    def dst_ip(self) -> bytes:
        return bytes(self.buffer[16:20])

    @property
    def src_port(self) -> int:
        return self._u16(0)

    @property
    def dst_port(self) -> int:
        return self._u16(2)

    @property
    def seq(self) -> int:
        return self._u32(_TCP_SEQ)

    @property
    def ack(self) -> int:
        return self._u32(_TCP_ACK)

    @property
    def flags(self) -> TcpFlags:
        return TcpFlags(self.buffer[self.header_offset + _TCP_FLAGS])

    @property
    def checksum(self) -> int:
        return self._u16(_TCP_CHECKSUM)

    @property
    def payload_len(self) -> int:
        return self.total_len - self.ip_header_len - self.tcp_header_len

    @property
    def window(self) -> int:
        return self._u16(_TCP_WINDOW)

    @window.setter
    def window(self, new_window: int) -> None:
        rewrite_window(self, new_window)

    def tcp_bytes(self) -> bytes:
        return bytes(self.buffer[self.header_offset : self.total_len])

    def checksum_valid(self) -> bool:
        tcp = bytearray(self.tcp_bytes())
        tcp[_TCP_CHECKSUM : _TCP_CHECKSUM + 2] = b"\x00\x00"
        return tcp_checksum(self.src_ip, self.dst_ip, tcp) == self.checksum

    def to_segment(self) -> TcpSegment:
        """Copy every header field out into an owned :class:`TcpSegment`."""
        buf = self.buffer
        ho = self.header_offset
        (_, tos, _, ip_id, ff, ttl, _, ip_csum) = struct.unpack_from("!BBHHHBBH", buf, 0)
        return TcpSegment(
            src_ip=self.src_ip,
            dst_ip=self.dst_ip,
            src_port=self.src_port,
            dst_port=self.dst_port,
            seq=self.seq,
            ack=self.ack,
            flags=int(self.flags),
            window=self.window,
            urgent=self._u16(_TCP_URG),
            tcp_options=bytes(buf[ho + TCP_MIN_HEADER : ho + self.tcp_header_len]),
            payload=bytes(buf[ho + self.tcp_header_len : self.total_len]),
            tcp_reserved=buf[ho + _TCP_OFF] & 0x0F,
            tos=tos,
            ip_id=ip_id,
            ip_flags_frag=ff,
            ttl=ttl,
            ip_options=bytes(buf[IPV4_MIN_HEADER:ho]),
            ip_checksum=ip_csum,
            tcp_checksum=self.checksum,
            keep_checksums=True,
        )

    def __repr__(self) -> str:
        return (
            f"TcpSegmentView({self.src_port}->{self.dst_port} flags={self.flags!r} "
            f"window={self.window} checksum=0x{self.checksum:04x} payload_len={self.payload_len})"
        )


def parse_segment(buffer) -> TcpSegmentView:
    """Parse an IPv4 datagram carrying TCP without copying it."""
    n = len(buffer)
    if n < IPV4_MIN_HEADER:
        raise ParseError(f"truncated IPv4 header: {n} bytes", n)
    version = buffer[0] >> 4
    if version != 4:
        raise ParseError(f"IP version {version}, expected 4", 0)
    ihl = (buffer[0] & 0x0F) * 4
    if ihl < IPV4_MIN_HEADER:
        raise ParseError(f"IHL of {ihl} bytes below minimum", 0)
    if n < ihl:
        raise ParseError(f"IPv4 options truncated: need {ihl} bytes", n)
    total_len = (buffer[2] << 8) | buffer[3]
    if total_len < ihl or total_len > n:
        raise ParseError(f"IPv4 total length {total_len} inconsistent with buffer of {n}", 2)
    proto = buffer[9]
    if proto != IPPROTO_TCP:
        raise NotTcpError(f"not TCP: protocol {proto}", 9)
    if total_len - ihl < TCP_MIN_HEADER:
        raise ParseError("truncated TCP header", ihl)
    doff = (buffer[ihl + _TCP_OFF] >> 4) * 4
    if doff < TCP_MIN_HEADER:
        raise ParseError(f"TCP data offset of {doff} bytes below minimum", ihl + _TCP_OFF)
    if ihl + doff > total_len:
        raise ParseError("TCP options truncated", ihl + _TCP_OFF)
    return TcpSegmentView(buffer, ihl, ihl, total_len, doff)


def rewrite_window(segment: TcpSegmentView, new_window: int) -> TcpSegmentView:
    """Set the window field and patch the checksum; touches exactly 4 bytes."""
    if not 0 <= new_window <= 0xFFFF:
        raise ValueError(f"window {new_window} does not fit in 16 bits")
    buf = segment.buffer
    o = segment.header_offset
    old = (buf[o + _TCP_WINDOW] << 8) | buf[o + _TCP_WINDOW + 1]
    if old == new_window:
        return segment
    csum = (buf[o + _TCP_CHECKSUM] << 8) | buf[o + _TCP_CHECKSUM + 1]
    csum = incremental_checksum(csum, old, new_window)
    buf[o + _TCP_WINDOW] = new_window >> 8
    buf[o + _TCP_WINDOW + 1] = new_window & 0xFF
    buf[o + _TCP_CHECKSUM] = csum >> 8
    buf[o + _TCP_CHECKSUM + 1] = csum & 0xFF
    return segment


# --- pcap fixtures -------------------------------------------------------


def write_pcap(dest: str | Path | BinaryIO, records: Iterable[tuple[int, bytes]], snaplen: int = 65535) -> None:
    """Write ``(timestamp_us, raw_ipv4_bytes)`` records as a classic pcap."""
    own = isinstance(dest, (str, Path))
    fh = open(dest, "wb") if own else dest
    try:
        fh.write(struct.pack("<IHHiIII", PCAP_MAGIC, 2, 4, 0, 0, snaplen, LINKTYPE_RAW))
        for ts_us, data in records:
            cap = data[:snaplen]
            fh.write(struct.pack("<IIII", ts_us // 1_000_000, ts_us % 1_000_000, len(cap), len(data)))
            fh.write(cap)
    finally:
        if own:
            fh.close()


def read_pcap(src: str | Path | BinaryIO) -> Iterator[tuple[int, bytes]]:
    """Yield ``(timestamp_us, data)`` from a microsecond pcap of either byte order."""
    own = isinstance(src, (str, Path))
    fh = open(src, "rb") if own else src
    try:
        head = fh.read(24)
        if len(head) < 24:
            raise ParseError("truncated pcap global header", len(head))
        magic_le = struct.unpack("<I", head[:4])[0]
        if magic_le == PCAP_MAGIC:
            endian = "<"
        elif struct.unpack(">I", head[:4])[0] == PCAP_MAGIC:
            endian = ">"
        else:
            raise ParseError(f"bad pcap magic 0x{magic_le:08x}", 0)
        offset = 24
        while True:
            rec = fh.read(16)
            if not rec:
                return
            if len(rec) < 16:
                raise ParseError("truncated pcap record header", offset)
            sec, usec, incl, _orig = struct.unpack(endian + "IIII", rec)
            data = fh.read(incl)
            if len(data) < incl:
                raise ParseError("truncated pcap record", offset + 16)
            offset += 16 + incl
            yield sec * 1_000_000 + usec, data
    finally:
        if own:
            fh.close()
