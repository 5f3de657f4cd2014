"""Classic pcap decoding and bidirectional TCP flow assembly."""

from __future__ import annotations

import ipaddress
import json
import struct
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import IO, Iterable, Iterator, Optional

from .errors import MalformedHeader
from .tls import TlsHandshakeSummary, parse_handshake

PCAP_MAGIC = 0xA1B2C3D4
PCAP_MAGIC_NS = 0xA1B23C4D
LINKTYPE_ETHERNET = 1
ETH_P_IP = 0x0800
ETH_P_8021Q = 0x8100
IPPROTO_TCP = 6

SPLT_MAX = 50
DEFAULT_IDLE_TIMEOUT = 300.0

# TCP flag bits
FIN, SYN, RST, PSH, ACK = 0x01, 0x02, 0x04, 0x08, 0x10

OUTBOUND = 1  # initiator -> responder
INBOUND = -1


@dataclass(frozen=True)
class PacketMeta:
    ts_sec: int
    ts_usec: int
    src: str
    dst: str
    sport: int
    dport: int
    proto: int
    payload: bytes
    tcp_seq: int
    tcp_flags: int

    @property
    def ts_us(self) -> int:
        return self.ts_sec * 1_000_000 + self.ts_usec

    @property
    def timestamp(self) -> float:
        return self.ts_us / 1_000_000


@dataclass(frozen=True)
class Segment:
    """One non-empty, non-retransmitted payload packet of a flow."""

    direction: int
    ts_us: int
    payload: bytes


@dataclass(frozen=True)
class FlowRecord:
    sa: str
    da: str
    sp: int
    dp: int
    pr: int
    ib: int
    ob: int
    ip: int
    op: int
    start_us: int
    end_us: int
    splt: tuple[tuple[int, int], ...]
    byte_counts: tuple[int, ...]
    tls: Optional[TlsHandshakeSummary] = None
    label: Optional[str] = None
    segments: tuple[Segment, ...] = field(default=(), compare=False, repr=False)

    @property
    def start_time(self) -> float:
        return self.start_us / 1_000_000

    @property
    def end_time(self) -> float:
        return self.end_us / 1_000_000

    @property
    def duration(self) -> float:
        return (self.end_us - self.start_us) / 1_000_000

    @property
    def key(self) -> tuple[str, str, int, int, int]:
        return (self.sa, self.da, self.sp, self.dp, self.pr)

    @property
    def host(self) -> str:
        return self.sa

    def with_label(self, label: Optional[str]) -> "FlowRecord":
        return replace(self, label=label)

    def to_dict(self) -> dict:
        return {
            "sa": self.sa,
            "da": self.da,
            "sp": self.sp,
            "dp": self.dp,
            "pr": self.pr,
            "ib": self.ib,
            "ob": self.ob,
            "ip": self.ip,
            "op": self.op,
            "ts": self.start_time,
            "te": self.end_time,
            "splt": [list(e) for e in self.splt],
            "bd": list(self.byte_counts),
            "tls": self.tls.to_dict() if self.tls is not None else None,
            "label": self.label,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "FlowRecord":
        bd = tuple(int(v) for v in d["bd"])
        if len(bd) != 256:
            raise ValueError(f"bd must hold 256 counts, got {len(bd)}")
        return cls(
            sa=d["sa"],
            da=d["da"],
            sp=int(d["sp"]),
            dp=int(d["dp"]),
            pr=int(d.get("pr", IPPROTO_TCP)),
            ib=int(d["ib"]),
            ob=int(d["ob"]),
            ip=int(d["ip"]),
            op=int(d["op"]),
            start_us=round(float(d["ts"]) * 1_000_000),
            end_us=round(float(d["te"]) * 1_000_000),
            splt=tuple((int(a), int(b)) for a, b in d["splt"]),
            byte_counts=bd,
            tls=TlsHandshakeSummary.from_dict(d["tls"]) if d.get("tls") else None,
            label=d.get("label"),
        )


def read_jsonl(fp: IO[str]) -> list[FlowRecord]:
    return [FlowRecord.from_dict(json.loads(line)) for line in fp if line.strip()]


def write_jsonl(flows: Iterable[FlowRecord], fp: IO[str]) -> int:
    n = 0
    for flow in flows:
        fp.write(flow.to_json())
        fp.write("\n")
        n += 1
    return n


# ---------------------------------------------------------------- pcap


def parse_pcap(data: bytes, tally: Optional[Counter] = None) -> list[PacketMeta]:
    """Decode Ethernet/IPv4/TCP packets from a classic pcap byte string.

    Records that are not IPv4/TCP, IP fragments, and truncated bodies are
    skipped and counted in ``tally`` (if given) under a short reason key.
    """
    if tally is None:
        tally = Counter()
    return list(_iter_pcap(data, tally))


def _iter_pcap(data: bytes, tally: Counter) -> Iterator[PacketMeta]:
    if len(data) < 24:
        raise MalformedHeader("truncated pcap global header")
    (magic,) = struct.unpack("<I", data[:4])
    if magic == PCAP_MAGIC:
        endian = "<"
    elif magic == 0xD4C3B2A1:
        endian = ">"
    elif magic in (PCAP_MAGIC_NS, 0x4D3CB2A1):
        raise MalformedHeader("nanosecond-resolution pcap is not supported")
    else:
        raise MalformedHeader(f"bad pcap magic 0x{magic:08x}")
    _, _, _, _, _, _, linktype = struct.unpack(endian + "IHHiIII", data[:24])
    if linktype != LINKTYPE_ETHERNET:
        raise MalformedHeader(f"unsupported link type {linktype}")

    rec = struct.Struct(endian + "IIII")
    off = 24
    n = len(data)
    while off < n:
        if off + 16 > n:
            raise MalformedHeader(f"truncated record header at offset {off}")
        ts_sec, ts_usec, incl_len, _orig = rec.unpack_from(data, off)
        off += 16
        if off + incl_len > n:
            tally["truncated"] += 1
            return
        frame = data[off : off + incl_len]
        off += incl_len
        pkt = _decode_frame(frame, ts_sec, ts_usec, tally)
        if pkt is not None:
            yield pkt


def _decode_frame(frame: bytes, ts_sec: int, ts_usec: int, tally: Counter) -> Optional[PacketMeta]:
    if len(frame) < 14:
        tally["truncated"] += 1
        return None
    ethertype = int.from_bytes(frame[12:14], "big")
    pos = 14
    if ethertype == ETH_P_8021Q:
        if len(frame) < 18:
            tally["truncated"] += 1
            return None
        ethertype = int.from_bytes(frame[16:18], "big")
        pos = 18
    if ethertype != ETH_P_IP:
        tally["non_ipv4"] += 1
        return None

    if len(frame) < pos + 20:
        tally["truncated"] += 1
        return None
    vihl = frame[pos]
    if vihl >> 4 != 4:
        tally["non_ipv4"] += 1
        return None
    ihl = (vihl & 0x0F) * 4
    total_len = int.from_bytes(frame[pos + 2 : pos + 4], "big")
    frag = int.from_bytes(frame[pos + 6 : pos + 8], "big")
    proto = frame[pos + 9]
    if ihl < 20 or total_len < ihl:
        tally["malformed_ip"] += 1
        return None
    if proto != IPPROTO_TCP:
        tally["non_tcp"] += 1
        return None
    if frag & 0x3FFF:
        tally["ip_fragment"] += 1
        return None
    if len(frame) < pos + total_len:
        tally["truncated"] += 1
        return None
    src = str(ipaddress.IPv4Address(frame[pos + 12 : pos + 16]))
    dst = str(ipaddress.IPv4Address(frame[pos + 16 : pos + 20]))

    t = pos + ihl
    end = pos + total_len  # ignores Ethernet trailer padding
    if end - t < 20:
        tally["truncated"] += 1
        return None
    sport, dport, seq, _ack, off_flags = struct.unpack_from(">HHIIH", frame, t)
    doff = (off_flags >> 12) * 4
    if doff < 20 or t + doff > end:
        tally["malformed_tcp"] += 1
        return None
    return PacketMeta(
        ts_sec=ts_sec,
        ts_usec=ts_usec,
        src=src,
        dst=dst,
        sport=sport,
        dport=dport,
        proto=IPPROTO_TCP,
        payload=bytes(frame[t + doff : end]),
        tcp_seq=seq,
        tcp_flags=off_flags & 0x01FF,
    )


def _checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    s = sum(struct.unpack(f">{len(data) // 2}H", data))
    while s >> 16:
        s = (s & 0xFFFF) + (s >> 16)
    return ~s & 0xFFFF


def encode_packet(pkt: PacketMeta, ack: int = 0, window: int = 64240, ip_id: int = 0) -> bytes:
    """Build an Ethernet/IPv4/TCP frame (with valid checksums) for ``pkt``."""
    src = ipaddress.IPv4Address(pkt.src).packed
    dst = ipaddress.IPv4Address(pkt.dst).packed
    tcp_hdr = struct.pack(
        ">HHIIHHHH",
        pkt.sport,
        pkt.dport,
        pkt.tcp_seq & 0xFFFFFFFF,
        ack & 0xFFFFFFFF,
        (5 << 12) | (pkt.tcp_flags & 0x01FF),
        window,
        0,
        0,
    )
    seg_len = len(tcp_hdr) + len(pkt.payload)
    pseudo = src + dst + struct.pack(">BBH", 0, IPPROTO_TCP, seg_len)
    csum = _checksum(pseudo + tcp_hdr + pkt.payload)
    tcp_hdr = tcp_hdr[:16] + struct.pack(">H", csum) + tcp_hdr[18:]
    ip_hdr = struct.pack(">BBHHHBBH4s4s", 0x45, 0, 20 + seg_len, ip_id & 0xFFFF, 0x4000, 64, IPPROTO_TCP, 0, src, dst)
    ip_hdr = ip_hdr[:10] + struct.pack(">H", _checksum(ip_hdr)) + ip_hdr[12:]
    eth = b"\x02\x00\x00\x00\x00\x02" + b"\x02\x00\x00\x00\x00\x01" + struct.pack(">H", ETH_P_IP)
    return eth + ip_hdr + tcp_hdr + pkt.payload


def pcap_header(snaplen: int = 65535) -> bytes:
    return struct.pack("<IHHiIII", PCAP_MAGIC, 2, 4, 0, 0, snaplen, LINKTYPE_ETHERNET)


def pcap_record(ts_sec: int, ts_usec: int, frame: bytes) -> bytes:
    return struct.pack("<IIII", ts_sec, ts_usec, len(frame), len(frame)) + frame


def encode_pcap(packets: Iterable[PacketMeta]) -> bytes:
    """Serialize packets as a little-endian classic pcap file."""
    parts = [pcap_header()]
    for i, pkt in enumerate(packets):
        parts.append(pcap_record(pkt.ts_sec, pkt.ts_usec, encode_packet(pkt, ip_id=i)))
    return b"".join(parts)


# ---------------------------------------------------------------- flows


class _FlowBuilder:
    __slots__ = ("sa", "da", "sp", "dp", "start_us", "last_us", "seen_seq", "segments")

    def __init__(self, pkt: PacketMeta):
        self.sa, self.da, self.sp, self.dp = pkt.src, pkt.dst, pkt.sport, pkt.dport
        self.start_us = self.last_us = pkt.ts_us
        self.seen_seq: dict[int, set[int]] = {OUTBOUND: set(), INBOUND: set()}
        self.segments: list[Segment] = []

    def add(self, pkt: PacketMeta) -> None:
        direction = OUTBOUND if (pkt.src, pkt.sport) == (self.sa, self.sp) else INBOUND
        if pkt.payload:
            seen = self.seen_seq[direction]
            if pkt.tcp_seq in seen:
                return  # retransmission
            seen.add(pkt.tcp_seq)
            self.segments.append(Segment(direction, pkt.ts_us, pkt.payload))
        self.last_us = max(self.last_us, pkt.ts_us)

    def build(self) -> FlowRecord:
        return build_flow(self.sa, self.da, self.sp, self.dp, self.start_us, self.last_us, self.segments)


def build_flow(
    sa: str,
    da: str,
    sp: int,
    dp: int,
    start_us: int,
    end_us: int,
    segments: Iterable[Segment],
    tls: Optional[TlsHandshakeSummary] = None,
    label: Optional[str] = None,
) -> FlowRecord:
    """Summarize an ordered list of payload segments into a FlowRecord."""
    segments = tuple(segments)
    ob = ib = op = ip = 0
    counts = [0] * 256
    splt = []
    prev_us = start_us
    for seg in segments:
        n = len(seg.payload)
        if seg.direction == OUTBOUND:
            ob += n
            op += 1
        else:
            ib += n
            ip += 1
        for b in seg.payload:
            counts[b] += 1
        if len(splt) < SPLT_MAX:
            splt.append((seg.direction * n, (seg.ts_us - prev_us) // 1000))
        prev_us = seg.ts_us
    return FlowRecord(
        sa=sa,
        da=da,
        sp=sp,
        dp=dp,
        pr=IPPROTO_TCP,
        ib=ib,
        ob=ob,
        ip=ip,
        op=op,
        start_us=start_us,
        end_us=end_us,
        splt=tuple(splt),
        byte_counts=tuple(counts),
        tls=tls,
        label=label,
        segments=segments,
    )


def _canonical(pkt: PacketMeta) -> tuple:
    a = (pkt.src, pkt.sport)
    b = (pkt.dst, pkt.dport)
    return (a, b, pkt.proto) if a <= b else (b, a, pkt.proto)


def assemble_flows(packets: Iterable[PacketMeta], idle_timeout: float = DEFAULT_IDLE_TIMEOUT) -> list[FlowRecord]:
    """Group TCP packets into bidirectional flows.

    The sender of a flow's first packet is the initiator. A flow closes
    after ``idle_timeout`` seconds of silence; the next packet on the same
    5-tuple opens a new flow. Empty payloads only extend the flow's end
    time, and a payload whose sequence number was already seen in the
    same direction is dropped as a retransmission.
    """
    timeout_us = round(idle_timeout * 1_000_000)
    active: dict[tuple, _FlowBuilder] = {}
    done: list[_FlowBuilder] = []
    for pkt in packets:
        if pkt.proto != IPPROTO_TCP:
            continue
        key = _canonical(pkt)
        fb = active.get(key)
        if fb is not None and pkt.ts_us - fb.last_us > timeout_us:
            done.append(fb)
            fb = None
        if fb is None:
            fb = active[key] = _FlowBuilder(pkt)
        fb.add(pkt)
    done.extend(active.values())
    flows = [fb.build() for fb in done]
    flows.sort(key=lambda f: (f.start_us, f.sa, f.sp, f.da, f.dp))
    return flows


# ---------------------------------------------------------------- TLS detection


def _hello_signature(payload: bytes, hs_type: int) -> bool:
    return (
        len(payload) >= 6
        and payload[0] == 0x16
        and payload[1] == 0x03
        and payload[2] <= 0x03
        and payload[5] == hs_type
    )


def detect_tls(flow: FlowRecord) -> bool:
    """True iff the flow opens with a clientHello answered by a serverHello.

    Only the record/handshake headers of the first payload in each
    direction are consulted; ports play no part.
    """
    first_out = next((s.payload for s in flow.segments if s.direction == OUTBOUND), None)
    first_in = next((s.payload for s in flow.segments if s.direction == INBOUND), None)
    if first_out is None or first_in is None:
        return False
    return _hello_signature(first_out, 0x01) and _hello_signature(first_in, 0x02)


def extract_flows(
    data: bytes,
    idle_timeout: float = DEFAULT_IDLE_TIMEOUT,
    tally: Optional[Counter] = None,
) -> list[FlowRecord]:
    """pcap bytes -> flows, with TLS summaries attached where detected."""
    if tally is None:
        tally = Counter()
    flows = assemble_flows(parse_pcap(data, tally), idle_timeout)
    out = []
    for flow in flows:
        if detect_tls(flow):
            summary = parse_handshake(flow.segments, flow.start_us)
            if summary is None:
                tally["tls_unparsed"] += 1
            flow = replace(flow, tls=summary)
        out.append(flow)
    return out
