"""Seeded synthetic TLS flows and their pcap rendering.

Flows are drawn from class profiles: which ciphersuites and extensions a
client offers, its key exchange, the server certificate, and how much
application data moves in which direction. Each flow comes back with
its payload segments, so it can be written to pcap and re-ingested, and
with a TLS summary built from the drawn parameters (not by parsing), so
the round trip is an honest check of the parsers.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from . import tls
from .errors import InvalidProfile, UnknownKeyExchange
from .ingest import ACK, FIN, INBOUND, OUTBOUND, PSH, SYN, FlowRecord, PacketMeta, Segment, encode_packet, pcap_header, pcap_record
from .tls import CodeRegistry, TlsHandshakeSummary, default_registry, parse_hexcode
from .x509 import CertificateInfo, build_certificate

MSS = 1448
DEFAULT_KEY_BITS = {"RSA": 2048, "DHE": 2048, "ECDHE": 512}
SERVER_ECHO_EXTENSIONS = (0xFF01, 0x000B, 0x0023, 0x0017, 0x0010, 0x3374, 0x0005)
CA_NAME = (("C", "US"), ("O", "Synthetic Trust Services"), ("CN", "Synthetic Issuing CA 1"))
EPOCH_US = 1_462_060_800 * 1_000_000  # 2016-05-01T00:00:00Z


def _probs(mapping: Mapping, what: str, label: str) -> dict:
    out = {}
    for k, p in mapping.items():
        p = float(p)
        if not 0.0 <= p <= 1.0:
            raise InvalidProfile(f"{label}: {what} probability {p} for {k} outside [0, 1]")
        out[k] = p
    return out


def _choices(mapping: Mapping, what: str, label: str) -> tuple[list, np.ndarray]:
    probs = _probs(mapping, what, label)
    keys = list(probs)
    w = np.array([probs[k] for k in keys])
    if not keys or w.sum() <= 0:
        raise InvalidProfile(f"{label}: {what} needs at least one positive weight")
    return keys, w / w.sum()


@dataclass
class ClassProfile:
    """Generation parameters for one class (or family) of flows."""

    label: str
    suite_offer_probs: dict
    ext_probs: dict = field(default_factory=dict)
    key_exchange: list = field(default_factory=lambda: [{"kx": "RSA", "bits": 2048, "p": 1.0}])
    self_signed_prob: float = 0.0
    versions: dict = field(default_factory=lambda: {"0x0303": 1.0})
    ports: dict = field(default_factory=lambda: {"443": 1.0})
    subjects: list = field(default_factory=lambda: ["www.example.com"])
    dga_subject_prob: float = 0.0
    validity_days: dict = field(default_factory=lambda: {"365": 1.0})
    san_count: dict = field(default_factory=lambda: {"1": 1.0})
    app_packets: tuple = (4, 20)
    out_length: tuple = (5.5, 0.8)  # lognormal (mu, sigma) of client record bodies
    in_length: tuple = (6.5, 0.8)
    gap_ms: float = 40.0
    rtt_ms: tuple = (5, 80)
    byte_alphabet: Optional[str] = None
    flows_per_window: tuple = (1, 1)
    session_id_prob: float = 0.5
    server_pool: int = 50
    mix: float = 1.0

    def __post_init__(self):
        self.suite_offer_probs = {parse_hexcode(k): v for k, v in _probs(self.suite_offer_probs, "suite", self.label).items()}
        if not any(p > 0 for p in self.suite_offer_probs.values()):
            raise InvalidProfile(f"{self.label}: no ciphersuite has positive offer probability")
        self.ext_probs = {parse_hexcode(k): v for k, v in _probs(self.ext_probs, "extension", self.label).items()}
        for p in (self.self_signed_prob, self.dga_subject_prob, self.session_id_prob):
            if not 0.0 <= float(p) <= 1.0:
                raise InvalidProfile(f"{self.label}: probability {p} outside [0, 1]")
        for entry in self.key_exchange:
            if entry.get("kx") not in DEFAULT_KEY_BITS or int(entry.get("bits", 0)) <= 0:
                raise InvalidProfile(f"{self.label}: bad key exchange entry {entry}")
            _probs({"p": entry.get("p", 1.0)}, "key exchange", self.label)
        for name in ("versions", "ports", "validity_days", "san_count"):
            _choices(getattr(self, name), name, self.label)
        lo, hi = self.app_packets
        if lo < 0 or hi < lo:
            raise InvalidProfile(f"{self.label}: bad app_packets range {self.app_packets}")
        lo, hi = self.flows_per_window
        if lo < 1 or hi < lo:
            raise InvalidProfile(f"{self.label}: bad flows_per_window range {self.flows_per_window}")
        if not self.subjects:
            raise InvalidProfile(f"{self.label}: no certificate subjects")
        if self.mix < 0:
            raise InvalidProfile(f"{self.label}: negative mix weight")

    @classmethod
    def from_dict(cls, d: Mapping) -> "ClassProfile":
        d = dict(d)
        for key in ("app_packets", "out_length", "in_length", "rtt_ms", "flows_per_window"):
            if key in d:
                d[key] = tuple(d[key])
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidProfile(str(exc)) from exc


def load_profiles(path: Optional[Union[str, Path]] = None) -> list[ClassProfile]:
    """Profiles from a JSON file (a list of objects); default: bundled set."""
    if path is None:
        raw = json.loads(tls._data_path("profiles.json").read_text())
    else:
        raw = json.loads(Path(path).read_text())
    return [ClassProfile.from_dict(p) for p in raw]


def allocate(n: int, weights: Sequence[float]) -> list[int]:
    """Split ``n`` into integer counts proportional to weights (largest remainder)."""
    w = np.asarray(weights, dtype=float)
    if w.sum() <= 0:
        raise InvalidProfile("class mix weights sum to zero")
    quota = n * w / w.sum()
    counts = np.floor(quota).astype(int)
    rest = n - counts.sum()
    order = sorted(range(len(w)), key=lambda i: (-(quota[i] - counts[i]), i))
    for i in order[:rest]:
        counts[i] += 1
    return counts.tolist()


# ---------------------------------------------------------------- one flow


@dataclass
class _Layout:
    """Payload segments under construction plus the record table."""

    segments: list = field(default_factory=list)  # (direction, ts_us, bytes)
    records: list = field(default_factory=list)  # (seg index, type, length)

    def send(self, direction: int, ts_us: int, records: Sequence[tuple[int, bytes]], version: int) -> None:
        blob = bytearray()
        starts = []
        for ctype, body in records:
            starts.append((len(blob), ctype, len(body)))
            blob += tls.tls_records(ctype, body, version)
        first = len(self.segments)
        for off in range(0, len(blob), MSS):
            self.segments.append((direction, ts_us, bytes(blob[off : off + MSS])))
        for pos, ctype, n in starts:
            self.records.append((first + pos // MSS, ctype, n))


def _dga(rng: np.random.Generator) -> str:
    letters = "abcdefghijklmnopqrstuvwxyz0123456789"
    n = int(rng.integers(8, 14))
    return "www." + "".join(letters[i] for i in rng.integers(0, len(letters), n)) + ".net"


def _draw_codes(rng: np.random.Generator, probs: Mapping[int, float]) -> list[int]:
    return [code for code, p in probs.items() if rng.random() < p]


def _random_bytes(rng: np.random.Generator, n: int, alphabet: Optional[bytes]) -> bytes:
    if alphabet is None:
        return rng.integers(0, 256, n, dtype=np.uint8).tobytes()
    idx = rng.integers(0, len(alphabet), n)
    return bytes(alphabet[i] for i in idx)


def _select_suite(offered: Sequence[int], kx: str, registry: CodeRegistry) -> tuple[int, Optional[str]]:
    known = []
    for code in offered:
        try:
            fam = registry.key_exchange(code)
        except UnknownKeyExchange:
            continue
        if fam == kx:
            return code, kx
        known.append((code, fam))
    if known:
        return known[0]
    return offered[0], None


def _make_flow(
    profile: ClassProfile,
    rng: np.random.Generator,
    sa: str,
    da: str,
    sp: int,
    start_us: int,
    registry: CodeRegistry,
) -> FlowRecord:
    keys, w = _choices(profile.ports, "ports", profile.label)
    dp = int(keys[rng.choice(len(keys), p=w)])
    keys, w = _choices(profile.versions, "versions", profile.label)
    version = parse_hexcode(keys[rng.choice(len(keys), p=w)])

    suites = _draw_codes(rng, profile.suite_offer_probs)
    if not suites:
        suites = [max(profile.suite_offer_probs, key=profile.suite_offer_probs.get)]
    exts = _draw_codes(rng, profile.ext_probs)

    kx_w = np.array([float(e.get("p", 1.0)) for e in profile.key_exchange])
    kx_entry = profile.key_exchange[rng.choice(len(kx_w), p=kx_w / kx_w.sum())]
    selected, kx = _select_suite(suites, kx_entry["kx"], registry)
    bits = int(kx_entry["bits"]) if kx == kx_entry["kx"] else DEFAULT_KEY_BITS.get(kx or "", 0)
    sel_exts = [e for e in exts if e in SERVER_ECHO_EXTENSIONS]

    if rng.random() < profile.dga_subject_prob:
        cn = _dga(rng)
    else:
        cn = profile.subjects[int(rng.integers(0, len(profile.subjects)))]
    subject = (("CN", cn),)
    self_signed = bool(rng.random() < profile.self_signed_prob)
    issuer = subject if self_signed else CA_NAME
    keys, w = _choices(profile.validity_days, "validity_days", profile.label)
    days = int(keys[rng.choice(len(keys), p=w)])
    keys, w = _choices(profile.san_count, "san_count", profile.label)
    n_san = int(keys[rng.choice(len(keys), p=w)])
    not_before = datetime(2016, 1, 1, tzinfo=timezone.utc) + timedelta(days=int(rng.integers(0, 120)))
    der = build_certificate(
        subject,
        issuer,
        not_before,
        not_before + timedelta(days=days),
        [cn] + [f"alt{i}.{cn.split('.', 1)[-1]}" for i in range(1, n_san)] if n_san else [],
        serial=int(rng.integers(1, 2**31)),
    )

    alphabet = profile.byte_alphabet.encode("latin-1") if profile.byte_alphabet else None
    rtt = int(rng.integers(profile.rtt_ms[0], profile.rtt_ms[1] + 1)) * 1000
    sid = rng.integers(0, 256, 32, dtype=np.uint8).tobytes() if rng.random() < profile.session_id_prob else b""
    hs = _Layout()
    t = start_us + rtt  # SYN at start, SYN/ACK half an RTT later, ACK + clientHello after one RTT
    hello = tls.client_hello(
        version, suites, exts, random=rng.integers(0, 256, 32, dtype=np.uint8).tobytes(), session_id=sid, sni=cn
    )
    hs.send(OUTBOUND, t, [(tls.CT_HANDSHAKE, hello)], version)
    t += rtt
    flight = (
        tls.server_hello(version, selected, sel_exts, rng.integers(0, 256, 32, dtype=np.uint8).tobytes(), sid)
        + tls.certificate_message([der])
        + tls.server_hello_done()
    )
    hs.send(INBOUND, t, [(tls.CT_HANDSHAKE, flight)], version)
    t += 1000
    client_flight = [(tls.CT_CHANGE_CIPHER_SPEC, b"\x01"), (tls.CT_HANDSHAKE, _random_bytes(rng, 40, None))]
    if kx is not None:
        nbytes = bits // 8
        key = b"\x04" + _random_bytes(rng, nbytes, None) if kx == "ECDHE" else _random_bytes(rng, nbytes, None)
        client_flight.insert(0, (tls.CT_HANDSHAKE, tls.client_key_exchange(kx, key, version)))
    hs.send(OUTBOUND, t, client_flight, version)
    t += rtt
    hs.send(INBOUND, t, [(tls.CT_CHANGE_CIPHER_SPEC, b"\x01"), (tls.CT_HANDSHAKE, _random_bytes(rng, 40, None))], version)

    n_app = int(rng.integers(profile.app_packets[0], profile.app_packets[1] + 1))
    direction = OUTBOUND
    for i in range(n_app):
        mu, sigma = profile.out_length if direction == OUTBOUND else profile.in_length
        n = int(np.clip(round(rng.lognormal(mu, sigma)), 1, MSS - 5))
        t += int(rng.exponential(profile.gap_ms)) * 1000 + 1000
        hs.send(direction, t, [(tls.CT_APPLICATION_DATA, _random_bytes(rng, n, alphabet))], version)
        if rng.random() < 0.6:
            direction = -direction
    end_us = t + int(rng.integers(1, 50)) * 1000

    segments = tuple(Segment(d, ts, p) for d, ts, p in hs.segments)
    records = []
    prev = start_us
    for seg_i, ctype, n in hs.records:
        ts = hs.segments[seg_i][1]
        records.append((ctype, n, (ts - prev) // 1000))
        prev = ts
    summary = TlsHandshakeSummary(
        client_version=version,
        offered_ciphersuites=tuple(suites),
        advertised_extensions=tuple(exts),
        selected_ciphersuite=selected,
        selected_extensions=tuple(sel_exts),
        client_public_key_bits=bits if kx is not None else None,
        certificate=CertificateInfo(
            subject=f"CN={cn}",
            issuer=f"CN={cn}" if self_signed else "CN=Synthetic Issuing CA 1,O=Synthetic Trust Services,C=US",
            validity_days=days,
            san_count=n_san,
            self_signed=self_signed,
        ),
        records=tuple(records),
        complete=True,
    )
    return _summarize(sa, da, sp, dp, start_us, end_us, segments, summary, profile.label)


def _summarize(sa, da, sp, dp, start_us, end_us, segments, summary, label) -> FlowRecord:
    counts = np.zeros(256, dtype=np.int64)
    ib = ob = ip = op = 0
    splt = []
    prev = start_us
    for seg in segments:
        counts += np.bincount(np.frombuffer(seg.payload, dtype=np.uint8), minlength=256)
        if seg.direction == OUTBOUND:
            ob, op = ob + len(seg.payload), op + 1
        else:
            ib, ip = ib + len(seg.payload), ip + 1
        if len(splt) < 50:
            splt.append((seg.direction * len(seg.payload), (seg.ts_us - prev) // 1000))
        prev = seg.ts_us
    return FlowRecord(
        sa=sa, da=da, sp=sp, dp=dp, pr=6,
        ib=ib, ob=ob, ip=ip, op=op,
        start_us=start_us, end_us=end_us,
        splt=tuple(splt), byte_counts=tuple(int(c) for c in counts),
        tls=summary, label=label, segments=tuple(segments),
    )


# ---------------------------------------------------------------- corpus


def generate(
    profiles: Sequence[ClassProfile],
    n_flows: int,
    seed: int,
    registry: Optional[CodeRegistry] = None,
) -> list[FlowRecord]:
    """Draw ``n_flows`` labeled flows; class counts follow each profile's ``mix``.

    Every host (initiator address) belongs to one class and opens between
    ``flows_per_window`` flows inside a 300 s span, so per-host windows are
    single-class. Output is sorted like ingested flows.
    """
    if n_flows < 1:
        raise InvalidProfile("n_flows must be >= 1")
    if not profiles:
        raise InvalidProfile("no profiles given")
    registry = registry or default_registry()
    rng = np.random.default_rng(seed)
    counts = allocate(n_flows, [p.mix for p in profiles])
    flows = []
    host_n = 0
    for c_idx, (profile, count) in enumerate(zip(profiles, counts)):
        servers = [f"198.{18 + c_idx % 4}.{(i >> 8) & 255}.{i & 255 or 1}" for i in range(1, profile.server_pool + 1)]
        remaining = count
        while remaining > 0:
            host_n += 1
            sa = f"10.{(host_n >> 16) & 255}.{(host_n >> 8) & 255}.{host_n & 255}"
            lo, hi = profile.flows_per_window
            size = min(int(rng.integers(lo, hi + 1)), remaining)
            remaining -= size
            base = EPOCH_US + host_n * 400_000_000
            offsets = np.sort(rng.integers(0, 240_000, size)) * 1000
            for j, off in enumerate(offsets):
                da = servers[int(rng.integers(0, len(servers)))]
                flows.append(_make_flow(profile, rng, sa, da, 49152 + j, int(base + off), registry))
    flows.sort(key=lambda f: (f.start_us, f.sa, f.sp, f.da, f.dp))
    return flows


# ---------------------------------------------------------------- pcap


def flow_packets(flow: FlowRecord, pure_acks: bool = True, retransmit_every: int = 0) -> list[tuple[PacketMeta, int]]:
    """TCP packets (with ack numbers) that reproduce a flow's segments."""
    if not flow.segments:
        raise ValueError("flow carries no payload segments to render")
    seed = zlib.crc32(f"{flow.sa}:{flow.sp}>{flow.da}:{flow.dp}".encode())
    seq = {OUTBOUND: seed & 0x7FFFFFFF, INBOUND: (seed * 2654435761) & 0x7FFFFFFF}
    first_ts = flow.segments[0].ts_us

    def pkt(direction, ts, flags, payload=b""):
        src, dst, sport, dport = (
            (flow.sa, flow.da, flow.sp, flow.dp) if direction == OUTBOUND else (flow.da, flow.sa, flow.dp, flow.sp)
        )
        p = PacketMeta(ts // 1_000_000, ts % 1_000_000, src, dst, sport, dport, 6, payload, seq[direction] & 0xFFFFFFFF, flags)
        return (p, seq[-direction] & 0xFFFFFFFF)

    out = [pkt(OUTBOUND, flow.start_us, SYN)]
    seq[OUTBOUND] += 1
    out.append(pkt(INBOUND, flow.start_us + (first_ts - flow.start_us) // 2, SYN | ACK))
    seq[INBOUND] += 1
    out.append(pkt(OUTBOUND, first_ts, ACK))
    for i, seg in enumerate(flow.segments):
        out.append(pkt(seg.direction, seg.ts_us, PSH | ACK, seg.payload))
        if retransmit_every and i % retransmit_every == retransmit_every - 1:
            out.append(pkt(seg.direction, seg.ts_us + 500, PSH | ACK, seg.payload))
        seq[seg.direction] += len(seg.payload)
        if pure_acks:
            out.append(pkt(-seg.direction, seg.ts_us, ACK))
    out.append(pkt(OUTBOUND, flow.end_us, FIN | ACK))
    seq[OUTBOUND] += 1
    out.append(pkt(INBOUND, flow.end_us, FIN | ACK))
    return out


def write_pcap(flows: Iterable[FlowRecord], pure_acks: bool = True, retransmit_every: int = 0) -> bytes:
    """Render flows into one time-ordered little-endian pcap file."""
    packets = []
    for f_idx, flow in enumerate(flows):
        for p_idx, (p, ack) in enumerate(flow_packets(flow, pure_acks, retransmit_every)):
            packets.append((p.ts_us, f_idx, p_idx, p, ack))
    packets.sort(key=lambda item: item[:3])
    parts = [pcap_header()]
    for n, (_, _, _, p, ack) in enumerate(packets):
        parts.append(pcap_record(p.ts_sec, p.ts_usec, encode_packet(p, ack=ack, ip_id=n)))
    return b"".join(parts)


def make_family_profiles(
    n_families: int,
    seed: int,
    signature_prob: float = 0.85,
    noise_prob: float = 0.2,
    shared_suites: int = 6,
    flows_per_window: tuple = (3, 7),
) -> list[ClassProfile]:
    """Families that overlap in TLS parameters, for attribution experiments.

    Every family offers a common pool of suites at random plus a few
    signature suites of its own with ``signature_prob``; with
    ``noise_prob`` it also offers each other family's signature suites,
    which makes single flows ambiguous.
    """
    rng = np.random.default_rng(seed)
    pool = sorted(default_registry().ciphersuites)
    pool = [c for c in pool if c not in (0x0000, 0x00FD)]
    picks = rng.choice(len(pool), size=shared_suites + 3 * n_families, replace=False)
    shared = [pool[i] for i in picks[:shared_suites]]
    sig = [[pool[i] for i in picks[shared_suites + 3 * f : shared_suites + 3 * f + 3]] for f in range(n_families)]
    profiles = []
    for f in range(n_families):
        offers = {hex(c): 0.5 for c in shared}
        for g in range(n_families):
            for c in sig[g]:
                offers[hex(c)] = signature_prob if g == f else noise_prob
        profiles.append(
            ClassProfile(
                label=f"family{f:02d}",
                suite_offer_probs=offers,
                ext_probs={"0x000d": 0.5, "0x0000": 0.5, "0xff01": 0.5},
                key_exchange=[{"kx": "RSA", "bits": 2048, "p": 0.5}, {"kx": "ECDHE", "bits": 512, "p": 0.5}],
                flows_per_window=flows_per_window,
                app_packets=(2, 6),
            )
        )
    return profiles
