"""TLS record/handshake parsing, code registries and client fingerprints."""

from __future__ import annotations

import bisect
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

from .errors import GarbledLength, MalformedDer, MissingConfig, TruncatedHandshake, UnknownKeyExchange
from .x509 import CertificateInfo, parse_certificate

log = logging.getLogger(__name__)

MAX_RECORD_LEN = 2**14 + 2048

CT_CHANGE_CIPHER_SPEC = 0x14
CT_ALERT = 0x15
CT_HANDSHAKE = 0x16
CT_APPLICATION_DATA = 0x17
CT_HEARTBEAT = 0x18

HS_CLIENT_HELLO = 0x01
HS_SERVER_HELLO = 0x02
HS_CERTIFICATE = 0x0B
HS_SERVER_KEY_EXCHANGE = 0x0C
HS_SERVER_HELLO_DONE = 0x0E
HS_CLIENT_KEY_EXCHANGE = 0x10

UNKNOWN = "Unknown"

PathLike = Union[str, Path]


def hexcode(code: int) -> str:
    return f"0x{code:04x}"


def parse_hexcode(text: Union[str, int]) -> int:
    if isinstance(text, int):
        return text
    value = int(text, 16)
    if not 0 <= value <= 0xFFFF:
        raise ValueError(f"not a 16-bit code: {text!r}")
    return value


def _data_path(name: str):
    return resources.files("tlscope").joinpath("data", name)


def _load_json(path: Optional[PathLike], default_name: str):
    if path is None:
        return json.loads(_data_path(default_name).read_text())
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------- registry


@dataclass(frozen=True)
class CodeRegistry:
    ciphersuites: Mapping[int, str]
    extensions: Mapping[int, str]
    version: str = "unversioned"

    @classmethod
    def load(cls, path: Optional[PathLike] = None) -> "CodeRegistry":
        raw = _load_json(path, "registry.json")
        return cls(
            ciphersuites={parse_hexcode(k): v for k, v in raw["ciphersuites"].items()},
            extensions={parse_hexcode(k): v for k, v in raw["extensions"].items()},
            version=raw.get("version", "unversioned"),
        )

    def suite_name(self, code: int) -> str:
        return self.ciphersuites.get(code) or f"unassigned({hexcode(code)})"

    def extension_name(self, code: int) -> str:
        return self.extensions.get(code) or f"unassigned({hexcode(code)})"

    def key_exchange(self, suite: int) -> str:
        """Key-exchange family ("RSA", "DHE" or "ECDHE") of a ciphersuite."""
        name = self.ciphersuites.get(suite, "")
        if name.startswith(("TLS_ECDHE_", "TLS_ECDH_")) and "_PSK_" not in name:
            return "ECDHE"
        if name.startswith(("TLS_DHE_", "TLS_DH_")) and "_PSK_" not in name:
            return "DHE"
        if name.startswith("TLS_RSA_") and not name.startswith("TLS_RSA_PSK_"):
            return "RSA"
        raise UnknownKeyExchange(f"no key-exchange family for {hexcode(suite)} ({name or 'unregistered'})")


_default_registry: Optional[CodeRegistry] = None


def default_registry() -> CodeRegistry:
    global _default_registry
    if _default_registry is None:
        _default_registry = CodeRegistry.load()
    return _default_registry


# ---------------------------------------------------------------- summary


@dataclass(frozen=True)
class TlsHandshakeSummary:
    client_version: int
    offered_ciphersuites: tuple[int, ...]
    advertised_extensions: tuple[int, ...] = ()
    selected_ciphersuite: Optional[int] = None
    selected_extensions: tuple[int, ...] = ()
    client_public_key_bits: Optional[int] = None
    certificate: Optional[CertificateInfo] = None
    records: tuple[tuple[int, int, int], ...] = ()
    complete: bool = True

    def to_dict(self) -> dict:
        return {
            "version": hexcode(self.client_version),
            "cs": [hexcode(c) for c in self.offered_ciphersuites],
            "ext": [hexcode(c) for c in self.advertised_extensions],
            "scs": hexcode(self.selected_ciphersuite) if self.selected_ciphersuite is not None else None,
            "sext": [hexcode(c) for c in self.selected_extensions],
            "cpk_bits": self.client_public_key_bits,
            "cert": self.certificate.to_dict() if self.certificate is not None else None,
            "records": [list(r) for r in self.records],
            "complete": self.complete,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TlsHandshakeSummary":
        scs = d.get("scs")
        cert = d.get("cert")
        return cls(
            client_version=parse_hexcode(d["version"]),
            offered_ciphersuites=tuple(parse_hexcode(c) for c in d["cs"]),
            advertised_extensions=tuple(parse_hexcode(c) for c in d.get("ext", ())),
            selected_ciphersuite=parse_hexcode(scs) if scs is not None else None,
            selected_extensions=tuple(parse_hexcode(c) for c in d.get("sext", ())),
            client_public_key_bits=d.get("cpk_bits"),
            certificate=CertificateInfo.from_dict(cert) if cert else None,
            records=tuple((int(a), int(b), int(c)) for a, b, c in d.get("records", ())),
            complete=bool(d.get("complete", True)),
        )


# ---------------------------------------------------------------- parsing


class _Reader:
    __slots__ = ("buf", "pos", "end")

    def __init__(self, buf: bytes, pos: int = 0, end: Optional[int] = None):
        self.buf = buf
        self.pos = pos
        self.end = len(buf) if end is None else end

    def remaining(self) -> int:
        return self.end - self.pos

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise TruncatedHandshake(f"need {n} bytes, {self.remaining()} left")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return int.from_bytes(self.take(2), "big")

    def u24(self) -> int:
        return int.from_bytes(self.take(3), "big")

    def vec(self, width: int) -> bytes:
        n = int.from_bytes(self.take(width), "big")
        return self.take(n)


def _codes(blob: bytes) -> list[int]:
    return [int.from_bytes(blob[i : i + 2], "big") for i in range(0, len(blob) - 1, 2)]


def _extension_types(r: _Reader) -> list[int]:
    if r.remaining() < 2:
        return []
    body = _Reader(r.vec(2))
    types = []
    while body.remaining():
        types.append(body.u16())
        body.vec(2)
    return types


@dataclass
class _Direction:
    stream: bytearray = field(default_factory=bytearray)
    starts: list[int] = field(default_factory=list)  # stream offset of each segment
    order: list[int] = field(default_factory=list)  # global segment index
    stamps: list[int] = field(default_factory=list)
    handshake: bytearray = field(default_factory=bytearray)


def _walk_records(d: _Direction, records: list) -> None:
    buf = bytes(d.stream)
    pos = 0
    encrypted = False
    while pos + 5 <= len(buf):
        ctype = buf[pos]
        if not CT_CHANGE_CIPHER_SPEC <= ctype <= CT_HEARTBEAT or buf[pos + 1] != 0x03:
            break  # not a TLS record boundary; stop following this direction
        length = int.from_bytes(buf[pos + 3 : pos + 5], "big")
        if length > MAX_RECORD_LEN:
            raise GarbledLength(f"record length {length} exceeds {MAX_RECORD_LEN}")
        seg = bisect.bisect_right(d.starts, pos) - 1
        records.append((d.order[seg], pos, ctype, length, d.stamps[seg]))
        body = buf[pos + 5 : pos + 5 + length]
        if ctype == CT_HANDSHAKE and not encrypted:
            d.handshake.extend(body)
        elif ctype == CT_CHANGE_CIPHER_SPEC:
            encrypted = True
        pos += 5 + length


def _messages(buf: bytes) -> tuple[list[tuple[int, bytes]], bool]:
    """Split a handshake byte stream into (type, body) messages.

    A trailing message cut short keeps whatever body bytes exist, and the
    second return value turns False.
    """
    out = []
    r = _Reader(bytes(buf))
    while r.remaining():
        mtype = r.u8()
        if r.remaining() < 3:
            return out, False
        length = r.u24()
        if length > r.remaining():
            out.append((mtype, r.take(r.remaining())))
            return out, False
        out.append((mtype, r.take(length)))
    return out, True


def _parse_client_hello(body: bytes) -> tuple[int, list[int], list[int], bool]:
    r = _Reader(body)
    version = r.u16()
    suites: list[int] = []
    exts: list[int] = []
    try:
        r.take(32)
        r.vec(1)
        suites = _codes(r.vec(2))
        r.vec(1)
        exts = _extension_types(r)
    except TruncatedHandshake:
        return version, suites, exts, False
    return version, suites, exts, True


def _parse_server_hello(body: bytes) -> tuple[Optional[int], list[int], bool]:
    r = _Reader(body)
    suite = None
    try:
        r.u16()
        r.take(32)
        r.vec(1)
        suite = r.u16()
        r.u8()
        return suite, _extension_types(r), True
    except TruncatedHandshake:
        return suite, [], False


def _leaf_certificate(body: bytes) -> Optional[bytes]:
    r = _Reader(body)
    chain = _Reader(r.vec(3))
    if not chain.remaining():
        return None
    return chain.vec(3)


def public_key_bits(
    body: bytes,
    selected_ciphersuite: int,
    registry: Optional[CodeRegistry] = None,
    version: int = 0x0303,
) -> int:
    """Client key size in bits from a clientKeyExchange body."""
    registry = registry or default_registry()
    kx = registry.key_exchange(selected_ciphersuite)
    r = _Reader(body)
    if kx == "RSA":
        field_ = r.take(r.remaining()) if version == 0x0300 else r.vec(2)
        return 8 * len(field_)
    if kx == "DHE":
        return 8 * len(r.vec(2))
    point = r.vec(1)
    if not point:
        raise TruncatedHandshake("empty EC point")
    return 8 * (len(point) - 1)


def parse_handshake(
    segments: Sequence,
    start_us: Optional[int] = None,
    registry: Optional[CodeRegistry] = None,
) -> Optional[TlsHandshakeSummary]:
    """Summarize the TLS handshake carried by a flow's payload segments.

    ``segments`` are the flow's payload packets in capture order, each with
    ``direction`` (+1 initiator, -1 responder), ``ts_us`` and ``payload``.
    Returns None when no clientHello with at least one ciphersuite can be
    recovered or a record length is garbled. A handshake that runs out of
    bytes yields a partial summary with ``complete=False``.
    """
    if not segments:
        return None
    if start_us is None:
        start_us = segments[0].ts_us
    dirs = {1: _Direction(), -1: _Direction()}
    for i, seg in enumerate(segments):
        d = dirs[1 if seg.direction > 0 else -1]
        d.starts.append(len(d.stream))
        d.order.append(i)
        d.stamps.append(seg.ts_us)
        d.stream.extend(seg.payload)

    raw_records: list = []
    try:
        _walk_records(dirs[1], raw_records)
        _walk_records(dirs[-1], raw_records)
    except GarbledLength as exc:
        log.debug("dropping TLS summary: %s", exc)
        return None
    raw_records.sort(key=lambda rec: (rec[0], rec[1]))
    records = []
    prev = start_us
    for _seg, _pos, ctype, length, ts in raw_records:
        records.append((ctype, length, (ts - prev) // 1000))
        prev = ts

    complete = True
    client_msgs, ok = _messages(dirs[1].handshake)
    complete &= ok
    server_msgs, ok = _messages(dirs[-1].handshake)
    complete &= ok

    hello = next((b for t, b in client_msgs if t == HS_CLIENT_HELLO), None)
    if hello is None:
        return None
    try:
        version, suites, exts, ok = _parse_client_hello(hello)
    except TruncatedHandshake:
        return None
    complete &= ok
    if not suites:
        return None

    selected = None
    selected_exts: list[int] = []
    certificate = None
    for mtype, body in server_msgs:
        if mtype == HS_SERVER_HELLO and selected is None:
            selected, selected_exts, ok = _parse_server_hello(body)
            complete &= ok
        elif mtype == HS_CERTIFICATE and certificate is None:
            try:
                der = _leaf_certificate(body)
                certificate = parse_certificate(der) if der else None
            except TruncatedHandshake:
                complete = False
            except MalformedDer as exc:
                log.debug("unparseable certificate: %s", exc)

    key_bits = None
    cke = next((b for t, b in client_msgs if t == HS_CLIENT_KEY_EXCHANGE), None)
    if cke is not None and selected is not None:
        try:
            key_bits = public_key_bits(cke, selected, registry, version) or None
        except UnknownKeyExchange:
            pass
        except TruncatedHandshake:
            complete = False

    return TlsHandshakeSummary(
        client_version=version,
        offered_ciphersuites=tuple(suites),
        advertised_extensions=tuple(exts),
        selected_ciphersuite=selected,
        selected_extensions=tuple(selected_exts),
        client_public_key_bits=key_bits,
        certificate=certificate,
        records=tuple(records),
        complete=complete,
    )


# ---------------------------------------------------------------- fingerprints


@dataclass(frozen=True)
class FingerprintDB:
    entries: Mapping[tuple[tuple[int, ...], tuple[int, ...]], str]

    @classmethod
    def from_list(cls, items: Iterable[Mapping]) -> "FingerprintDB":
        entries = {}
        for item in items:
            key = (
                tuple(parse_hexcode(c) for c in item["suites"]),
                tuple(parse_hexcode(c) for c in item.get("extensions", ())),
            )
            entries.setdefault(key, item["label"])
        return cls(entries)

    @classmethod
    def load(cls, path: Optional[PathLike] = None) -> "FingerprintDB":
        return cls.from_list(_load_json(path, "fingerprints.json"))


def fingerprint_client(summary: TlsHandshakeSummary, db: FingerprintDB) -> str:
    """Label of the client whose ordered suites and extensions match exactly."""
    key = (tuple(summary.offered_ciphersuites), tuple(summary.advertised_extensions))
    return db.entries.get(key, UNKNOWN)


@dataclass(frozen=True)
class SchannelConfig:
    lists: frozenset
    version: str

    @classmethod
    def from_lists(cls, lists: Iterable[Iterable]) -> "SchannelConfig":
        normalized = sorted(tuple(parse_hexcode(c) for c in lst) for lst in lists)
        canon = json.dumps([[hexcode(c) for c in lst] for lst in normalized]).encode()
        return cls(frozenset(normalized), "xp-" + hashlib.sha256(canon).hexdigest()[:12])

    @classmethod
    def load(cls, path: Optional[PathLike] = None) -> "SchannelConfig":
        return cls.from_lists(_load_json(path, "xp_schannel.json"))


def is_schannel_xp(summary: TlsHandshakeSummary, config: SchannelConfig) -> bool:
    if not config.lists:
        raise MissingConfig("XP SChannel list set is empty")
    return tuple(summary.offered_ciphersuites) in config.lists


# ---------------------------------------------------------------- wire builders

DEFAULT_EXT_DATA = {
    0x000A: b"\x00\x06\x00\x17\x00\x18\x00\x19",
    0x000B: b"\x01\x00",
    0x000D: b"\x00\x08\x04\x01\x05\x01\x02\x01\x04\x03",
    0xFF01: b"\x00",
}


def _extensions_block(codes: Sequence[int], data: Optional[Mapping[int, bytes]] = None, sni: Optional[str] = None) -> bytes:
    parts = []
    for code in codes:
        if data is not None and code in data:
            payload = data[code]
        elif code == 0x0000 and sni:
            name = sni.encode()
            entry = b"\x00" + struct.pack(">H", len(name)) + name
            payload = struct.pack(">H", len(entry)) + entry
        else:
            payload = DEFAULT_EXT_DATA.get(code, b"")
        parts.append(struct.pack(">HH", code, len(payload)) + payload)
    blob = b"".join(parts)
    return struct.pack(">H", len(blob)) + blob


def handshake_message(mtype: int, body: bytes) -> bytes:
    return bytes([mtype]) + len(body).to_bytes(3, "big") + body


def client_hello(
    version: int,
    suites: Sequence[int],
    extensions: Sequence[int] = (),
    random: bytes = bytes(32),
    session_id: bytes = b"",
    sni: Optional[str] = None,
    ext_data: Optional[Mapping[int, bytes]] = None,
    force_ext_block: bool = False,
) -> bytes:
    body = (
        struct.pack(">H", version)
        + random
        + bytes([len(session_id)])
        + session_id
        + struct.pack(">H", 2 * len(suites))
        + b"".join(struct.pack(">H", s) for s in suites)
        + b"\x01\x00"
    )
    if extensions or force_ext_block:
        body += _extensions_block(extensions, ext_data, sni)
    return handshake_message(HS_CLIENT_HELLO, body)


def server_hello(version: int, suite: int, extensions: Sequence[int] = (), random: bytes = bytes(32), session_id: bytes = b"") -> bytes:
    body = struct.pack(">H", version) + random + bytes([len(session_id)]) + session_id + struct.pack(">HB", suite, 0)
    if extensions:
        body += _extensions_block(extensions)
    return handshake_message(HS_SERVER_HELLO, body)


def certificate_message(chain: Sequence[bytes]) -> bytes:
    certs = b"".join(len(c).to_bytes(3, "big") + c for c in chain)
    return handshake_message(HS_CERTIFICATE, len(certs).to_bytes(3, "big") + certs)


def server_hello_done() -> bytes:
    return handshake_message(HS_SERVER_HELLO_DONE, b"")


def client_key_exchange(kx: str, key_bytes: bytes, version: int = 0x0303) -> bytes:
    """clientKeyExchange carrying ``key_bytes`` as the RSA ciphertext, DH value or EC point."""
    if kx == "RSA":
        body = key_bytes if version == 0x0300 else struct.pack(">H", len(key_bytes)) + key_bytes
    elif kx == "DHE":
        body = struct.pack(">H", len(key_bytes)) + key_bytes
    elif kx == "ECDHE":
        body = bytes([len(key_bytes)]) + key_bytes
    else:
        raise UnknownKeyExchange(kx)
    return handshake_message(HS_CLIENT_KEY_EXCHANGE, body)


def tls_records(ctype: int, payload: bytes, version: int = 0x0303, split_at: Sequence[int] = ()) -> bytes:
    """Wrap ``payload`` in records, fragmenting at the given payload offsets."""
    cuts = [0] + sorted(set(c for c in split_at if 0 < c < len(payload))) + [len(payload)]
    out = bytearray()
    for a, b in zip(cuts, cuts[1:]):
        out += struct.pack(">BHH", ctype, version, b - a) + payload[a:b]
    if not payload:
        out += struct.pack(">BHH", ctype, version, 0)
    return bytes(out)
