"""Minimal DER reader/writer for the X.509 fields the classifier needs.

Only the leaf certificate's subject, issuer, validity window and
subjectAltName count are decoded. No signature or chain checks are made.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Iterable, Optional, Sequence

from .errors import MalformedDer

# universal tags
BOOLEAN = 0x01
INTEGER = 0x02
BIT_STRING = 0x03
OCTET_STRING = 0x04
NULL = 0x05
OID = 0x06
UTF8_STRING = 0x0C
PRINTABLE_STRING = 0x13
T61_STRING = 0x14
IA5_STRING = 0x16
UTC_TIME = 0x17
GENERALIZED_TIME = 0x18
UNIVERSAL_STRING = 0x1C
BMP_STRING = 0x1E
SEQUENCE = 0x30
SET = 0x31

OID_SUBJECT_ALT_NAME = "2.5.29.17"

ATTR_NAMES = {
    "2.5.4.3": "CN",
    "2.5.4.6": "C",
    "2.5.4.7": "L",
    "2.5.4.8": "ST",
    "2.5.4.9": "STREET",
    "2.5.4.10": "O",
    "2.5.4.11": "OU",
    "0.9.2342.19200300.100.1.1": "UID",
    "0.9.2342.19200300.100.1.25": "DC",
}
ATTR_OIDS = {v: k for k, v in ATTR_NAMES.items()}


@dataclass(frozen=True)
class CertificateInfo:
    subject: str
    issuer: str
    validity_days: int
    san_count: int
    self_signed: bool

    def to_dict(self) -> dict:
        return {
            "subject": self.subject,
            "issuer": self.issuer,
            "validity_days": self.validity_days,
            "san_count": self.san_count,
            "self_signed": self.self_signed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CertificateInfo":
        return cls(d["subject"], d["issuer"], int(d["validity_days"]), int(d["san_count"]), bool(d["self_signed"]))


# ---------------------------------------------------------------- reading


@dataclass(frozen=True)
class Tlv:
    tag: int
    start: int  # offset of the tag byte
    vstart: int
    end: int

    def raw(self, buf: bytes) -> bytes:
        return buf[self.start : self.end]

    def value(self, buf: bytes) -> bytes:
        return buf[self.vstart : self.end]


def read_tlv(buf: bytes, pos: int, limit: Optional[int] = None) -> Tlv:
    if limit is None:
        limit = len(buf)
    if pos + 2 > limit:
        raise MalformedDer("truncated TLV header")
    tag = buf[pos]
    if tag & 0x1F == 0x1F:
        raise MalformedDer("high-tag-number form not supported")
    first = buf[pos + 1]
    p = pos + 2
    if first < 0x80:
        length = first
    else:
        nbytes = first & 0x7F
        if nbytes == 0 or nbytes > 4 or p + nbytes > limit:
            raise MalformedDer("bad length encoding")
        length = int.from_bytes(buf[p : p + nbytes], "big")
        p += nbytes
    if p + length > limit:
        raise MalformedDer("TLV overruns its container")
    return Tlv(tag, pos, p, p + length)


def children(buf: bytes, tlv: Tlv) -> list[Tlv]:
    out = []
    pos = tlv.vstart
    while pos < tlv.end:
        child = read_tlv(buf, pos, tlv.end)
        out.append(child)
        pos = child.end
    return out


def decode_oid(value: bytes) -> str:
    if not value:
        raise MalformedDer("empty OID")
    arcs = []
    acc = 0
    for b in value:
        acc = (acc << 7) | (b & 0x7F)
        if not b & 0x80:
            arcs.append(acc)
            acc = 0
    if value[-1] & 0x80:
        raise MalformedDer("unterminated OID arc")
    first = arcs[0]
    head = [min(first // 40, 2), first - 40 * min(first // 40, 2)]
    return ".".join(str(a) for a in head + arcs[1:])


def decode_time(tag: int, value: bytes) -> datetime:
    try:
        text = value.decode("ascii")
    except UnicodeDecodeError as exc:
        raise MalformedDer("non-ASCII time") from exc
    if not text.endswith("Z"):
        raise MalformedDer(f"time without Z suffix: {text!r}")
    try:
        if tag == UTC_TIME:
            yy = int(text[:2])
            year = 2000 + yy if yy < 50 else 1900 + yy
            dt = datetime.strptime(f"{year:04d}" + text[2:-1], "%Y%m%d%H%M%S")
        elif tag == GENERALIZED_TIME:
            dt = datetime.strptime(text[:-1].split(".")[0], "%Y%m%d%H%M%S")
        else:
            raise MalformedDer(f"unexpected time tag 0x{tag:02x}")
    except ValueError as exc:
        raise MalformedDer(f"bad time {text!r}") from exc
    return dt.replace(tzinfo=timezone.utc)


def _decode_string(tag: int, value: bytes) -> Optional[str]:
    try:
        if tag in (UTF8_STRING, PRINTABLE_STRING, IA5_STRING):
            return value.decode("utf-8")
        if tag == T61_STRING:
            return value.decode("latin-1")
        if tag == BMP_STRING:
            return value.decode("utf-16-be")
        if tag == UNIVERSAL_STRING:
            return value.decode("utf-32-be")
    except UnicodeDecodeError:
        return None
    return None


def _escape(value: str) -> str:
    out = []
    for i, ch in enumerate(value):
        if ch in ',+"\\<>;' or (i == 0 and ch in "# ") or (i == len(value) - 1 and ch == " "):
            out.append("\\" + ch)
        else:
            out.append(ch)
    return "".join(out)


def render_name(buf: bytes, name: Tlv) -> str:
    """RFC 2253 string for a Name: last RDN first, AVAs joined by '+'."""
    if name.tag != SEQUENCE:
        raise MalformedDer("Name is not a SEQUENCE")
    rdns = []
    for rdn in children(buf, name):
        if rdn.tag != SET:
            raise MalformedDer("RDN is not a SET")
        avas = []
        for ava in children(buf, rdn):
            parts = children(buf, ava)
            if len(parts) != 2 or parts[0].tag != OID:
                raise MalformedDer("malformed AttributeTypeAndValue")
            oid = decode_oid(parts[0].value(buf))
            text = _decode_string(parts[1].tag, parts[1].value(buf))
            key = ATTR_NAMES.get(oid, oid)
            if text is None or key == oid:
                avas.append(f"{key}=#{parts[1].raw(buf).hex()}")
            else:
                avas.append(f"{key}={_escape(text)}")
        rdns.append("+".join(avas))
    return ",".join(reversed(rdns))


def parse_certificate(der: bytes) -> CertificateInfo:
    """Summarize one DER certificate. Raises MalformedDer on bad input."""
    cert = read_tlv(der, 0)
    if cert.tag != SEQUENCE or cert.end != len(der):
        raise MalformedDer("certificate is not a single SEQUENCE")
    parts = children(der, cert)
    if len(parts) != 3 or parts[0].tag != SEQUENCE:
        raise MalformedDer("certificate must hold tbs, algorithm, signature")
    tbs = children(der, parts[0])
    i = 1 if tbs and tbs[0].tag == 0xA0 else 0
    if len(tbs) < i + 6:
        raise MalformedDer("tbsCertificate too short")
    _serial, _alg, issuer, validity, subject, _spki = tbs[i : i + 6]
    if validity.tag != SEQUENCE:
        raise MalformedDer("Validity is not a SEQUENCE")
    window = children(der, validity)
    if len(window) != 2:
        raise MalformedDer("Validity must hold two times")
    not_before = decode_time(window[0].tag, window[0].value(der))
    not_after = decode_time(window[1].tag, window[1].value(der))

    san_count = 0
    for ext_holder in tbs[i + 6 :]:
        if ext_holder.tag != 0xA3:
            continue
        inner = children(der, ext_holder)
        if len(inner) != 1 or inner[0].tag != SEQUENCE:
            raise MalformedDer("malformed extensions wrapper")
        for ext in children(der, inner[0]):
            fields = children(der, ext)
            if len(fields) < 2 or fields[0].tag != OID:
                raise MalformedDer("malformed Extension")
            if decode_oid(fields[0].value(der)) != OID_SUBJECT_ALT_NAME:
                continue
            octets = fields[-1]
            if octets.tag != OCTET_STRING:
                raise MalformedDer("extnValue is not an OCTET STRING")
            names = read_tlv(der, octets.vstart, octets.end)
            if names.tag != SEQUENCE:
                raise MalformedDer("subjectAltName is not a SEQUENCE")
            san_count = len(children(der, names))

    days = (not_after - not_before).total_seconds() // 86400
    return CertificateInfo(
        subject=render_name(der, subject),
        issuer=render_name(der, issuer),
        validity_days=int(days),
        san_count=san_count,
        self_signed=subject.raw(der) == issuer.raw(der),
    )


# ---------------------------------------------------------------- writing


def encode_tlv(tag: int, value: bytes) -> bytes:
    n = len(value)
    if n < 0x80:
        head = bytes([n])
    else:
        nb = (n.bit_length() + 7) // 8
        head = bytes([0x80 | nb]) + n.to_bytes(nb, "big")
    return bytes([tag]) + head + value


def seq(*items: bytes) -> bytes:
    return encode_tlv(SEQUENCE, b"".join(items))


def encode_oid(dotted: str) -> bytes:
    arcs = [int(a) for a in dotted.split(".")]
    body = bytearray()
    for arc in [40 * arcs[0] + arcs[1]] + arcs[2:]:
        chunk = [arc & 0x7F]
        arc >>= 7
        while arc:
            chunk.append(0x80 | (arc & 0x7F))
            arc >>= 7
        body.extend(reversed(chunk))
    return encode_tlv(OID, bytes(body))


def encode_int(v: int) -> bytes:
    n = max(1, (v.bit_length() + 8) // 8)
    return encode_tlv(INTEGER, v.to_bytes(n, "big", signed=True))


def encode_time(dt: datetime) -> bytes:
    if 1950 <= dt.year < 2050:
        return encode_tlv(UTC_TIME, dt.strftime("%y%m%d%H%M%SZ").encode())
    return encode_tlv(GENERALIZED_TIME, dt.strftime("%Y%m%d%H%M%SZ").encode())


def encode_name(rdns: Sequence[tuple[str, str]]) -> bytes:
    """Name from (attribute, value) pairs in DER order, e.g. [("C","US"),("CN","x")]."""
    sets = []
    for attr, value in rdns:
        oid = ATTR_OIDS.get(attr, attr)
        tag = PRINTABLE_STRING if attr == "C" else UTF8_STRING
        sets.append(encode_tlv(SET, seq(encode_oid(oid), encode_tlv(tag, value.encode()))))
    return seq(*sets)


# sha256WithRSAEncryption; id-ecPublicKey / prime256v1
_SIG_ALG = seq(encode_oid("1.2.840.113549.1.1.11"), encode_tlv(NULL, b""))
_EC_ALG = seq(encode_oid("1.2.840.10045.2.1"), encode_oid("1.2.840.10045.3.1.7"))


def build_certificate(
    subject: Sequence[tuple[str, str]],
    issuer: Sequence[tuple[str, str]],
    not_before: datetime,
    not_after: datetime,
    san_dns: Iterable[str] = (),
    serial: int = 1,
    extra_extensions: Iterable[bytes] = (),
) -> bytes:
    """Assemble a structurally valid v3 certificate with a dummy signature."""
    point = b"\x04" + bytes(range(1, 65))
    spki = seq(_EC_ALG, encode_tlv(BIT_STRING, b"\x00" + point))
    exts = list(extra_extensions)
    san_dns = list(san_dns)
    if san_dns:
        names = seq(*(encode_tlv(0x82, d.encode()) for d in san_dns))
        exts.append(seq(encode_oid(OID_SUBJECT_ALT_NAME), encode_tlv(OCTET_STRING, names)))
    tbs_items = [
        encode_tlv(0xA0, encode_int(2)),
        encode_int(serial),
        _SIG_ALG,
        encode_name(issuer),
        seq(encode_time(not_before), encode_time(not_after)),
        encode_name(subject),
        spki,
    ]
    if exts:
        tbs_items.append(encode_tlv(0xA3, seq(*exts)))
    return seq(seq(*tbs_items), _SIG_ALG, encode_tlv(BIT_STRING, b"\x00" + bytes(32)))
