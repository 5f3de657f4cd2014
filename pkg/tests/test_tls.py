import struct

import pytest
from hypothesis import given, settings, strategies as st

from tlscope import tls
from tlscope.errors import MissingConfig, UnknownKeyExchange
from tlscope.ingest import INBOUND, OUTBOUND, Segment
from tlscope.tls import (
    CodeRegistry, FingerprintDB, SchannelConfig, TlsHandshakeSummary, fingerprint_client, is_schannel_xp,
    parse_handshake, public_key_bits,
)
import handshake as hs


def hand_client_hello(suites, ext_types=None):
    body = struct.pack(">H", 0x0303) + bytes(32) + b"\x00" + struct.pack(">H", 2 * len(suites))
    body += b"".join(struct.pack(">H", s) for s in suites) + b"\x01\x00"
    if ext_types is not None:
        exts = b"".join(struct.pack(">HH", t, 0) for t in ext_types)
        body += struct.pack(">H", len(exts)) + exts
    msg = b"\x01" + len(body).to_bytes(3, "big") + body
    return b"\x16\x03\x01" + struct.pack(">H", len(msg)) + msg


def test_hand_built_hello():
    s = parse_handshake([Segment(OUTBOUND, 0, hand_client_hello([0x0004, 0x0005, 0x000A]))])
    assert s.offered_ciphersuites == (0x0004, 0x0005, 0x000A)
    assert s.advertised_extensions == () and s.client_version == 0x0303
    assert s.records == ((0x16, len(hand_client_hello([4, 5, 10])) - 5, 0),)


def test_hand_built_extensions_keep_order():
    s = parse_handshake([Segment(OUTBOUND, 0, hand_client_hello([0x002F], [0x000D, 0x0000, 0xFF01]))])
    assert s.advertised_extensions == (0x000D, 0x0000, 0xFF01)


def test_zero_suites_rejected():
    assert parse_handshake([Segment(OUTBOUND, 0, hand_client_hello([]))]) is None


def test_full_handshake():
    s = parse_handshake(hs.segments(), start_us=0)
    assert s.complete
    assert s.offered_ciphersuites == hs.SUITES and s.advertised_extensions == hs.EXTS
    assert s.selected_ciphersuite == 0xC02F and s.selected_extensions == (0xFF01, 0x000B)
    assert s.client_public_key_bits == 512
    c = s.certificate
    assert (c.subject, c.issuer, c.validity_days, c.san_count, c.self_signed) == ("CN=srv.example", "CN=CA 1,O=CA", 375, 3, False)
    types = [r[0] for r in s.records]
    assert types == [0x16, 0x16, 0x16, 0x14, 0x16, 0x14, 0x16, 0x17]
    assert [r[2] for r in s.records] == [10, 30, 1, 0, 0, 29, 0, 20]


def test_self_signed_cert_in_handshake():
    s = parse_handshake(hs.segments(der=hs.cert(self_signed=True)), start_us=0)
    assert s.certificate.self_signed


def test_two_record_hello_split_mid_extensions():
    hello, _, _ = hs.flights()
    whole = parse_handshake(hs.segments(), 0)
    split = parse_handshake(hs.segments(split_client=(len(hello) - 7,)), 0)
    assert split.records[0][1] + split.records[1][1] == whole.records[0][1]
    assert _strip(split) == _strip(whole)


def _strip(s):
    d = s.to_dict()
    d.pop("records")
    return d


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 3000), max_size=4), st.lists(st.integers(1, 3000), max_size=4), st.lists(st.integers(1, 700), max_size=4))
def test_fragmentation_invariance(cs, ss, tcp):
    whole = parse_handshake(hs.segments(), 0)
    assert _strip(parse_handshake(hs.segments(split_client=cs, split_server=ss), 0)) == _strip(whole)
    # TCP segmentation alone leaves even the record table unchanged
    assert parse_handshake(hs.segments(tcp_cuts=tcp), 0) == whole


def test_truncated_handshake_is_partial():
    segs = hs.segments()
    cut = [segs[0], Segment(INBOUND, segs[1].ts_us, segs[1].payload[:200])]
    s = parse_handshake(cut, 0)
    assert s is not None and not s.complete
    assert s.selected_ciphersuite == 0xC02F and s.certificate is None


def test_garbled_length_drops_summary():
    segs = hs.segments()
    bad = bytearray(segs[1].payload)
    bad[3:5] = (2**14 + 2049).to_bytes(2, "big")
    assert parse_handshake([segs[0], Segment(INBOUND, 1, bytes(bad))]) is None


@pytest.mark.parametrize("kx,suite,key,bits", [
    ("RSA", 0x002F, bytes(256), 2048),
    ("ECDHE", 0xC02F, b"\x04" + bytes(64), 512),
    ("DHE", 0x0039, bytes(256), 2048),
])
def test_public_key_bits(kx, suite, key, bits):
    body = tls.client_key_exchange(kx, key)[4:]
    assert public_key_bits(body, suite) == bits


def test_public_key_bits_ssl3_rsa_has_no_prefix():
    assert public_key_bits(bytes(128), 0x0004, version=0x0300) == 1024


def test_unknown_key_exchange():
    with pytest.raises(UnknownKeyExchange):
        public_key_bits(bytes(10), 0x00FD)
    reg = CodeRegistry.load()
    assert reg.key_exchange(0xC013) == "ECDHE" and reg.key_exchange(0x0033) == "DHE" and reg.key_exchange(0x0004) == "RSA"
    assert reg.suite_name(0x1234) == "unassigned(0x1234)"


def test_registry_follows_hex_table():
    reg = CodeRegistry.load()
    assert reg.extension_name(0x000A) == "supported_groups"
    assert reg.extension_name(0x0010) == "application_layer_protocol_negotiation"
    assert reg.suite_name(0x002F) == "TLS_RSA_WITH_AES_128_CBC_SHA"


def summary(suites, exts=()):
    return TlsHandshakeSummary(0x0303, tuple(suites), tuple(exts))


def test_fingerprints():
    db = FingerprintDB.load()
    opera = summary([0x006B, 0x0039, 0x0035, 0x0067, 0x0033, 0x002F, 0x0005, 0x0004, 0x000A], [0x000D])
    assert fingerprint_client(opera, db) == "Opera 12"
    assert fingerprint_client(summary([0x1301]), db) == "Unknown"


def test_fingerprint_is_order_sensitive():
    db = FingerprintDB.from_list([{"label": "X", "suites": ["0x002f"], "extensions": ["0x0000", "0x000d"]}])
    assert fingerprint_client(summary([0x2F], [0x0000, 0x000D]), db) == "X"
    assert fingerprint_client(summary([0x2F], [0x000D, 0x0000]), db) == "Unknown"


@settings(max_examples=80, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=3), st.lists(st.integers(0, 3), max_size=2))
def test_fingerprint_exhaustive_small(suites, exts):
    db = FingerprintDB.from_list([
        {"label": "L1", "suites": ["0x0000", "0x0001"], "extensions": []},
        {"label": "L2", "suites": ["0x0002"], "extensions": ["0x0003"]},
    ])
    got = fingerprint_client(summary(suites, exts), db)
    expect = {((0, 1), ()): "L1", ((2,), (3,)): "L2"}.get((tuple(suites), tuple(exts)), "Unknown")
    assert got == expect


def test_schannel_xp():
    cfg = SchannelConfig.load()
    xp = [0x0004, 0x0005, 0x000A, 0x0009, 0x0064, 0x0062, 0x0003, 0x0006, 0x0013, 0x0012, 0x0063]
    assert is_schannel_xp(summary(xp), cfg)
    assert not is_schannel_xp(summary(list(reversed(xp))), cfg)
    assert not is_schannel_xp(summary(xp + [0x002F]), cfg)
    assert cfg.version.startswith("xp-")
    with pytest.raises(MissingConfig):
        is_schannel_xp(summary(xp), SchannelConfig.from_lists([]))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 0xFFFF), min_size=1, max_size=40), st.lists(st.integers(0, 0xFFFF), max_size=15, unique=True))
def test_client_hello_round_trip(suites, exts):
    s = parse_handshake([Segment(OUTBOUND, 0, tls.tls_records(0x16, tls.client_hello(0x0303, suites, exts)))])
    assert s.offered_ciphersuites == tuple(suites) and s.advertised_extensions == tuple(exts)


def test_summary_dict_round_trip():
    s = parse_handshake(hs.segments(), 0)
    assert TlsHandshakeSummary.from_dict(s.to_dict()) == s
