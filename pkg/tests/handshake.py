"""A complete TLS 1.2 handshake laid out as flow segments."""

from datetime import datetime, timedelta, timezone

from tlscope import tls
from tlscope.ingest import INBOUND, OUTBOUND, Segment
from tlscope.x509 import build_certificate

UTC = timezone.utc
SUITES = (0xC02F, 0x002F, 0x0035, 0x000A)
EXTS = (0x0000, 0x000A, 0x000B, 0x000D, 0xFF01)


def cert(self_signed=False, days=375, sans=3):
    subj = [("CN", "srv.example")]
    return build_certificate(subj, subj if self_signed else [("O", "CA"), ("CN", "CA 1")],
                             datetime(2016, 1, 1, tzinfo=UTC), datetime(2016, 1, 1, tzinfo=UTC) + timedelta(days=days),
                             [f"n{i}.example" for i in range(sans)])


def flights(suites=SUITES, exts=EXTS, selected=0xC02F, key=b"\x04" + bytes(64), version=0x0303, der=None, kx="ECDHE"):
    """(client hello, server flight, client flight) handshake byte strings."""
    der = der if der is not None else cert()
    hello = tls.client_hello(version, suites, exts, random=bytes(range(32)), session_id=b"\x11" * 32, sni="srv.example")
    server = tls.server_hello(version, selected, (0xFF01, 0x000B)) + tls.certificate_message([der]) + tls.server_hello_done()
    cke = tls.client_key_exchange(kx, key, version)
    return hello, server, cke


def segments(split_client=(), split_server=(), tcp_cuts=(), **kw):
    hello, server, cke = flights(**kw)
    c1 = tls.tls_records(0x16, hello, split_at=split_client)
    s1 = tls.tls_records(0x16, server, split_at=split_server)
    c2 = tls.tls_records(0x16, cke) + tls.tls_records(0x14, b"\x01") + tls.tls_records(0x16, bytes(40))
    s2 = tls.tls_records(0x14, b"\x01") + tls.tls_records(0x16, bytes(40))
    app = tls.tls_records(0x17, b"\xaa" * 300)
    out = []
    for direction, t, blob in ((OUTBOUND, 10_000, c1), (INBOUND, 40_000, s1), (OUTBOUND, 41_000, c2),
                               (INBOUND, 70_000, s2), (OUTBOUND, 90_000, app)):
        cuts = [0] + sorted(c for c in tcp_cuts if 0 < c < len(blob)) + [len(blob)]
        for a, b in zip(cuts, cuts[1:]):
            out.append(Segment(direction, t, blob[a:b]))
    return out
