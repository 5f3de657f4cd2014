from datetime import datetime, timedelta, timezone

import pytest
from cryptography import x509 as cx
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.x509.oid import NameOID
from hypothesis import given, settings, strategies as st

from tlscope.errors import MalformedDer
from tlscope.x509 import build_certificate, decode_time, encode_name, parse_certificate, UTC_TIME, GENERALIZED_TIME

KEY = ec.generate_private_key(ec.SECP256R1())
UTC = timezone.utc


def real_cert(subject, issuer, nb, na, sans=(), serial=7):
    def name(pairs):
        oids = {"C": NameOID.COUNTRY_NAME, "O": NameOID.ORGANIZATION_NAME, "CN": NameOID.COMMON_NAME, "OU": NameOID.ORGANIZATIONAL_UNIT_NAME}
        return cx.Name([cx.NameAttribute(oids[k], v) for k, v in pairs])

    b = (
        cx.CertificateBuilder()
        .subject_name(name(subject))
        .issuer_name(name(issuer))
        .public_key(KEY.public_key())
        .serial_number(serial)
        .not_valid_before(nb)
        .not_valid_after(na)
    )
    if sans:
        b = b.add_extension(cx.SubjectAlternativeName([cx.DNSName(s) for s in sans]), critical=False)
    b = b.add_extension(cx.BasicConstraints(ca=False, path_length=None), critical=True)
    return b.sign(KEY, hashes.SHA256())


def test_matches_cryptography_fields():
    subj = [("C", "US"), ("O", "Example, Inc."), ("CN", "www.example.com")]
    iss = [("C", "US"), ("O", "Some CA"), ("CN", "Some CA R3")]
    nb, na = datetime(2016, 3, 1, 12, tzinfo=UTC), datetime(2017, 3, 1, 11, tzinfo=UTC)
    c = real_cert(subj, iss, nb, na, ["a.example.com", "b.example.com"])
    info = parse_certificate(c.public_bytes(serialization.Encoding.DER))
    assert info.subject == c.subject.rfc4514_string()
    assert info.issuer == c.issuer.rfc4514_string()
    assert info.validity_days == (c.not_valid_after_utc - c.not_valid_before_utc).days == 364
    assert info.san_count == 2
    assert not info.self_signed


def test_real_self_signed():
    subj = [("CN", "tridayacipta.com")]
    c = real_cert(subj, subj, datetime(2016, 1, 1, tzinfo=UTC), datetime(2016, 7, 1, tzinfo=UTC))
    info = parse_certificate(c.public_bytes(serialization.Encoding.DER))
    assert info.self_signed and info.san_count == 0


def test_375_days_three_sans():
    der = build_certificate([("CN", "x.test")], [("CN", "ca")], datetime(2016, 1, 1, tzinfo=UTC),
                            datetime(2017, 1, 10, tzinfo=UTC), ["x.test", "y.test", "z.test"])
    info = parse_certificate(der)
    assert info.validity_days == 375 and info.san_count == 3 and not info.self_signed


def test_generalized_time_and_utc_pivot():
    assert decode_time(UTC_TIME, b"491231235959Z").year == 2049
    assert decode_time(UTC_TIME, b"500101000000Z").year == 1950
    assert decode_time(GENERALIZED_TIME, b"20510101000000Z") == datetime(2051, 1, 1, tzinfo=UTC)
    der = build_certificate([("CN", "a")], [("CN", "a")], datetime(2040, 1, 1, tzinfo=UTC), datetime(2060, 1, 1, tzinfo=UTC))
    assert parse_certificate(der).validity_days == (datetime(2060, 1, 1) - datetime(2040, 1, 1)).days


def test_escaping_matches_cryptography():
    subj = [("CN", "a+b,c;d")]
    c = real_cert(subj, [("CN", "ca")], datetime(2016, 1, 1, tzinfo=UTC), datetime(2016, 2, 1, tzinfo=UTC))
    info = parse_certificate(c.public_bytes(serialization.Encoding.DER))
    assert info.subject == c.subject.rfc4514_string()


@pytest.mark.parametrize("bad", [b"", b"\x30\x03\x02\x01", b"\x04\x00", b"\x30\x00"])
def test_malformed(bad):
    with pytest.raises(MalformedDer):
        parse_certificate(bad)


def test_truncated_real_cert():
    der = build_certificate([("CN", "a")], [("CN", "b")], datetime(2016, 1, 1, tzinfo=UTC), datetime(2017, 1, 1, tzinfo=UTC))
    with pytest.raises(MalformedDer):
        parse_certificate(der[:-10])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 2**60), st.lists(st.sampled_from(["a.t", "b.t", "c.t"]), max_size=5), st.integers(1, 4000), st.booleans())
def test_self_signed_ignores_unrelated_fields(serial, sans, days, same):
    subj = [("O", "Org"), ("CN", "host.t")]
    iss = subj if same else [("O", "Org"), ("CN", "other.t")]
    nb = datetime(2016, 1, 1, tzinfo=UTC)
    info = parse_certificate(build_certificate(subj, iss, nb, nb + timedelta(days=days), sans, serial=serial))
    assert info.self_signed is same
    assert info.validity_days == days and info.san_count == len(sans)


def test_encode_name_is_der_sequence():
    assert encode_name([("CN", "a")])[0] == 0x30
