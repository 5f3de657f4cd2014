import pytest

from tlscope.report import build_report, histogram, prevalence, render_text, similarity
from tlscope.synth import load_profiles, generate
from tlscope.tls import SchannelConfig
from flows import flow, summary


def test_histogram_and_prevalence():
    assert histogram([1, 1, 2, 3]) == {"1": 50.0, "2": 25.0, "3": 25.0}
    assert histogram([]) == {}
    assert prevalence([[0x2F, 0x35], [0x2F]]) == {"0x002f": 100.0, "0x0035": 50.0}


def test_report_percentages_sum_to_100():
    rep = build_report(generate(load_profiles(), 400, 3))
    assert set(rep["labels"]) == {"enterprise", "malware"}
    for sec in rep["labels"].values():
        for key in ("selected_ciphersuite", "client_key_bits", "validity_days", "san_count", "self_signed"):
            assert sum(sec[key].values()) == pytest.approx(100, abs=0.1)
    assert sum(rep["ports"].values()) == pytest.approx(100, abs=0.1)


def test_single_suite_corpus():
    flows = [flow(sp=i, tls=summary([0x2F], [0x0D], 2048, i % 2 == 0), label="m") for i in range(10)]
    sec = build_report(flows)["labels"]["m"]
    assert sec["offered_ciphersuites"] == {"0x002f": 100.0}
    assert sec["names"] == {"0x002f": "TLS_RSA_WITH_AES_128_CBC_SHA"}
    assert sec["self_signed"] == {"false": 50.0, "true": 50.0}
    assert "m" in render_text(build_report(flows))


def test_exclude_xp():
    xp = SchannelConfig.load()
    xp_suites = next(iter(xp.lists))
    flows = [flow(sp=1, tls=summary(xp_suites), label="a"), flow(sp=2, tls=summary([0x2F]), label="a")]
    rep = build_report(flows, xp_config=xp, exclude_xp=True)
    assert rep["xp_excluded"] == 1 and rep["labels"]["a"]["tls_flows"] == 1
    assert rep["xp_config"] == xp.version


def test_similarity_matrix_from_flows():
    flows = [flow(tls=summary([1]), label="a"), flow(tls=summary([2]), label="b"), flow(tls=summary([1]), label="c")]
    profiles, S = similarity(flows)
    assert [p.family for p in profiles] == ["a", "b", "c"]
    assert S[0, 2] == 1.0 and S[0, 1] == pytest.approx(2.718281828459045 ** -2)
